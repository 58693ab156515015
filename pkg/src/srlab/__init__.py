"""Adversarial pruning laboratory for small bias-free ReLU networks."""

from .attack import AttackConfig, DistortionSearchConfig, distortion_bound, evaluate, mean_distortion, pgd_attack
from .certify import L2, LINF, NormPair, certified_radius, empirical_lipschitz, induced_norm, lipschitz_bound
from .net import Mask, Network, apply_mask, forward, forward_with_pattern, grad_input, init_network, rewind

__all__ = [
    "AttackConfig", "DistortionSearchConfig", "distortion_bound", "evaluate", "mean_distortion", "pgd_attack",
    "L2", "LINF", "NormPair", "certified_radius", "empirical_lipschitz", "induced_norm", "lipschitz_bound",
    "Mask", "Network", "apply_mask", "forward", "forward_with_pattern", "grad_input", "init_network", "rewind",
]
__version__ = "0.1.0"
