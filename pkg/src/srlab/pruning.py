"""One-shot pruning (GUP, LUP, FP, NS), random re-init baselines, sparsity stats.

``p_percent`` is the target ratio over the pruned pool (all weights for
GUP, each layer for LUP, each layer's units for FP, all hidden units for
NS).  Entries already zero in ``mask_in`` count toward the target, so
re-running a method at the same ratio adds nothing and a lottery schedule
can pass cumulative ratios.
"""

from __future__ import annotations

import math
import warnings
from typing import NamedTuple

import numpy as np

from .net import Mask, Network, check_mask, effective_weights


class PruningError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _check_p(p_percent):
    if not 0 < p_percent < 100:
        raise PruningError(f"pruning ratio must lie in (0, 100), got {p_percent}")


def _frac(p_percent):
    # 31.7% of 1000 must be 317, not 316.99999
    return round(p_percent * 1e-2, 12)


def _keep(net, mask_in):
    check_mask(net, mask_in)
    if mask_in is None:
        return [np.ones(w.shape, dtype=bool) for w in net.weights]
    return [k.copy() for k in mask_in.keep]


def _prune_smallest(mags, keep, n_new):
    """Clear ``n_new`` surviving entries with the smallest magnitude.

    ``mags``/``keep`` are lists of same-shaped arrays; ties break on
    (layer, row, column).
    """
    if n_new <= 0:
        return
    layer_ids, flat_ids, vals = [], [], []
    for j, (m, k) in enumerate(zip(mags, keep)):
        idx = np.flatnonzero(k.ravel())
        layer_ids.append(np.full(idx.size, j))
        flat_ids.append(idx)
        vals.append(m.ravel()[idx])
    layer_ids = np.concatenate(layer_ids)
    flat_ids = np.concatenate(flat_ids)
    vals = np.concatenate(vals)
    if n_new > vals.size:
        raise PruningError(f"cannot prune {n_new} weights, only {vals.size} survive")
    # row-major flat index orders (row, column) within a layer
    order = np.lexsort((flat_ids, layer_ids, vals))[:n_new]
    for j, f in zip(layer_ids[order], flat_ids[order]):
        keep[j].flat[f] = False


def gup(net: Network, mask_in: Mask | None, p_percent: float, include_final: bool = True) -> Mask:
    """Global unstructured magnitude pruning over all layers pooled together."""
    _check_p(p_percent)
    keep = _keep(net, mask_in)
    layers = range(net.depth) if include_final else range(net.depth - 1)
    layers = list(layers)
    if not layers:
        raise PruningError("no prunable layers")
    total = sum(keep[j].size for j in layers)
    zeros = sum(keep[j].size - np.count_nonzero(keep[j]) for j in layers)
    n_new = round_half_up(_frac(p_percent) * total) - zeros
    mags = [np.abs(w) for w in effective_weights(net, None)]
    sub = [keep[j] for j in layers]
    _prune_smallest([mags[j] for j in layers], sub, n_new)
    return Mask(tuple(keep))


def lup(net: Network, mask_in: Mask | None, p_percent: float) -> Mask:
    """Layer-local unstructured magnitude pruning: each layer reaches p%."""
    _check_p(p_percent)
    keep = _keep(net, mask_in)
    for j, w in enumerate(net.weights):
        zeros = keep[j].size - np.count_nonzero(keep[j])
        n_new = round_half_up(_frac(p_percent) * keep[j].size) - zeros
        _prune_smallest([np.abs(w)], [keep[j]], n_new)
    return Mask(tuple(keep))


def removed_units(keep: list, layer: int) -> np.ndarray:
    """Hidden units of ``layer`` (0-based hidden index) whose incoming column is fully masked."""
    return ~keep[layer].any(axis=0)


def _remove_unit(keep, layer, unit):
    keep[layer][:, unit] = False
    keep[layer + 1][unit, :] = False


def fp(net: Network, mask_in: Mask | None, p_percent: float) -> Mask:
    """Neuron pruning per hidden layer by the L1 norm of incoming weights.

    Per-layer counts use floor.  A removed unit loses its incoming column
    and its outgoing row.
    """
    _check_p(p_percent)
    keep = _keep(net, mask_in)
    ws = effective_weights(net, Mask(tuple(keep)))
    for j in range(net.depth - 1):
        n = ws[j].shape[1]
        gone = removed_units(keep, j)
        n_new = math.floor(_frac(p_percent) * n) - int(gone.sum())
        if n_new <= 0:
            continue
        alive = np.flatnonzero(~gone)
        if n_new >= alive.size:
            raise PruningError(f"layer {j + 1}: pruning {p_percent}% would remove every unit")
        l1 = np.abs(ws[j][:, alive]).sum(axis=0)
        for u in alive[np.lexsort((alive, l1))[:n_new]]:
            _remove_unit(keep, j, u)
    return Mask(tuple(keep))


class NSResult(NamedTuple):
    mask: Mask
    effective_ratio: float
    warning: bool


def ns(net: Network, mask_in: Mask | None, p_percent: float) -> NSResult:
    """Network slimming: remove hidden units with the smallest |gamma| globally.

    Every layer keeps at least one unit; when that guard binds, the next
    smallest candidates elsewhere are taken, and if the target is still out
    of reach the maximal feasible mask comes back with ``warning`` set.
    """
    _check_p(p_percent)
    if net.depth < 2:
        raise PruningError("network has no hidden units to slim")
    keep = _keep(net, mask_in)
    hidden = range(net.depth - 1)
    total = sum(net.weights[j].shape[1] for j in hidden)
    gone = [removed_units(keep, j) for j in hidden]
    alive_count = [int((~g).sum()) for g in gone]
    target = math.floor(_frac(p_percent) * total)
    n_new = target - sum(int(g.sum()) for g in gone)
    cand = [(abs(net.scaling[j][u]), j, u) for j in hidden for u in np.flatnonzero(~gone[j])]
    cand.sort()
    removed = 0
    for _, j, u in cand:
        if removed >= n_new:
            break
        if alive_count[j] <= 1:
            continue
        _remove_unit(keep, j, u)
        alive_count[j] -= 1
        removed += 1
    short = removed < n_new
    if short:
        warnings.warn(f"NS guard: reached {total - sum(alive_count)}/{total} units instead of {target}",
                      RuntimeWarning, stacklevel=2)
    return NSResult(Mask(tuple(keep)), (total - sum(alive_count)) / total, short)


METHODS = ("gup", "lup", "fp", "ns")


def prune(method: str, net: Network, mask_in: Mask | None, p_percent: float, include_final: bool = True) -> Mask:
    """Dispatch by name; ``include_final`` only affects GUP."""
    if method == "gup":
        return gup(net, mask_in, p_percent, include_final)
    if method == "lup":
        return lup(net, mask_in, p_percent)
    if method == "fp":
        return fp(net, mask_in, p_percent)
    if method == "ns":
        return ns(net, mask_in, p_percent).mask
    raise PruningError(f"unknown pruning method {method!r}")


def rand_reinit(net: Network, mask: Mask | None, seed) -> Network:
    """Fresh He-uniform weights on the surviving structure; scaling reset to 1."""
    rng = np.random.default_rng(seed)
    ws = []
    for w in net.weights:
        bound = np.sqrt(6.0 / w.shape[0])
        ws.append(rng.uniform(-bound, bound, size=w.shape))
    if mask is not None:
        check_mask(net, mask)
        ws = [np.where(k, w, 0.0) for w, k in zip(ws, mask.keep)]
    return Network(tuple(ws), tuple(np.ones_like(g) for g in net.scaling))


def sparsity_report(net: Network, mask: Mask | None = None) -> dict:
    """Exact L0/density/L1/L2 plus induced norms of each layer's map ``x -> W^T x``."""
    from .certify import induced_norm

    layers = []
    for j, w in enumerate(effective_weights(net, mask)):
        layers.append({
            "layer": j + 1,
            "shape": list(w.shape),
            "l0": int(np.count_nonzero(w)),
            "density": np.count_nonzero(w) / w.size,
            "l1": math.fsum(np.abs(w).ravel()),
            "l2": math.sqrt(math.fsum((w * w).ravel())),
            "linf_induced": induced_norm(w.T, np.inf),
            "spectral": induced_norm(w.T, 2),
        })
    total = sum(w.size for w in net.weights)
    l0 = sum(r["l0"] for r in layers)
    glob = {
        "l0": l0,
        "total": total,
        "density": l0 / total,
        "l1": math.fsum(r["l1"] for r in layers),
        "l2": math.sqrt(math.fsum(r["l2"] ** 2 for r in layers)),
        "linf_induced_product": math.prod(r["linf_induced"] for r in layers),
        "spectral_product": math.prod(r["spectral"] for r in layers),
    }
    return {"layers": layers, "global": glob}
