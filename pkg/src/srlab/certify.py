"""Induced norms, norm-product Lipschitz bounds, certified radii and checks.

Norms of a layer are taken on the linear map it applies, ``x -> W_j^T x``.
For the spectral norm the orientation does not matter; for the
infinity-norm it means the max absolute column sum of the stored ``W_j``.
This is the orientation under which the product bound dominates the
gradient's dual norm.
"""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .net import Mask, Network, effective_weights, forward, grad_input


@dataclass(frozen=True)
class NormPair:
    """Perturbation norm ``p`` and its dual ``q``: only (2, 2) and (inf, 1)."""

    p: float
    q: float

    def __post_init__(self):
        if (self.p, self.q) not in ((2, 2), (np.inf, 1)):
            raise ValueError(f"unsupported norm pair ({self.p}, {self.q})")

    @property
    def name(self) -> str:
        return "l2" if self.p == 2 else "linf"

    @classmethod
    def parse(cls, name: str) -> "NormPair":
        try:
            return {"l2": L2, "linf": LINF}[name]
        except KeyError:
            raise ValueError(f"norm pair must be 'l2' or 'linf', got {name!r}") from None


L2 = NormPair(2, 2)
LINF = NormPair(np.inf, 1)


def spectral_norm(W, tol=1e-10, max_iter=10000, rng=0) -> float:
    """Largest singular value by power iteration on ``W^T W``.

    Stops when the Rayleigh quotient changes by less than ``tol`` relative.
    A start vector that lands in the null space, or a run that hits the
    iteration cap, is retried from a random vector.
    """
    W = np.asarray(W, dtype=np.float64)
    if not np.all(np.isfinite(W)):
        raise ValueError("matrix has non-finite entries")
    if not np.any(W):
        return 0.0
    rng = np.random.default_rng(rng)
    n = W.shape[1]
    v = np.ones(n) / math.sqrt(n)
    best = 0.0
    for _attempt in range(3):
        lam_old = 0.0
        converged = False
        for _ in range(max_iter):
            u = W.T @ (W @ v)
            lam = float(v @ u)
            nu = np.linalg.norm(u)
            if nu == 0.0:
                break
            v = u / nu
            if abs(lam - lam_old) <= tol * abs(lam):
                converged = True
                break
            lam_old = lam
        # ratio rather than ||Wv||: v is unit only up to rounding
        best = max(best, float(np.linalg.norm(W @ v) / np.linalg.norm(v)))
        if converged and best > 0:
            return best
        v = rng.standard_normal(n)
        v /= np.linalg.norm(v)
    return best


def induced_norm(W, p) -> float:
    """Operator norm for ``p`` in {2, inf}: spectral, or max absolute row sum."""
    W = np.asarray(W, dtype=np.float64)
    if not np.all(np.isfinite(W)):
        raise ValueError("matrix has non-finite entries")
    if p == np.inf or p == "inf":
        return float(np.abs(W).sum(axis=1).max())
    if p == 2:
        return spectral_norm(W)
    raise ValueError(f"induced norm only for p in {{2, inf}}, got {p}")


def vector_norm(v, q) -> float:
    v = np.asarray(v, dtype=np.float64)
    if q == 1:
        return float(np.abs(v).sum())
    if q == 2:
        return float(np.sqrt(v @ v))
    if q == np.inf:
        return float(np.abs(v).max())
    raise ValueError(f"unsupported vector norm {q}")


def layer_operators(net: Network, mask: Mask | None):
    """Maps ``A_j = W_j^T`` with each scaling vector folded into the next map.

    Returns the hidden-layer operators and the folded final matrix whose
    columns are the class directions.
    """
    ws = effective_weights(net, mask)
    folded = [ws[0]]
    for w, g in zip(ws[1:], net.scaling):
        folded.append(w * g[:, None])
    return [w.T for w in folded[:-1]], folded[-1]


def _check_classes(net, yhat, k):
    c = net.n_classes
    if not (0 <= yhat < c and 0 <= k < c):
        raise ValueError(f"class indices ({yhat}, {k}) out of range [0, {c})")
    if yhat == k:
        raise ValueError("k must differ from yhat")


def layer_norm_product(net: Network, mask: Mask | None, pair: NormPair) -> float:
    ops, _ = layer_operators(net, mask)
    return math.prod(induced_norm(a, pair.p) for a in ops)


def lipschitz_bound(net: Network, mask: Mask | None, yhat: int, k: int, pair: NormPair) -> float:
    """``||w_yhat - w_k||_q * prod_j ||W_j||_p``, independent of the input."""
    _check_classes(net, yhat, k)
    _, final = layer_operators(net, mask)
    return vector_norm(final[:, yhat] - final[:, k], pair.q) * layer_norm_product(net, mask, pair)


@dataclass
class LipschitzCertificate:
    x: np.ndarray
    yhat: int
    margins: dict
    bounds: dict
    radius: float
    pair: NormPair

    @property
    def margin_min(self) -> float:
        return min(self.margins.values())

    @property
    def bound_min(self) -> float:
        return min(self.bounds.values())


def certified_radius(net: Network, mask: Mask | None, x, pair: NormPair) -> LipschitzCertificate:
    """Radius within which the top class provably cannot change.

    A class whose bound is zero but whose margin is positive imposes no
    constraint; if no class constrains, the radius is ``inf``.
    """
    x = np.asarray(x, dtype=np.float64)
    logits = forward(net, mask, x)
    yhat = int(np.argmax(logits))
    _, final = layer_operators(net, mask)
    prod = layer_norm_product(net, mask, pair)
    margins, bounds = {}, {}
    radius = math.inf
    for k in range(net.n_classes):
        if k == yhat:
            continue
        m = float(logits[yhat] - logits[k])
        L = vector_norm(final[:, yhat] - final[:, k], pair.q) * prod
        margins[k], bounds[k] = m, L
        if m <= 0:
            radius = 0.0
        elif L > 0:
            radius = min(radius, m / L)
    return LipschitzCertificate(x, yhat, margins, bounds, radius, pair)


def sample_ball(x, radius: float, n: int, pair: NormPair, rng) -> np.ndarray:
    """``n`` points uniform in the p-ball; row i depends only on the i-th draw block."""
    rng = np.random.default_rng(rng)
    x = np.asarray(x, dtype=np.float64)
    d = x.size
    if pair.p == np.inf:
        return x + rng.uniform(-radius, radius, size=(n, d))
    z = rng.standard_normal((n, d + 1))
    direction = z[:, :d] / np.linalg.norm(z[:, :d], axis=1, keepdims=True)
    u = ndtr(z[:, d])
    return x + direction * (radius * u ** (1.0 / d))[:, None]


def empirical_lipschitz(net: Network, mask: Mask | None, x, k: int, yhat: int, radius: float,
                        n: int, pair: NormPair, rng=None) -> float:
    """Max of ``||grad(g_yhat - g_k)||_q`` over ``n`` uniform points of the ball: a lower bound."""
    if n < 1 or not radius > 0:
        raise ValueError("need n >= 1 and radius > 0")
    pts = sample_ball(x, radius, n, pair, rng)
    g = grad_input(net, mask, pts, k, yhat)
    # same reduction as the bound, so a linear net gives equality bit for bit
    return max(vector_norm(row, pair.q) for row in np.atleast_2d(g))


def grid_points(x, r: float, pair: NormPair, grid_step: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = int(math.floor(r / grid_step))
    offs = np.arange(-m, m + 1) * grid_step
    if m * grid_step < r:
        offs = np.concatenate(([-r], offs, [r]))
    pts = np.array(list(itertools.product(offs, repeat=x.size)))
    if pair.p == 2:
        pts = pts[np.sqrt((pts * pts).sum(axis=1)) <= r]
    return x + pts


def grid_soundness_check(net: Network, mask: Mask | None, x, r: float, pair: NormPair,
                         grid_step: float, r_max: float | None = None) -> int:
    """Count grid points in the ball of radius ``r*(1-1e-9)`` whose prediction differs.

    Ties with the original class count as violations.  Only for inputs of
    dimension at most 3.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size > 3:
        raise ValueError(f"grid check only supports dimension <= 3, got {x.size}")
    if not grid_step > 0:
        raise ValueError("grid_step must be > 0")
    if math.isinf(r):
        if r_max is None:
            raise ValueError("infinite radius needs r_max")
        r = r_max
    if r <= 0:
        return 0
    yhat = int(np.argmax(forward(net, mask, x)))
    pts = grid_points(x, r * (1 - 1e-9), pair, grid_step)
    logits = forward(net, mask, pts)
    others = np.delete(logits, yhat, axis=1)
    return int(np.count_nonzero(others.max(axis=1) >= logits[:, yhat]))


def write_certificates_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sample", "yhat", "margin_min", "L_min", "radius", "grid_violations"])
        for r in rows:
            w.writerow([r["sample"], r["yhat"], repr(r["margin_min"]), repr(r["L_min"]), repr(r["radius"]),
                        "NA" if r.get("grid_violations") is None else r["grid_violations"]])


@dataclass
class Histogram:
    edges: np.ndarray
    counts: np.ndarray
    underflow: int
    overflow: int
    masked: int

    def rows(self):
        return [(float(lo), float(hi), int(c)) for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts)]

    @property
    def surviving(self) -> int:
        return int(self.counts.sum()) + self.underflow + self.overflow


def weight_histogram(net: Network, mask: Mask | None, bins: int, range: tuple) -> Histogram:
    """Bin surviving weights over a closed range; masked entries are counted apart.

    Weights outside the range land in the under/overflow counts.
    """
    lo, hi = float(range[0]), float(range[1])
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if not lo < hi:
        raise ValueError(f"degenerate histogram range ({lo}, {hi})")
    if mask is None:
        vals = np.concatenate([w.ravel() for w in net.weights])
        masked = 0
    else:
        vals = np.concatenate([w[k] for w, k in zip(net.weights, mask.keep)])
        masked = mask.zeros
    edges = np.linspace(lo, hi, bins + 1)
    counts, _ = np.histogram(vals, bins=edges)
    return Histogram(edges, counts, int((vals < lo).sum()), int((vals > hi).sum()), masked)


def write_histogram_csv(hist: Histogram, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["bin_lo", "bin_hi", "count"])
        w.writerow(["-inf", repr(float(hist.edges[0])), hist.underflow])
        for lo, hi, c in hist.rows():
            w.writerow([repr(lo), repr(hi), c])
        w.writerow([repr(float(hist.edges[-1])), "inf", hist.overflow])
        w.writerow(["masked", "masked", hist.masked])
