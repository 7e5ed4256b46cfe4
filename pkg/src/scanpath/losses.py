"""Spatio-temporal training objective.

The per-pair cost is a KL divergence between a predicted map and a spatialized
ground-truth fixation, optionally penalized for sitting on the center prior;
soft dynamic time warping aligns the two sequences and the loss averages the
alignment cost over every ground-truth scanpath of the image.

All operations accept either plain arrays (metric/evaluation use) or autodiff
tensors (training use) and return the matching kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import GridSpec, ProbMap, Scanpath, SpatializedScanpath, gaussian_map, GazePoint, spatialize
from .errors import ParameterError, ShapeError

# Guard for the 1/KL regularizer when a prediction coincides with the prior.
REG_KL_FLOOR = 1e-6


@dataclass(frozen=True)
class LossConfig:
    """Temperature, center-bias schedule coefficients and spatialization width."""

    gamma: float = 0.1
    lambda_base: float = 0.05
    lambda_slope: float = 0.05
    sigma: float = 2.0

    def __post_init__(self):
        if self.gamma <= 0:
            raise ParameterError(f"gamma must be positive, got {self.gamma}")
        if self.lambda_base < 0 or self.lambda_slope < 0:
            raise ParameterError("schedule coefficients must be nonnegative")
        if self.sigma <= 0:
            raise ParameterError("sigma must be positive")


@dataclass(frozen=True)
class CenterPrior:
    """Gaussian map at the grid center used by the bias regularizer."""

    g_c: ProbMap

    @classmethod
    def for_grid(cls, grid: GridSpec, sigma: float) -> "CenterPrior":
        cx, cy = grid.center
        return cls(gaussian_map(GazePoint(cx, cy), grid, sigma))


@dataclass(frozen=True)
class CostMatrix:
    """Pairwise alignment costs; entries may be floats or scalar tensors."""

    entries: tuple

    def __post_init__(self):
        rows = tuple(tuple(r) for r in self.entries)
        if not rows or not rows[0]:
            raise ParameterError("cost matrix cannot be empty")
        if any(len(r) != len(rows[0]) for r in rows):
            raise ShapeError("cost matrix rows have unequal lengths")
        object.__setattr__(self, "entries", rows)

    @property
    def n(self) -> int:
        return len(self.entries)

    @property
    def m(self) -> int:
        return len(self.entries[0])


def _values_of(p):
    """Raw array for ProbMap/ndarray inputs, pass tensors through."""
    if isinstance(p, Tensor):
        return p
    if isinstance(p, ProbMap):
        return p.values
    return np.asarray(p, dtype=np.float64)


def kl_div(p, q):
    """sum_j P(j) ln(P(j)/Q(j)); >= 0 and 0 iff P == Q.

    Either side may be an autodiff tensor, in which case the result is a
    scalar tensor differentiable in the tensor arguments.
    """
    pv, qv = _values_of(p), _values_of(q)
    pshape = pv.shape if not isinstance(pv, Tensor) else pv.data.shape
    qshape = qv.shape if not isinstance(qv, Tensor) else qv.data.shape
    if pshape != qshape:
        raise ShapeError(f"kl_div: shape {pshape} vs {qshape}")
    if isinstance(pv, Tensor) or isinstance(qv, Tensor):
        pt = pv if isinstance(pv, Tensor) else ad.constant(pv)
        qt = qv if isinstance(qv, Tensor) else ad.constant(qv)
        return ad.tsum(ad.hadamard(pt, ad.sub(ad.tlog(pt), ad.tlog(qt))))
    return float(np.sum(pv * (np.log(pv) - np.log(qv))))


def soft_min(values, gamma: float):
    """-gamma * ln sum(exp(-a_i / gamma)), <= min(values), -> min as gamma -> 0."""
    values = list(values)
    if not values:
        raise ParameterError("soft_min of an empty collection")
    if gamma <= 0:
        raise ParameterError(f"gamma must be positive, got {gamma}")
    if any(isinstance(v, Tensor) for v in values):
        return ad.softmin(values, gamma)
    a = np.asarray(values, dtype=np.float64)
    m = float(a.min())
    return m - gamma * math.log(float(np.exp(-(a - m) / gamma).sum()))


def soft_dtw(delta, gamma: float):
    """Soft-DTW over a cost matrix via the soft-min dynamic program.

    Accepts a CostMatrix, an ndarray or nested lists; entries may be scalar
    tensors, making the result differentiable in every entry.
    """
    if isinstance(delta, CostMatrix):
        rows = delta.entries
    elif isinstance(delta, np.ndarray):
        if delta.ndim != 2 or delta.size == 0:
            raise ParameterError("soft_dtw needs a nonempty 2-D cost matrix")
        rows = tuple(tuple(float(v) for v in r) for r in delta)
    else:
        rows = tuple(tuple(r) for r in delta)
        if not rows or not rows[0]:
            raise ParameterError("soft_dtw needs a nonempty 2-D cost matrix")
    n, m = len(rows), len(rows[0])
    prev = None
    for i in range(n):
        cur = []
        for j in range(m):
            d = rows[i][j]
            if i == 0 and j == 0:
                cur.append(d)
            elif i == 0:
                cur.append(d + cur[j - 1])
            elif j == 0:
                cur.append(d + prev[0])
            else:
                cur.append(d + soft_min((prev[j], cur[j - 1], prev[j - 1]), gamma))
        prev = cur
    return prev[m - 1]


def lambda_schedule(t: float, cfg: LossConfig) -> float:
    """Center-bias weight at time index t: base + slope * ln(t + 1)."""
    if t < 0:
        raise ParameterError(f"schedule index must be >= 0, got {t}")
    return cfg.lambda_base + cfg.lambda_slope * math.log(t + 1.0)


def pairwise_cost(r_i, g_j, lam: float, prior: CenterPrior):
    """KL(r_i || g_j) plus lam / KL(r_i || g_c), the denominator floored.

    The regularizer grows as the prediction approaches the center prior,
    discouraging predictions that park on the image center.
    """
    if lam < 0:
        raise ParameterError("lambda must be nonnegative")
    base = kl_div(r_i, g_j)
    if lam == 0:
        return base
    denom = kl_div(r_i, prior.g_c)
    if isinstance(base, Tensor) or isinstance(denom, Tensor):
        denom_t = denom if isinstance(denom, Tensor) else ad.constant(denom)
        reg = ad.recip(ad.clamp_min(denom_t, REG_KL_FLOOR))
        base_t = base if isinstance(base, Tensor) else ad.constant(base)
        return ad.add(base_t, ad.scalar_mul(reg, lam))
    return base + lam / max(denom, REG_KL_FLOOR)


def _spatialized(truth, grid: GridSpec, sigma: float) -> list[SpatializedScanpath]:
    out = []
    for s in truth:
        if isinstance(s, SpatializedScanpath):
            out.append(s)
        elif isinstance(s, Scanpath):
            out.append(spatialize(s, grid, sigma))
        else:
            raise ParameterError(f"unsupported ground-truth entry: {type(s)!r}")
    return out


def kl_dtw_loss(pred_maps, truth, cfg: LossConfig, grid: GridSpec | None = None):
    """Mean soft-DTW alignment cost of the prediction against every scanpath.

    pred_maps: predicted per-step maps (tensors during training); truth: the
    image's ground-truth scanpaths, raw or already spatialized. The center-bias
    weight for row i follows lambda_schedule(i), the fixation's time index.

    The cost matrices are assembled from shared per-prediction subterms
    (sum P log P and the center regularizer are independent of the ground
    truth), which is algebraically identical to calling pairwise_cost per pair.
    """
    pred_maps = [_values_of(p) for p in pred_maps]
    if not pred_maps:
        raise ParameterError("prediction sequence is empty")
    if not truth:
        raise ParameterError("ground-truth scanpath set is empty")
    first = pred_maps[0]
    shape = first.data.shape if isinstance(first, Tensor) else first.shape
    if grid is None:
        grid = GridSpec(width=shape[1], height=shape[0])
    spat = _spatialized(truth, grid, cfg.sigma)
    prior = CenterPrior.for_grid(grid, cfg.sigma)
    lambdas = [lambda_schedule(i, cfg) for i in range(len(pred_maps))]
    use_reg = any(l > 0 for l in lambdas)
    log_gc = np.log(prior.g_c.values)

    if any(isinstance(p, Tensor) for p in pred_maps):
        preds = [p if isinstance(p, Tensor) else ad.constant(p) for p in pred_maps]
        selfs = [ad.tsum(ad.hadamard(p, ad.tlog(p))) for p in preds]
        reg_terms = None
        if use_reg:
            reg_terms = []
            for i, p in enumerate(preds):
                kl_c = ad.sub(selfs[i], ad.tsum(ad.hadamard(p, ad.constant(log_gc))))
                reg_terms.append(ad.scalar_mul(ad.recip(ad.clamp_min(kl_c, REG_KL_FLOOR)), lambdas[i]))
        total = None
        for s in spat:
            log_qs = [ad.constant(np.log(g.values)) for g in s.maps]
            rows = []
            for i, p in enumerate(preds):
                row = []
                for lq in log_qs:
                    d = ad.sub(selfs[i], ad.tsum(ad.hadamard(p, lq)))
                    if use_reg:
                        d = ad.add(d, reg_terms[i])
                    row.append(d)
                rows.append(tuple(row))
            term = soft_dtw(CostMatrix(tuple(rows)), cfg.gamma)
            total = term if total is None else total + term
        return ad.scalar_mul(total, 1.0 / len(spat))

    # pure numeric path, vectorized across pairs
    P = np.stack(pred_maps).reshape(len(pred_maps), -1)
    selfs = (P * np.log(P)).sum(axis=1)
    reg = np.zeros(len(pred_maps))
    if use_reg:
        kl_c = selfs - P @ log_gc.reshape(-1)
        reg = np.asarray(lambdas) / np.maximum(kl_c, REG_KL_FLOOR)
    total = 0.0
    for s in spat:
        Q = np.stack([g.values for g in s.maps]).reshape(s.n, -1)
        delta = selfs[:, None] - P @ np.log(Q).T + reg[:, None]
        total += soft_dtw(delta, cfg.gamma)
    return total / len(spat)
