"""Linear probe fitting and exact finite-family error minimization.

Probes approximate infimums over the linear-head family by L2-regularized
multinomial logistic regression.  For verification, a finite probe family
makes the minimum exact and a 2-d enumeration oracle computes the best
achievable linear 0-1 error without any fitting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .core import LinearProbe

WEIGHT_UNIFORM = "uniform"
WEIGHT_PER_DOMAIN_EQUAL = "per_domain_equal"


@dataclass(frozen=True)
class ProbeFitConfig:
    l2_strength: float = 1e-4
    max_iterations: int = 1000
    gradient_tolerance: float = 1e-7
    seed: int = 0
    class_weighting: str = WEIGHT_UNIFORM

    def __post_init__(self):
        if self.l2_strength < 0:
            raise ValueError("l2_strength must be nonnegative")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.gradient_tolerance <= 0:
            raise ValueError("gradient_tolerance must be positive")
        if self.class_weighting not in (WEIGHT_UNIFORM, WEIGHT_PER_DOMAIN_EQUAL):
            raise ValueError(f"unknown class_weighting {self.class_weighting!r}")


@dataclass(frozen=True)
class FitRecord:
    iterations: int
    objective: float
    grad_max: float
    converged: bool
    n_points: int
    mode: str = "fit"

    def to_dict(self):
        return {
            "iterations": self.iterations,
            "objective": self.objective,
            "grad_max": self.grad_max,
            "converged": self.converged,
            "n_points": self.n_points,
            "mode": self.mode,
        }


@dataclass(frozen=True)
class FiniteProbeFamily:
    """An explicit list of probes over which infimums are computed exactly."""

    probes: tuple

    def __post_init__(self):
        if len(self.probes) == 0:
            raise ValueError("probe family must be nonempty")
        k = self.probes[0].num_outputs
        d = self.probes[0].dim
        for p in self.probes:
            if p.num_outputs != k or p.dim != d:
                raise ValueError("all probes in a family must share num_outputs and dim")

    def __len__(self):
        return len(self.probes)

    @property
    def num_outputs(self):
        return self.probes[0].num_outputs

    @property
    def dim(self):
        return self.probes[0].dim

    def to_dict(self):
        return {"probes": [p.to_dict() for p in self.probes]}

    @classmethod
    def from_dict(cls, obj):
        return cls(tuple(LinearProbe.from_dict(p) for p in obj["probes"]))


def _as_points(z, targets):
    z = np.asarray(z, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if z.ndim != 2:
        raise ValueError("z must be a 2-d array of shape (n, dim)")
    if targets.shape != (z.shape[0],):
        raise ValueError("targets must be a vector matching the number of points")
    return z, targets


def _objective_and_grad(theta, z, targets, weights, lam, k):
    n, d = z.shape
    w = theta[: k * d].reshape(k, d)
    b = theta[k * d :]
    u = z @ w.T + b
    u_max = u.max(axis=1, keepdims=True)
    exp_u = np.exp(u - u_max)
    denom = exp_u.sum(axis=1)
    log_z = np.log(denom) + u_max[:, 0]
    ce = log_z - u[np.arange(n), targets]
    obj = float(weights @ ce) + 0.5 * lam * float((w * w).sum())
    p = exp_u / denom[:, None]
    p[np.arange(n), targets] -= 1.0
    p *= weights[:, None]
    gw = p.T @ z + lam * w
    gb = p.sum(axis=0)
    return obj, np.concatenate([gw.ravel(), gb])


def fit_probe(z, targets, num_outputs, cfg=None, sample_weight=None, allow_single_target=False):
    """Fit a linear probe by L2-regularized multinomial logistic regression.

    The optimizer starts from zero weights (the objective is convex, so the
    start only affects the trajectory, not the optimum) and runs a
    deterministic quasi-Newton descent until the gradient infinity norm
    falls below ``cfg.gradient_tolerance`` or ``cfg.max_iterations`` passes.

    ``sample_weight`` overrides the weighting entirely; otherwise
    ``cfg.class_weighting`` selects uniform weights or weights that make
    every target value contribute equally.

    Returns ``(probe, record)`` where the record carries iteration count,
    final objective and a convergence flag.
    """
    cfg = cfg or ProbeFitConfig()
    z, targets = _as_points(z, targets)
    n, d = z.shape
    if n == 0:
        raise ValueError("cannot fit a probe on an empty point list")
    if not np.isfinite(z).all():
        raise ValueError("non-finite input features")
    if ((targets < 0) | (targets >= num_outputs)).any():
        raise ValueError("targets out of range for num_outputs")
    present = np.unique(targets)
    if present.size < 2 and not allow_single_target:
        raise ValueError(
            "fewer than 2 distinct targets present; pass allow_single_target=True "
            "to fit a degenerate probe"
        )
    if sample_weight is not None:
        weights = np.asarray(sample_weight, dtype=np.float64)
        if weights.shape != (n,):
            raise ValueError("sample_weight must match the number of points")
        if (weights < 0).any() or weights.sum() <= 0:
            raise ValueError("sample_weight must be nonnegative with positive sum")
    elif cfg.class_weighting == WEIGHT_PER_DOMAIN_EQUAL:
        counts = np.bincount(targets, minlength=num_outputs).astype(np.float64)
        weights = np.zeros(n)
        for t in present:
            weights[targets == t] = 1.0 / (present.size * counts[t])
    else:
        weights = np.full(n, 1.0 / n)
    weights = weights / weights.sum()

    k = int(num_outputs)
    x0 = np.zeros(k * d + k)
    res = minimize(
        _objective_and_grad,
        x0,
        args=(z, targets, weights, cfg.l2_strength, k),
        method="L-BFGS-B",
        jac=True,
        options={
            "maxiter": cfg.max_iterations,
            "maxfun": cfg.max_iterations * 4,
            "gtol": cfg.gradient_tolerance,
            "ftol": 1e-18,
            "maxcor": 20,
        },
    )
    obj, grad = _objective_and_grad(res.x, z, targets, weights, cfg.l2_strength, k)
    grad_max = float(np.abs(grad).max())
    probe = LinearProbe(res.x[: k * d].reshape(k, d), res.x[k * d :])
    record = FitRecord(
        iterations=int(res.nit),
        objective=obj,
        grad_max=grad_max,
        converged=grad_max <= cfg.gradient_tolerance,
        n_points=n,
    )
    return probe, record


def zero_one_error(probe, z, targets, weights=None):
    """Fraction (or weighted fraction) of points whose argmax score misses the target."""
    z, targets = _as_points(z, targets)
    if z.shape[0] == 0:
        raise ValueError("empty point list")
    miss = (probe.predict(z) != targets).astype(np.float64)
    if weights is None:
        return float(miss.mean())
    weights = np.asarray(weights, dtype=np.float64)
    return float((miss * weights).sum() / weights.sum())


def exact_best_error(family, z, targets, weights=None, batch=4096):
    """Exact minimum of the 0-1 error over a finite probe family.

    Returns ``(error, index)``; the lowest index wins ties.
    """
    z, targets = _as_points(z, targets)
    if z.shape[0] == 0:
        raise ValueError("empty point list")
    if family.dim != z.shape[1]:
        raise ValueError(f"family expects dim {family.dim}, got {z.shape[1]}")
    if weights is None:
        w = np.full(z.shape[0], 1.0 / z.shape[0])
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()
    k = family.num_outputs
    best_err = np.inf
    best_idx = -1
    probes = family.probes
    for start in range(0, len(probes), batch):
        chunk = probes[start : start + batch]
        wm = np.stack([p.weights for p in chunk])  # (m, k, d)
        bm = np.stack([p.bias for p in chunk])  # (m, k)
        scores = np.einsum("nd,mkd->nmk", z, wm) + bm[None, :, :]
        preds = scores.argmax(axis=2)  # (n, m)
        errs = ((preds != targets[:, None]).astype(np.float64) * w[:, None]).sum(axis=0)
        i = int(np.argmin(errs))
        if errs[i] < best_err:
            best_err = float(errs[i])
            best_idx = start + i
    return best_err, best_idx


# -- oracle constructions --------------------------------------------------------


def binary_threshold_probe(direction, offset, dim=None):
    """Binary probe predicting class 1 iff direction . z > offset."""
    direction = np.asarray(direction, dtype=np.float64)
    d = dim or direction.shape[0]
    w = np.zeros((2, d))
    w[1, : direction.shape[0]] = direction
    b = np.array([0.0, -float(offset)])
    return LinearProbe(w, b)


def constant_probe(output, num_outputs, dim):
    """Probe that predicts a fixed output everywhere."""
    b = np.zeros(num_outputs)
    b[output] = 1.0
    return LinearProbe(np.zeros((num_outputs, dim)), b)


def binary_grid_family(z, n_angles=180, n_offsets=81, pad=0.05):
    """Dense grid of 2-d binary probes over line angles and offsets.

    Angles cover the full circle so both orientations of every direction
    appear; offsets span the projection range of the data.  Constant
    predictors are included.
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[1] != 2:
        raise ValueError("binary_grid_family requires 2-d points")
    probes = [constant_probe(0, 2, 2), constant_probe(1, 2, 2)]
    angles = np.linspace(0.0, 2.0 * np.pi, n_angles, endpoint=False)
    for theta in angles:
        w = np.array([np.cos(theta), np.sin(theta)])
        proj = z @ w
        lo, hi = proj.min(), proj.max()
        span = max(hi - lo, 1e-12)
        offsets = np.linspace(lo - pad * span, hi + pad * span, n_offsets)
        for r in offsets:
            probes.append(binary_threshold_probe(w, r))
    return FiniteProbeFamily(tuple(probes))


def prototype_family(prototype_tuples):
    """Nearest-prototype probes: each tuple of K prototype points becomes a
    linear K-class probe scoring by negative squared distance."""
    probes = []
    for protos in prototype_tuples:
        m = np.asarray(protos, dtype=np.float64)
        w = 2.0 * m
        b = -(m * m).sum(axis=1)
        probes.append(LinearProbe(w, b))
    return FiniteProbeFamily(tuple(probes))


def best_linear01_error_2d(z, targets, weights=None):
    """Exact minimum 0-1 error of any linear classifier on 2-d binary data.

    Enumerates every realizable dichotomy: for each candidate direction
    (perpendiculars of all point pairs, slightly rotated both ways, plus the
    axes), it scans all thresholds that fall strictly between consecutive
    projections.  Splits landing inside a tie are skipped, so the returned
    value never undercuts what a real separating line can achieve.
    """
    z, targets = _as_points(z, targets)
    n = z.shape[0]
    if z.shape[1] != 2:
        raise ValueError("best_linear01_error_2d requires 2-d points")
    if not np.isin(targets, [0, 1]).all():
        raise ValueError("targets must be binary (0/1)")
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=np.float64)
        w = w / w.sum()

    diffs = z[:, None, :] - z[None, :, :]
    iu = np.triu_indices(n, k=1)
    d = diffs[iu]
    norms = np.linalg.norm(d, axis=1)
    d = d[norms > 0] / norms[norms > 0, None]
    perp = np.stack([-d[:, 1], d[:, 0]], axis=1)
    eps = 1e-7
    dirs = np.concatenate(
        [
            perp,
            perp + eps * d,
            perp - eps * d,
            np.array([[1.0, 0.0], [0.0, 1.0]]),
        ]
    )

    total1 = float(w[targets == 1].sum())
    total0 = float(w[targets == 0].sum())
    best = min(total0, total1)  # constant predictors
    chunk = 2048
    for start in range(0, dirs.shape[0], chunk):
        dd = dirs[start : start + chunk]
        proj = z @ dd.T  # (n, m)
        order = np.argsort(proj, axis=0, kind="stable")
        sorted_proj = np.take_along_axis(proj, order, axis=0)
        t_sorted = targets[order]
        w_sorted = w[order]
        # prefix sums of class-1 / class-0 weight below each split point
        c1 = np.cumsum(w_sorted * (t_sorted == 1), axis=0)
        c0 = np.cumsum(w_sorted * (t_sorted == 0), axis=0)
        # split after position i is realizable only between distinct projections
        valid = sorted_proj[:-1, :] < sorted_proj[1:, :]
        # predict 0 below / 1 above: err = class-1 weight below + class-0 weight above
        err_low1 = c1[:-1, :] + (total0 - c0[:-1, :])
        err_both = np.minimum(err_low1, 1.0 - err_low1)
        err_both = np.where(valid, err_both, np.inf)
        if err_both.size:
            m = float(err_both.min())
            if m < best:
                best = m
    return max(best, 0.0)
