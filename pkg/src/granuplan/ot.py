"""Optimal-transport distances between particle clouds.

Two distances are provided:

* ``exact_w2``: the exact quadratic Wasserstein distance between two
  equal-size uniform clouds via optimal assignment (scipy's Hungarian
  solver).  Returns the root mean squared matched distance.
* ``sinkhorn_divergence``: the debiased entropic divergence
  S_eps(a, b) = OT_eps(a, b) - (OT_eps(a, a) + OT_eps(b, b)) / 2
  with cost |x - y|^2, computed with log-domain damped symmetric updates
  and epsilon annealing.  As eps -> 0 this approaches exact_w2 squared;
  debiasing makes S_eps(a, a) = 0 exactly and keeps the value useful as a
  planning objective at moderate eps.

The divergence never needs gradients (the planner is derivative-free), so
everything here is plain float64 numpy.
"""

import dataclasses

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

__all__ = [
    "PointCloud", "SinkhornResult", "exact_w2", "sinkhorn_divergence",
    "TargetCost", "auto_epsilon",
]


@dataclasses.dataclass
class PointCloud:
    """Weighted point cloud; weights default to uniform and are normalized."""

    positions: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2:
            raise ValueError("positions must be (N, dim)")
        n = self.positions.shape[0]
        if n == 0:
            raise ValueError("point cloud is empty")
        if self.weights is None:
            self.weights = np.full(n, 1.0 / n)
        else:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
                raise ValueError("weights must be non-negative with positive sum")
            self.weights = w / w.sum()

    @property
    def n(self):
        return self.positions.shape[0]


def _as_cloud(x):
    return x if isinstance(x, PointCloud) else PointCloud(np.asarray(x))


@dataclasses.dataclass
class SinkhornResult:
    value: float
    iterations: int
    converged: bool
    marginal_error: float


def exact_w2(x, y):
    """Exact 2-Wasserstein distance between equal-size uniform clouds.

    Solves the assignment problem on squared distances and returns
    sqrt(mean_i |x_i - y_match(i)|^2).
    """
    a, b = _as_cloud(x), _as_cloud(y)
    if a.n != b.n:
        raise ValueError("exact_w2 needs equal-size clouds")
    cost = _sqdist(a.positions, b.positions)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].mean()))


def _sqdist(x, y):
    x2 = np.einsum("ij,ij->i", x, x)
    y2 = np.einsum("ij,ij->i", y, y)
    d2 = x2[:, None] + y2[None, :] - 2.0 * (x @ y.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def auto_epsilon(x, y=None, fraction=0.05):
    """Default blur: (fraction * bounding box diagonal)^2 of the inputs."""
    pts = _as_cloud(x).positions
    if y is not None:
        pts = np.concatenate([pts, _as_cloud(y).positions], axis=0)
    span = pts.max(axis=0) - pts.min(axis=0)
    diag = float(np.linalg.norm(span))
    if diag <= 0:
        return 1e-6
    return (fraction * diag) ** 2


def _softmin(C, eps, g, log_w):
    # T(g)_i = -eps * log sum_j w_j exp((g_j - C_ij) / eps)
    return -eps * logsumexp((g[None, :] - C) / eps + log_w[None, :], axis=1)


def _ot_dual(C, eps_target, a, b, tol, max_iters, anneal_factor, eps_start):
    """Damped symmetric Sinkhorn with annealing; returns (f, g, iters, err)."""
    log_a = np.log(a)
    log_b = np.log(b)
    f = np.zeros(C.shape[0])
    g = np.zeros(C.shape[1])
    schedule = []
    eps = max(eps_start, eps_target)
    while eps > eps_target * 1.0001:
        schedule.append(eps)
        eps = eps * anneal_factor
    schedule.append(eps_target)

    it = 0
    err = np.inf
    for stage_eps in schedule[:-1]:
        # damped simultaneous updates track the annealing path stably
        for _ in range(2):
            it += 1
            f_new = 0.5 * (f + _softmin(C, stage_eps, g, log_b))
            g_new = 0.5 * (g + _softmin(C.T, stage_eps, f, log_a))
            f, g = f_new, g_new
    # at the target blur the plain alternating recursion converges linearly,
    # roughly four times faster in the exponent than the damped sweep
    eps = schedule[-1]
    for _ in range(max_iters):
        it += 1
        f = _softmin(C, eps, g, log_b)
        g = _softmin(C.T, eps, f, log_a)
        row_log = logsumexp(
            (f[:, None] + g[None, :] - C) / eps + log_b[None, :], axis=1)
        err = float(np.sum(a * np.abs(np.expm1(row_log))))
        if err < tol:
            return f, g, it, err
    return f, g, it, err


def _ot_value(X, Y, wx, wy, eps, tol, max_iters, anneal_factor):
    """One entropic OT problem solved with the shared annealed recursion.

    Using the exact same code path for the cross and self terms makes the
    debiased divergence vanish identically when both inputs coincide.
    """
    C = _sqdist(X, Y)
    eps_start = max(float(C.max()), eps)
    f, g, it, err = _ot_dual(C, eps, wx, wy, tol, max_iters, anneal_factor,
                             eps_start)
    return float(wx @ f + wy @ g), it, err


def sinkhorn_divergence(x, y, epsilon=None, tol=1e-6, max_iters=2000,
                        anneal_factor=0.5):
    """Debiased entropic OT divergence with squared-distance cost.

    Args:
        x, y: (N, dim) arrays or PointClouds (sizes may differ).
        epsilon: blur parameter (squared length units); auto if None.
        tol: L1 marginal violation that counts as converged.
        max_iters: iteration cap for the final annealing stage.
        anneal_factor: geometric decay per annealing stage.

    Returns a SinkhornResult whose value approaches exact_w2(x, y)^2 as
    epsilon -> 0.
    """
    a, b = _as_cloud(x), _as_cloud(y)
    if a.positions.shape[1] != b.positions.shape[1]:
        raise ValueError("clouds must share a dimension")
    if epsilon is None:
        epsilon = auto_epsilon(a, b)
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")

    ot_ab, iters, err = _ot_value(a.positions, b.positions, a.weights,
                                  b.weights, epsilon, tol, max_iters,
                                  anneal_factor)
    ot_aa, _, _ = _ot_value(a.positions, a.positions, a.weights, a.weights,
                            epsilon, tol, max_iters, anneal_factor)
    ot_bb, _, _ = _ot_value(b.positions, b.positions, b.weights, b.weights,
                            epsilon, tol, max_iters, anneal_factor)

    value = ot_ab - 0.5 * (ot_aa + ot_bb)
    return SinkhornResult(
        value=value, iterations=iters,
        converged=bool(err < tol), marginal_error=err,
    )


class TargetCost:
    """Sinkhorn divergence against a fixed target, with the target's
    self-transport term cached.  Counts evaluations (one per rollout in
    the planner, which is the planner's entire metric budget)."""

    def __init__(self, target, epsilon=None, tol=1e-6, max_iters=2000):
        self.target = _as_cloud(target)
        if epsilon is None:
            epsilon = auto_epsilon(self.target)
        self.epsilon = float(epsilon)
        self.tol = tol
        self.max_iters = max_iters
        self._ot_bb, _, _ = _ot_value(
            self.target.positions, self.target.positions,
            self.target.weights, self.target.weights,
            self.epsilon, tol, max_iters, 0.5)
        self.calls = 0

    def __call__(self, x):
        self.calls += 1
        a = _as_cloud(x)
        b = self.target
        ot_ab, _, _ = _ot_value(a.positions, b.positions, a.weights,
                                b.weights, self.epsilon, self.tol,
                                self.max_iters, 0.5)
        ot_aa, _, _ = _ot_value(a.positions, a.positions, a.weights,
                                a.weights, self.epsilon, self.tol,
                                self.max_iters, 0.5)
        return ot_ab - 0.5 * (ot_aa + self._ot_bb)
