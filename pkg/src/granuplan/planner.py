"""Derivative-free pouring-trajectory optimization.

A cup trajectory is a handful of (rotation, translation) via-points.
Monotone cubic Hermite interpolation expands them to a dense action
sequence, the learned simulator rolls the scene forward under it, and
the objective scores the final granular cloud against a target
distribution with a debiased Sinkhorn divergence plus an acceleration
penalty on the actions.  CMA-ES searches the via-point coordinates,
with constraint handling by repair (clip to the actuator box and rate
limits) plus a quadratic penalty for the repair distance.

Coordinates handed to the optimizer are scaled (rotation by pi,
translation by 0.11 m) so that both channels live in roughly [-1, 1]
and a single step size applies.
"""

import dataclasses
import math

import numpy as np

from .gns import rollout as gns_rollout
from .gns import rollout_batch as gns_rollout_batch
from .ot import TargetCost
from .scene import (
    ACTION_ANGLE_MAX,
    ACTION_SHIFT_MAX,
    DEFAULT_VIA_COUNT,
    MATERIAL_RIGID,
    VIA_DELTA_MAX,
)

EIGEN_FLOOR = 1e-14


# ---------------------------------------------------------------------------
# monotone cubic interpolation


def _edge_slope(h0, h1, d0, d1):
    # three-point one-sided estimate, limited so the boundary piece stays
    # monotone (Fritsch-Carlson end conditions)
    m = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1)
    if np.sign(m) != np.sign(d0):
        return 0.0
    if np.sign(d0) != np.sign(d1) and abs(m) > 3.0 * abs(d0):
        return 3.0 * d0
    return m


def _pchip_slopes(x, y):
    """Knot slopes of the monotone Hermite interpolant of (x, y).

    Interior slopes are the weighted harmonic mean of adjacent secants
    wherever those secants agree in sign, and zero at local extrema, which
    is exactly the Fritsch-Carlson condition for a monotone cubic piece.
    """
    n = len(x)
    h = np.diff(x)
    delta = np.diff(y) / h
    if n == 2:
        return np.array([delta[0], delta[0]])
    m = np.zeros(n)
    for i in range(1, n - 1):
        if delta[i - 1] * delta[i] > 0.0:
            w1 = 2.0 * h[i] + h[i - 1]
            w2 = h[i] + 2.0 * h[i - 1]
            m[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i])
    m[0] = _edge_slope(h[0], h[1], delta[0], delta[1])
    m[-1] = _edge_slope(h[-1], h[-2], delta[-1], delta[-2])
    return m


def _hermite_eval(x, y, m, t):
    idx = np.clip(np.searchsorted(x, t, side="right") - 1, 0, len(x) - 2)
    h = x[idx + 1] - x[idx]
    s = (t - x[idx]) / h
    s2 = s * s
    s3 = s2 * s
    h00 = 2.0 * s3 - 3.0 * s2 + 1.0
    h10 = s3 - 2.0 * s2 + s
    h01 = -2.0 * s3 + 3.0 * s2
    h11 = s3 - s2
    return (h00 * y[idx] + h10 * h * m[idx]
            + h01 * y[idx + 1] + h11 * h * m[idx + 1])


def pchip_interpolate(via, H):
    """Expand via-points to H actions by monotone cubic interpolation.

    Knots are uniformly spaced over [0, H-1] and each column is
    interpolated independently; the result passes through every
    via-point and never overshoots between monotone knots.
    """
    pts = np.asarray(via.via if isinstance(via, ViaTrajectory) else via,
                     dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    q1 = pts.shape[0]
    if q1 < 2:
        raise ValueError("need at least two via-points")
    if H < q1:
        raise ValueError("horizon shorter than the via-point count")
    knots = np.linspace(0.0, H - 1.0, q1)
    t = np.arange(H, dtype=np.float64)
    out = np.empty((H, pts.shape[1]))
    for c in range(pts.shape[1]):
        y = pts[:, c]
        slopes = _pchip_slopes(knots, y)
        out[:, c] = _hermite_eval(knots, y, slopes, t)
    return out


# ---------------------------------------------------------------------------
# trajectory types


@dataclasses.dataclass
class ViaTrajectory:
    """Q+1 via-points of (theta radians, y meters); via[0] is the start."""

    via: np.ndarray

    def __post_init__(self):
        self.via = np.asarray(self.via, dtype=np.float64)
        if self.via.ndim != 2 or self.via.shape[1] != 2 or len(self.via) < 2:
            raise ValueError("via must have shape (Q+1, 2) with Q >= 1")

    @property
    def q(self):
        return self.via.shape[0] - 1


@dataclasses.dataclass(frozen=True)
class PlannerConfig:
    sigma0: float = 1.5
    population: int = 20
    iterations: int = 150
    alpha: float = 1000.0
    beta: float = 0.001
    scale_theta: float = math.pi
    scale_y: float = 0.11
    u_min: tuple = (-ACTION_ANGLE_MAX, -ACTION_SHIFT_MAX)
    u_max: tuple = (ACTION_ANGLE_MAX, ACTION_SHIFT_MAX)
    du_max: tuple = VIA_DELTA_MAX
    seeds: tuple = (0,)
    H: int = 120
    via_count: int = DEFAULT_VIA_COUNT
    epsilon: float | None = None
    sinkhorn_tol: float = 1e-4
    sinkhorn_max_iters: int = 300

    def validate(self):
        if self.population < 4:
            raise ValueError("population must be at least 4")
        if self.scale_theta <= 0 or self.scale_y <= 0:
            raise ValueError("coordinate scales must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.H < self.via_count + 1:
            raise ValueError("horizon must exceed the via-point count")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        return self

    @property
    def scales(self):
        return np.array([self.scale_theta, self.scale_y])


def project_constraints(via, config):
    """Repair a via sequence onto the feasible set; returns (via, penalty).

    Each via-point is clipped to the actuator box, then a forward sweep
    clips consecutive deltas to +-du_max (the swept values stay inside the
    box since each lies between two in-box quantities).  The penalty is
    the squared repair distance in scaled coordinates, added to the
    planner objective so the optimizer is pushed back toward feasibility
    rather than exploring the clipped plateau.
    """
    raw = np.asarray(via.via if isinstance(via, ViaTrajectory) else via,
                     dtype=np.float64)
    lo = np.asarray(config.u_min)
    hi = np.asarray(config.u_max)
    du = np.asarray(config.du_max)
    out = np.clip(raw, lo, hi)
    for j in range(1, len(out)):
        np.clip(out[j], out[j - 1] - du, out[j - 1] + du, out=out[j])
    penalty = float(np.sum(((raw - out) / config.scales) ** 2))
    return ViaTrajectory(out), penalty


def _smoothness(actions, config):
    u = np.asarray(actions, dtype=np.float64) / config.scales
    dd = u[2:] - 2.0 * u[1:-1] + u[:-2]
    return float(np.sum(dd * dd))


def cost(target, end_state, actions, config=None):
    """Planner objective for one rolled-out trajectory.

    alpha * S_eps(target, granular end positions) plus beta times the sum
    of squared second differences of the scaled actions.  `target` may be
    a point array or a prebuilt TargetCost (reused across evaluations).
    """
    config = (config or PlannerConfig()).validate()
    if isinstance(target, TargetCost):
        tc = target
    else:
        tc = TargetCost(target, epsilon=config.epsilon,
                        tol=config.sinkhorn_tol,
                        max_iters=config.sinkhorn_max_iters)
    cloud = end_state.positions[end_state.granular_mask()]
    return (config.alpha * tc(cloud)
            + config.beta * _smoothness(actions, config))


# ---------------------------------------------------------------------------
# CMA-ES


@dataclasses.dataclass
class CMAState:
    """Strategy state: sampling mean and covariance, step size, paths."""

    mean: np.ndarray
    cov: np.ndarray
    sigma: float
    p_sigma: np.ndarray
    p_c: np.ndarray
    generation: int = 0


@dataclasses.dataclass
class CMAResult:
    x: np.ndarray
    fun: float
    evaluations: int
    history: list
    restarts: int
    state: CMAState


def cmaes_minimize(f, x0, sigma0, population=None, iterations=200, seed=0,
                   ftarget=None, eigen_floor=EIGEN_FLOOR, batch_f=None):
    """(mu/mu_w, lambda)-CMA-ES with rank-one and rank-mu updates.

    x0 is evaluated first and seeds the best-ever tracking, so the
    returned objective never exceeds f(x0).  The covariance eigenvalues
    are floored at eigen_floor; a non-finite or hopelessly conditioned
    covariance is restarted at the identity (counted in `restarts`).
    history holds the best-ever objective after each generation.  The
    whole run is deterministic given the seed.

    batch_f, when given, evaluates a whole (population, n) candidate
    matrix per generation and returns the objective vector; callers with
    expensive but batchable objectives (model rollouts) use it to keep
    their evaluation vectorized.  f still scores the single x0.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    n = x0.size
    if n < 1:
        raise ValueError("need at least one decision variable")
    lam = int(population) if population else 4 + int(3 * math.log(n))
    lam = max(lam, 4)
    mu = lam // 2
    w = math.log(mu + 0.5) - np.log(np.arange(1, mu + 1))
    w /= w.sum()
    mueff = 1.0 / float(np.sum(w * w))

    c_sig = (mueff + 2.0) / (n + mueff + 5.0)
    d_sig = 1.0 + 2.0 * max(0.0, math.sqrt((mueff - 1.0) / (n + 1.0)) - 1.0) \
        + c_sig
    c_c = (4.0 + mueff / n) / (n + 4.0 + 2.0 * mueff / n)
    c_1 = 2.0 / ((n + 1.3) ** 2 + mueff)
    c_mu = min(1.0 - c_1,
               2.0 * (mueff - 2.0 + 1.0 / mueff) / ((n + 2.0) ** 2 + mueff))
    chi_n = math.sqrt(n) * (1.0 - 1.0 / (4.0 * n) + 1.0 / (21.0 * n * n))

    rng = np.random.default_rng(seed)
    st = CMAState(mean=x0.copy(), cov=np.eye(n), sigma=float(sigma0),
                  p_sigma=np.zeros(n), p_c=np.zeros(n))
    best_x = x0.copy()
    best_f = float(f(x0))
    evals = 1
    history = []
    restarts = 0

    for gen in range(iterations):
        if ftarget is not None and best_f <= ftarget:
            break
        st.cov = 0.5 * (st.cov + st.cov.T)
        degenerate = not np.all(np.isfinite(st.cov))
        if not degenerate:
            try:
                d2, B = np.linalg.eigh(st.cov)
            except np.linalg.LinAlgError:
                degenerate = True
        if not degenerate:
            d2 = np.maximum(d2, eigen_floor)
            degenerate = float(d2[-1] / d2[0]) > 1e14
        if degenerate:
            st.cov = np.eye(n)
            st.p_sigma = np.zeros(n)
            st.p_c = np.zeros(n)
            restarts += 1
            history.append(best_f)
            st.generation = gen + 1
            continue
        D = np.sqrt(d2)

        Z = rng.standard_normal((lam, n))
        Y = Z @ (B * D).T
        X = st.mean + st.sigma * Y
        if batch_f is not None:
            F = np.asarray(batch_f(X), dtype=np.float64)
        else:
            F = np.array([float(f(x)) for x in X])
        evals += lam
        order = np.argsort(F, kind="stable")
        if F[order[0]] < best_f:
            best_f = float(F[order[0]])
            best_x = X[order[0]].copy()

        Ysel = Y[order[:mu]]
        y_w = w @ Ysel
        st.mean = st.mean + st.sigma * y_w
        whitened = B @ ((B.T @ y_w) / D)
        st.p_sigma = ((1.0 - c_sig) * st.p_sigma
                      + math.sqrt(c_sig * (2.0 - c_sig) * mueff) * whitened)
        norm_ps = float(np.linalg.norm(st.p_sigma))
        hsig = (norm_ps
                / math.sqrt(1.0 - (1.0 - c_sig) ** (2 * (gen + 1)))
                / chi_n) < 1.4 + 2.0 / (n + 1.0)
        st.p_c = ((1.0 - c_c) * st.p_c
                  + hsig * math.sqrt(c_c * (2.0 - c_c) * mueff) * y_w)
        rank1 = np.outer(st.p_c, st.p_c)
        rankmu = Ysel.T @ (w[:, None] * Ysel)
        st.cov = ((1.0 - c_1 - c_mu) * st.cov
                  + c_1 * (rank1 + (1.0 - hsig) * c_c * (2.0 - c_c) * st.cov)
                  + c_mu * rankmu)
        st.sigma = st.sigma * math.exp(
            (c_sig / d_sig) * (norm_ps / chi_n - 1.0))
        st.generation = gen + 1
        history.append(best_f)

    return CMAResult(x=best_x, fun=best_f, evaluations=evals,
                     history=history, restarts=restarts, state=st)


# ---------------------------------------------------------------------------
# planning


@dataclasses.dataclass
class PlanResult:
    """Best trajectory over all seeds plus per-seed diagnostics.

    seed_results entries hold seed, best cost, final Sinkhorn divergence,
    and the per-generation best-cost history.  initial_sinkhorn scores
    the initial trajectory's own end state against the target, which is
    the baseline for improvement ratios.
    """

    via: ViaTrajectory
    actions: np.ndarray
    cost: float
    sinkhorn: float
    initial_sinkhorn: float
    initial_cost: float
    seed_results: list
    predicted_cloud: np.ndarray

    @property
    def sinkhorn_mean(self):
        return float(np.mean([r["sinkhorn"] for r in self.seed_results]))

    @property
    def sinkhorn_std(self):
        return float(np.std([r["sinkhorn"] for r in self.seed_results]))


def plan_trajectory(model, history, material, scene_config, target,
                    init_via=None, config=None):
    """Optimize a pouring trajectory against a learned simulator.

    For every CMA-ES candidate: decode scaled coordinates to via-points
    (via[0] stays frozen at the start pose), repair onto the constraint
    set, interpolate to H actions, roll the model out, and score the
    final granular cloud against the target.  Runs once per seed and
    returns the best seed's trajectory with per-seed diagnostics.

    Args:
        model: trained GNSModel.
        history: (C+1, N, dim) position frames, oldest first.
        material: (N,) material codes matching the scene's rigid body.
        scene_config: SceneConfig the model was trained on.
        target: (M, dim) target point cloud (granular positions).
        init_via: ViaTrajectory with Q+1 points; defaults to holding the
            rest pose.  Row 0 is the fixed start pose.
        config: PlannerConfig.
    """
    config = (config or PlannerConfig()).validate()
    Q = config.via_count
    if init_via is None:
        init_via = ViaTrajectory(np.zeros((Q + 1, 2)))
    if init_via.q != Q:
        raise ValueError("init_via must carry via_count + 1 points")
    scales = config.scales
    start = init_via.via[0].copy()
    material = np.asarray(material)
    granular = material != MATERIAL_RIGID
    tcost = TargetCost(target, epsilon=config.epsilon,
                       tol=config.sinkhorn_tol,
                       max_iters=config.sinkhorn_max_iters)

    def decode(x):
        pts = np.vstack([start[None, :], x.reshape(Q, 2) * scales])
        return project_constraints(pts, config)

    def evaluate(x):
        via, penalty = decode(x)
        actions = pchip_interpolate(via, config.H)
        end = gns_rollout(model, history, material, scene_config,
                          actions).final
        s_eps = tcost(end[granular])
        j = config.alpha * s_eps + config.beta * _smoothness(actions, config) \
            + penalty
        return j, s_eps, via, actions, end

    def evaluate_batch(X):
        """One generation's candidates: batched rollouts, scored per row."""
        decoded = [decode(x) for x in X]
        acts = [pchip_interpolate(via, config.H) for via, _ in decoded]
        rolls = gns_rollout_batch(model, history, material, scene_config,
                                  acts)
        costs = np.empty(len(X))
        for i, roll in enumerate(rolls):
            s_eps = tcost(roll.final[granular])
            costs[i] = (config.alpha * s_eps
                        + config.beta * _smoothness(acts[i], config)
                        + decoded[i][1])
        return costs

    x0 = (init_via.via[1:] / scales).reshape(-1)
    initial_cost, initial_sinkhorn, _, _, _ = evaluate(x0)

    seed_results = []
    best = None
    for seed in config.seeds:
        res = cmaes_minimize(lambda x: evaluate(x)[0], x0, config.sigma0,
                             population=config.population,
                             iterations=config.iterations, seed=seed,
                             batch_f=evaluate_batch)
        j, s_eps, via, actions, end = evaluate(res.x)
        seed_results.append({
            "seed": int(seed),
            "cost": float(j),
            "sinkhorn": float(s_eps),
            "history": [float(v) for v in res.history],
            "evaluations": int(res.evaluations),
            "restarts": int(res.restarts),
        })
        if best is None or j < best[0]:
            best = (j, s_eps, via, actions, end)

    j, s_eps, via, actions, end = best
    return PlanResult(
        via=via, actions=actions, cost=float(j), sinkhorn=float(s_eps),
        initial_sinkhorn=float(initial_sinkhorn),
        initial_cost=float(initial_cost),
        seed_results=seed_results, predicted_cloud=end[granular].copy(),
    )
