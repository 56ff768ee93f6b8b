"""Scene description and spring-dashpot DEM ground truth.

Conventions used throughout the package:

* The last coordinate axis is "up" (y in 2D, z in 3D); gravity acts along
  its negative direction.
* The container is an axis-aligned box, open at the top face, with walls
  modeled as infinite planes.  Wall order: for each axis, the low face then
  the high face, with the top face omitted.
* Particle rows are ordered granular first, then rigid; rigid rows follow
  the order of ``RigidBodySpec.surface_points``.
* An action is a pair ``(angle, shift)``: rotation about the cup pivot plus
  a horizontal translation (x in 2D, y in 3D).  Actions are absolute poses,
  not increments.
* The cup is kinematic: it exerts contact forces on the granular phase but
  receives none (one-way coupling).
"""

import dataclasses
import json
import math

import numpy as np

from .neighbors import find_neighbors

MATERIAL_GRANULAR = 0
MATERIAL_RIGID = 1

# Actuator limits for the (angle, shift) action space.
ACTION_ANGLE_MAX = 2.8973
ACTION_SHIFT_MAX = 0.1
# Bound on how far one via-point may move between consecutive knots.
VIA_DELTA_MAX = (2.1973, 0.02)
# Via-point count used by the planner's spline parameterization.
DEFAULT_VIA_COUNT = 6
# Per-step action deltas are capped at the steepest slope a monotone cubic
# through maximally separated via-points can reach (3x the secant), with a
# little headroom.
STEP_DELTA_HEADROOM = 3.2

LATTICE_PITCH_FACTOR = 2.2
LATTICE_JITTER_FACTOR = 0.08

VELOCITY_BLOWUP = 1.0e3


class ConfigurationError(ValueError):
    """A scene or model configuration violates its contract."""


class SimulationInstabilityError(RuntimeError):
    """The integrator produced a non-finite or exploding state."""

    def __init__(self, message, particle_index=None, step=None):
        super().__init__(message)
        self.particle_index = particle_index
        self.step = step


@dataclasses.dataclass
class RigidBodySpec:
    """Kinematic rigid body sampled as surface particles.

    surface_points are world coordinates at the zero action; pivot is the
    rotation center (the cup mouth).  fill_region is the axis-aligned box
    (min, max) that granular material may be packed into; fill_shape "box"
    uses the box directly, "cylinder" additionally masks to the inscribed
    vertical cylinder (3D cups).
    """

    surface_points: np.ndarray
    pivot: np.ndarray
    initial_pose: tuple = (0.0, 0.0)
    fill_region: tuple | None = None
    fill_shape: str = "box"

    def __post_init__(self):
        self.surface_points = np.asarray(self.surface_points, dtype=np.float64)
        self.pivot = np.asarray(self.pivot, dtype=np.float64)
        self.initial_pose = (float(self.initial_pose[0]), float(self.initial_pose[1]))


@dataclasses.dataclass(frozen=True)
class SceneConfig:
    """Static description of one simulation setup.

    Geometric quantities are meters; dt is seconds.  substeps controls how
    many internal explicit integration steps the DEM takes per dt (the
    spring contact time must be resolved; the outer dt is what the learned
    model sees).
    """

    dim: int
    container_extents: tuple
    dt: float
    gravity: float
    connectivity_radius: float
    particle_radius: float
    cup: RigidBodySpec | None
    horizon: int
    granular_count: int
    container_origin: tuple | None = None
    substeps: int = 1
    normal_stiffness: float = 1.0e4
    damping_ratio: float = 0.3
    friction: float = 0.5
    density: float = 1500.0

    def __post_init__(self):
        if self.container_origin is None:
            object.__setattr__(self, "container_origin", (0.0,) * self.dim)

    def validate(self):
        if self.dim not in (2, 3):
            raise ConfigurationError("dim must be 2 or 3")
        if len(self.container_extents) != self.dim:
            raise ConfigurationError("container_extents length must equal dim")
        if any(e <= 0 for e in self.container_extents):
            raise ConfigurationError("container_extents must be positive")
        if len(self.container_origin) != self.dim:
            raise ConfigurationError("container_origin length must equal dim")
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        if self.connectivity_radius <= 0:
            raise ConfigurationError("connectivity_radius must be positive")
        if self.particle_radius <= 0:
            raise ConfigurationError("particle_radius must be positive")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be at least 1")
        if self.granular_count < 0:
            raise ConfigurationError("granular_count must be non-negative")
        if self.granular_count > 0 and self.cup is None:
            raise ConfigurationError("granular particles need a cup to be packed into")
        if self.substeps < 1:
            raise ConfigurationError("substeps must be at least 1")
        if self.normal_stiffness <= 0 or self.density <= 0:
            raise ConfigurationError("contact parameters must be positive")
        if self.cup is not None and self.cup.surface_points.shape[1] != self.dim:
            raise ConfigurationError("cup surface points must match scene dim")
        return self


@dataclasses.dataclass
class ParticleState:
    """Dynamic state at one time step.

    velocities holds finite-difference velocities consistent with the outer
    dt, i.e. (p_t - p_{t-1}) / dt once the state has a predecessor.
    """

    positions: np.ndarray
    velocities: np.ndarray
    material: np.ndarray
    t: int = 0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        self.material = np.asarray(self.material, dtype=np.uint8)

    @property
    def n(self):
        return self.positions.shape[0]

    @property
    def dim(self):
        return self.positions.shape[1]

    def granular_mask(self):
        return self.material == MATERIAL_GRANULAR

    def rigid_mask(self):
        return self.material == MATERIAL_RIGID

    def copy(self):
        return ParticleState(
            self.positions.copy(), self.velocities.copy(), self.material.copy(), self.t
        )


def action_bounds():
    """(low, high) arrays for one (angle, shift) action."""
    high = np.array([ACTION_ANGLE_MAX, ACTION_SHIFT_MAX])
    return -high, high


def step_delta_limits(horizon, via_count=DEFAULT_VIA_COUNT):
    """Per-step absolute action increments implied by the via-point bounds."""
    per = np.array(VIA_DELTA_MAX) * via_count / float(horizon)
    return STEP_DELTA_HEADROOM * per


def validate_actions(actions, horizon=None):
    """Check an (H, 2) action sequence against actuator and rate limits."""
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim != 2 or actions.shape[1] != 2:
        raise ConfigurationError("actions must have shape (H, 2)")
    if horizon is not None and actions.shape[0] != horizon:
        raise ConfigurationError("action sequence length must equal the horizon")
    if not np.all(np.isfinite(actions)):
        raise ConfigurationError("actions must be finite")
    low, high = action_bounds()
    eps = 1e-9
    if np.any(actions < low - eps) or np.any(actions > high + eps):
        raise ConfigurationError("action outside actuator bounds")
    if actions.shape[0] > 1:
        step = np.abs(np.diff(actions, axis=0))
        lim = step_delta_limits(actions.shape[0])
        if np.any(step > lim + eps):
            raise ConfigurationError("per-step action increment too large")
    return actions


def wall_planes(config):
    """Closed wall faces as (axis, side): side +1 low face, -1 high face."""
    down = config.dim - 1
    walls = []
    for a in range(config.dim):
        walls.append((a, 1))
        if a != down:
            walls.append((a, -1))
    return walls


def boundary_distances(positions, config):
    """Signed distance from each point to each closed wall, positive inside."""
    positions = np.asarray(positions, dtype=np.float64)
    o = np.asarray(config.container_origin)
    L = np.asarray(config.container_extents)
    cols = []
    for a, side in wall_planes(config):
        if side > 0:
            cols.append(positions[:, a] - o[a])
        else:
            cols.append(o[a] + L[a] - positions[:, a])
    return np.stack(cols, axis=1)


def particle_mass(config):
    r = config.particle_radius
    if config.dim == 2:
        return config.density * math.pi * r * r
    return config.density * (4.0 / 3.0) * math.pi * r**3


def translation_axis(dim):
    # Horizontal translation: x in 2D, y in 3D (rotation is about x in 3D).
    return 0 if dim == 2 else 1


def rotation_matrix(dim, angle):
    c = math.cos(angle)
    s = math.sin(angle)
    if dim == 2:
        return np.array([[c, -s], [s, c]])
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rigid_world_points(spec, action, dim):
    """Map the reference surface points through the absolute pose `action`."""
    angle, shift = float(action[0]), float(action[1])
    R = rotation_matrix(dim, angle)
    world = (spec.surface_points - spec.pivot) @ R.T + spec.pivot
    world[:, translation_axis(dim)] += shift
    return world


def rigid_pose_apply(state, action, spec, dt):
    """Move the rigid body to the pose given by `action`.

    Returns a new state: rigid rows are mapped through the pose (always from
    the reference points, so poses never accumulate drift), rigid velocities
    become the finite difference (new - old) / dt, granular rows are left
    untouched.  The step counter is unchanged; dem_step advances it.
    """
    rigid = state.rigid_mask()
    new = state.copy()
    pts = rigid_world_points(spec, action, state.dim)
    if pts.shape[0] != int(rigid.sum()):
        raise ConfigurationError("rigid body spec does not match state rigid rows")
    new.velocities[rigid] = (pts - state.positions[rigid]) / dt
    new.positions[rigid] = pts
    return new


# ---------------------------------------------------------------------------
# cup geometry


def _sample_polyline(vertices, spacing):
    # Points along a polyline at roughly `spacing`, endpoints included once.
    pts = []
    for a, b in zip(vertices[:-1], vertices[1:]):
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        length = float(np.linalg.norm(b - a))
        nseg = max(1, int(math.ceil(length / spacing)))
        ts = np.linspace(0.0, 1.0, nseg + 1)
        seg = a[None, :] + ts[:, None] * (b - a)[None, :]
        if pts:
            seg = seg[1:]  # avoid doubling corner points
        pts.append(seg)
    return np.concatenate(pts, axis=0)


def make_cup_2d(interior_width, interior_depth, mouth_center, particle_radius,
                spacing_factor=1.8):
    """U-shaped 2D cup, opening up, pivot at the mouth center.

    Wall centerlines sit one particle radius outside the nominal interior so
    that granular particles can fill the full interior without initial
    overlap.
    """
    r = particle_radius
    cx, cy = float(mouth_center[0]), float(mouth_center[1])
    hw = interior_width / 2.0 + r
    bottom = cy - interior_depth - r
    verts = [
        (cx - hw, cy),
        (cx - hw, bottom),
        (cx + hw, bottom),
        (cx + hw, cy),
    ]
    pts = _sample_polyline(verts, spacing_factor * r)
    fill = (
        (cx - interior_width / 2.0, cy - interior_depth),
        (cx + interior_width / 2.0, cy),
    )
    return RigidBodySpec(pts, np.array([cx, cy]), (0.0, 0.0), fill, "box")


def make_cup_3d(diameter, depth, mouth_center, particle_radius, rigid_count):
    """Open cylinder cup in 3D with an exact number of surface particles.

    The count is split between side wall and bottom disk proportionally to
    area; rows on the side wall and a sunflower spiral on the bottom give a
    roughly uniform, fully deterministic sampling.
    """
    r = particle_radius
    cx, cy, cz = (float(v) for v in mouth_center)
    wall_r = diameter / 2.0 + r
    side_area = 2.0 * math.pi * wall_r * depth
    bottom_area = math.pi * wall_r * wall_r
    n_bottom = int(round(rigid_count * bottom_area / (side_area + bottom_area)))
    n_bottom = min(max(n_bottom, 1), rigid_count - 1)
    n_side = rigid_count - n_bottom

    n_rows = max(1, int(round(math.sqrt(n_side * depth / (2.0 * math.pi * wall_r)))))
    base = n_side // n_rows
    extra = n_side % n_rows
    pts = []
    zs = np.linspace(cz, cz - depth, n_rows)
    for i, z in enumerate(zs):
        cnt = base + (1 if i < extra else 0)
        if cnt == 0:
            continue
        ang = 2.0 * math.pi * (np.arange(cnt) + 0.5 * (i % 2)) / cnt
        pts.append(
            np.stack(
                [cx + wall_r * np.cos(ang), cy + wall_r * np.sin(ang),
                 np.full(cnt, z)], axis=1
            )
        )
    golden = math.pi * (3.0 - math.sqrt(5.0))
    k = np.arange(n_bottom)
    rad = wall_r * np.sqrt((k + 0.5) / n_bottom)
    ang = k * golden
    zb = cz - depth - r
    pts.append(
        np.stack([cx + rad * np.cos(ang), cy + rad * np.sin(ang),
                  np.full(n_bottom, zb)], axis=1)
    )
    pts = np.concatenate(pts, axis=0)
    assert pts.shape[0] == rigid_count
    fill = (
        (cx - diameter / 2.0, cy - diameter / 2.0, cz - depth),
        (cx + diameter / 2.0, cy + diameter / 2.0, cz),
    )
    return RigidBodySpec(pts, np.array([cx, cy, cz]), (0.0, 0.0), fill, "cylinder")


def _lattice_sites(fill_min, fill_max, r, dim):
    # Square/cubic lattice of candidate centers, inset from the region
    # bounds far enough that jitter cannot create contact, centered in the
    # leftover slack, ordered bottom-up.
    pitch = LATTICE_PITCH_FACTOR * r
    margin = (1.0 + LATTICE_JITTER_FACTOR) * r
    axes = []
    for a in range(dim):
        span = (fill_max[a] - fill_min[a]) - 2.0 * margin
        if span < 0:
            return np.empty((0, dim))
        n = int(math.floor(span / pitch)) + 1
        start = fill_min[a] + margin + (span - (n - 1) * pitch) / 2.0
        axes.append(start + pitch * np.arange(n))
    grids = np.meshgrid(*axes, indexing="ij")
    sites = np.stack([g.ravel() for g in grids], axis=1)
    order = np.lexsort(tuple(sites[:, a] for a in range(dim)))
    return sites[order]


def cup_lattice_sites(spec, particle_radius, dim):
    """Granular packing sites the cup interior offers, ordered bottom-up."""
    if spec.fill_region is None:
        return np.empty((0, dim))
    fmin, fmax = (np.asarray(v, dtype=np.float64) for v in spec.fill_region)
    sites = _lattice_sites(fmin, fmax, particle_radius, dim)
    if spec.fill_shape == "cylinder" and len(sites):
        center = (fmin[:2] + fmax[:2]) / 2.0
        rad = (fmax[0] - fmin[0]) / 2.0 - (1.0 + LATTICE_JITTER_FACTOR) * particle_radius
        keep = np.sum((sites[:, :2] - center) ** 2, axis=1) <= rad * rad
        sites = sites[keep]
    return sites


def init_scene(config, seed):
    """Deterministically build the initial state for a scene.

    Granular particles fill the cup interior bottom-up on a slightly loose
    lattice with a small uniform jitter; rigid particles are the cup surface
    at its initial pose.  All velocities start at zero.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    dim = config.dim
    parts = []
    if config.granular_count > 0:
        spec = config.cup
        if spec.fill_region is None:
            raise ConfigurationError("cup has no fill region to pack granular into")
        sites = cup_lattice_sites(spec, config.particle_radius, dim)
        if len(sites) < config.granular_count:
            raise ConfigurationError(
                f"cup interior holds {len(sites)} particles, "
                f"{config.granular_count} requested"
            )
        g = sites[: config.granular_count].copy()
        jitter = LATTICE_JITTER_FACTOR * config.particle_radius
        g += rng.uniform(-jitter, jitter, size=g.shape)
        pose = spec.initial_pose
        if pose[0] != 0.0 or pose[1] != 0.0:
            R = rotation_matrix(dim, pose[0])
            g = (g - spec.pivot) @ R.T + spec.pivot
            g[:, translation_axis(dim)] += pose[1]
        parts.append((g, MATERIAL_GRANULAR))
    if config.cup is not None:
        rpts = rigid_world_points(config.cup, config.cup.initial_pose, dim)
        parts.append((rpts, MATERIAL_RIGID))
    if not parts:
        raise ConfigurationError("scene has neither granular particles nor a cup")
    positions = np.concatenate([p for p, _ in parts], axis=0)
    material = np.concatenate(
        [np.full(len(p), m, dtype=np.uint8) for p, m in parts]
    )
    return ParticleState(positions, np.zeros_like(positions), material, t=0)


def strip_rigid(state):
    """Granular-only copy of a state (used for free-fall records)."""
    g = state.granular_mask()
    return ParticleState(
        state.positions[g].copy(), state.velocities[g].copy(),
        state.material[g].copy(), state.t,
    )


# ---------------------------------------------------------------------------
# DEM integration


def _contact_forces(xg, vg, xr, vr, config, mass):
    """Net contact force on each granular particle (pairs plus walls)."""
    n_g = xg.shape[0]
    dim = xg.shape[1]
    r = config.particle_radius
    k = config.normal_stiffness
    zeta = config.damping_ratio
    mu = config.friction
    out = np.zeros((n_g, dim))

    if xr.shape[0] > 0:
        X = np.concatenate([xg, xr], axis=0)
        V = np.concatenate([vg, vr], axis=0)
    else:
        X, V = xg, vg
    send, recv = find_neighbors(X, 2.0 * r)
    if send.size:
        keep = recv < n_g
        send = send[keep]
        recv = recv[keep]
    if send.size:
        dx = X[recv] - X[send]
        d = np.sqrt(np.einsum("ij,ij->i", dx, dx))
        ok = d > 1e-12
        send, recv, dx, d = send[ok], recv[ok], dx[ok], d[ok]
    if send.size:
        nhat = dx / d[:, None]
        delta = 2.0 * r - d
        vrel = V[recv] - V[send]
        vn = np.einsum("ij,ij->i", vrel, nhat)
        m_eff = np.where(send >= n_g, mass, 0.5 * mass)
        gamma = 2.0 * zeta * np.sqrt(k * m_eff)
        fn = k * delta - gamma * vn
        np.maximum(fn, 0.0, out=fn)  # contacts never pull
        vt = vrel - vn[:, None] * nhat
        vt_norm = np.sqrt(np.einsum("ij,ij->i", vt, vt))
        ft = np.minimum(mu * fn, gamma * vt_norm)
        scale = ft / np.maximum(vt_norm, 1e-12)
        force = fn[:, None] * nhat - scale[:, None] * vt
        np.add.at(out, recv, force)

    # Walls: same force law with the wall as an infinitely heavy flat sender.
    o = np.asarray(config.container_origin)
    L = np.asarray(config.container_extents)
    gamma_w = 2.0 * zeta * math.sqrt(k * mass)
    for a, side in wall_planes(config):
        if side > 0:
            dist = xg[:, a] - o[a]
        else:
            dist = o[a] + L[a] - xg[:, a]
        touching = dist < r
        if not np.any(touching):
            continue
        idx = np.nonzero(touching)[0]
        delta = r - dist[idx]
        vn = side * vg[idx, a]  # velocity along the inward normal
        fn = np.maximum(k * delta - gamma_w * vn, 0.0)
        vt = vg[idx].copy()
        vt[:, a] = 0.0
        vt_norm = np.sqrt(np.einsum("ij,ij->i", vt, vt))
        ft = np.minimum(mu * fn, gamma_w * vt_norm)
        scale = ft / np.maximum(vt_norm, 1e-12)
        out[idx, a] += side * fn
        out[idx] -= scale[:, None] * vt
    return out


def dem_step(state, config):
    """Advance one outer step of dt with semi-implicit Euler substeps.

    The rigid body is swept linearly across the substeps from its previous
    position (reconstructed as p - v dt) to its current one; granular
    velocities update before positions within every substep.
    """
    dt = config.dt
    nsub = config.substeps
    dts = dt / nsub
    g = state.granular_mask()
    rmask = state.rigid_mask()
    xg = state.positions[g].copy()
    vg = state.velocities[g].copy()
    xr_end = state.positions[rmask]
    vr = state.velocities[rmask]
    mass = particle_mass(config)
    gvec = np.zeros(config.dim)
    gvec[config.dim - 1] = -config.gravity

    for s in range(nsub):
        xr_now = xr_end - vr * (dt - s * dts)
        if xg.shape[0]:
            f = _contact_forces(xg, vg, xr_now, vr, config, mass)
            vg += dts * (f / mass + gvec)
            xg += dts * vg

    if xg.shape[0]:
        bad = ~np.isfinite(xg).all(axis=1) | ~np.isfinite(vg).all(axis=1)
        bad |= np.einsum("ij,ij->i", vg, vg) > VELOCITY_BLOWUP**2
        if np.any(bad):
            idx = int(np.flatnonzero(g)[np.argmax(bad)])
            raise SimulationInstabilityError(
                f"particle {idx} diverged at step {state.t + 1}",
                particle_index=idx, step=state.t + 1,
            )

    positions = state.positions.copy()
    velocities = state.velocities.copy()
    positions[g] = xg
    velocities[g] = vg
    return ParticleState(positions, velocities, state.material, state.t + 1)


@dataclasses.dataclass
class SettleResult:
    state: ParticleState
    steps: int
    converged: bool


def settle(state, config, max_steps=2000, ke_tol=1e-8):
    """Run the DEM with the cup held fixed until granular kinetic energy
    per particle drops below ke_tol (joules).  Resets the step counter."""
    cur = state.copy()
    cur.velocities[cur.rigid_mask()] = 0.0
    mass = particle_mass(config)
    g = cur.granular_mask()
    converged = False
    steps = 0
    for steps in range(1, max_steps + 1):
        cur = dem_step(cur, config)
        if not np.any(g):
            converged = True
            break
        ke = 0.5 * mass * float(
            np.mean(np.einsum("ij,ij->i", cur.velocities[g], cur.velocities[g]))
        )
        if ke < ke_tol:
            converged = True
            break
    cur.t = 0
    return SettleResult(cur, steps, converged)


# ---------------------------------------------------------------------------
# JSON round trip


def _cup_to_dict(spec):
    if spec is None:
        return None
    return {
        "surface_points": spec.surface_points.tolist(),
        "pivot": spec.pivot.tolist(),
        "initial_pose": list(spec.initial_pose),
        "fill_region": None if spec.fill_region is None else [
            list(map(float, spec.fill_region[0])),
            list(map(float, spec.fill_region[1])),
        ],
        "fill_shape": spec.fill_shape,
    }


def _cup_from_dict(d):
    if d is None:
        return None
    fill = d.get("fill_region")
    if fill is not None:
        fill = (tuple(fill[0]), tuple(fill[1]))
    return RigidBodySpec(
        np.asarray(d["surface_points"], dtype=np.float64),
        np.asarray(d["pivot"], dtype=np.float64),
        tuple(d.get("initial_pose", (0.0, 0.0))),
        fill,
        d.get("fill_shape", "box"),
    )


def scene_to_json(config):
    """Serialize a SceneConfig to a JSON string (lossless for float64)."""
    d = {
        "dim": config.dim,
        "container_extents": list(config.container_extents),
        "container_origin": list(config.container_origin),
        "dt": config.dt,
        "gravity": config.gravity,
        "connectivity_radius": config.connectivity_radius,
        "particle_radius": config.particle_radius,
        "cup": _cup_to_dict(config.cup),
        "horizon": config.horizon,
        "granular_count": config.granular_count,
        "substeps": config.substeps,
        "normal_stiffness": config.normal_stiffness,
        "damping_ratio": config.damping_ratio,
        "friction": config.friction,
        "density": config.density,
    }
    return json.dumps(d, indent=2)


def scene_from_json(text):
    d = json.loads(text)
    known = {f.name for f in dataclasses.fields(SceneConfig)}
    extra = set(d) - known
    if extra:
        raise ConfigurationError(f"unknown scene fields: {sorted(extra)}")
    missing = {
        "dim", "container_extents", "dt", "gravity", "connectivity_radius",
        "particle_radius", "cup", "horizon", "granular_count",
    } - set(d)
    if missing:
        raise ConfigurationError(f"missing scene fields: {sorted(missing)}")
    d = dict(d)
    d["container_extents"] = tuple(d["container_extents"])
    if d.get("container_origin") is not None:
        d["container_origin"] = tuple(d["container_origin"])
    d["cup"] = _cup_from_dict(d["cup"])
    return SceneConfig(**d).validate()
