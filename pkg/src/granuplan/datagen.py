"""Training-corpus generation for the learned simulator.

Drives the spring-dashpot DEM with four scripted cup-trajectory families
(cosine ramp-and-hold, independent sinusoids, constant-velocity tilt to
both sides, and a translate/rotate/return split in thirds), plus two
special simulations: a cup that only jitters around its rest pose, and
the granular block falling with the cup removed.

Records are replayable: stored frames are float32, and between outer
steps the simulation state is collapsed onto exactly what the file keeps
(positions rounded to float32, velocities the finite difference of the
rounded frames).  Re-running the DEM from the stored initial frame and
actions therefore reproduces every stored frame bit for bit.

A dataset on disk is a directory holding manifest.json plus, per record,
a little-endian float32 position blob laid out [time][particle][axis]
and a parallel uint8 material-tag array.
"""

import dataclasses
import hashlib
import json
import pathlib

import numpy as np

from .scene import (
    ACTION_ANGLE_MAX,
    ACTION_SHIFT_MAX,
    ConfigurationError,
    ParticleState,
    action_bounds,
    dem_step,
    init_scene,
    rigid_pose_apply,
    scene_from_json,
    scene_to_json,
    settle,
    step_delta_limits,
    strip_rigid,
    validate_actions,
)

FAMILY_COSINE_HOLD = "cosine-hold"
FAMILY_SINUSOID = "sinusoid"
FAMILY_LINEAR_TILT = "linear-tilt"
FAMILY_NOISY_LINEAR = "noisy-linear"
FAMILY_KINDS = (
    FAMILY_COSINE_HOLD,
    FAMILY_SINUSOID,
    FAMILY_LINEAR_TILT,
    FAMILY_NOISY_LINEAR,
)

SPECIAL_NOISE_ONLY = "noise-only"
SPECIAL_FREE_FALL = "free-fall"

MANIFEST_FORMAT = "granuplan-dataset-v1"

# Ramp-and-hold dwell at maximum rotation, in outer steps.
PLATEAU_STEPS = 30


@dataclasses.dataclass(frozen=True)
class TrajectoryFamily:
    """Sampling recipe for one scripted cup trajectory.

    Parameter ranges are uniform draws; a degenerate range (a, a) pins the
    value exactly.  Angles are radians, shifts meters, frequencies Hz,
    tilt rates rad/s.  Noise scales are per-step standard deviations.
    direction fixes the tilt sign when -1 or +1 and samples it when 0.
    The seed makes the trajectory reproducible from the family alone.
    """

    kind: str
    angle_range: tuple = (0.6, 2.0)
    freq_range: tuple = (0.2, 1.0)
    tilt_rate_range: tuple = (0.5, 2.0)
    shift_range: tuple = (0.005, 0.045)
    angle_noise: float = 0.0
    shift_noise: float = 0.0
    direction: int = 0
    plateau: int = PLATEAU_STEPS
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in FAMILY_KINDS:
            raise ConfigurationError(f"unknown trajectory family: {self.kind!r}")
        for name in ("angle_range", "freq_range", "tilt_rate_range", "shift_range"):
            lo, hi = getattr(self, name)
            if not (0.0 <= lo <= hi):
                raise ConfigurationError(f"{name} must satisfy 0 <= lo <= hi")
        if self.angle_noise < 0 or self.shift_noise < 0:
            raise ConfigurationError("noise scales must be non-negative")
        if self.direction not in (-1, 0, 1):
            raise ConfigurationError("direction must be -1, 0, or +1")
        if self.plateau < 10:
            raise ConfigurationError("plateau must be at least 10 steps")

    def to_dict(self):
        d = dataclasses.asdict(self)
        for name in ("angle_range", "freq_range", "tilt_rate_range", "shift_range"):
            d[name] = list(d[name])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for name in ("angle_range", "freq_range", "tilt_rate_range", "shift_range"):
            if name in d:
                d[name] = tuple(d[name])
        return cls(**d)


def default_family(kind, seed=None):
    """Family with the documented desk-scale noise defaults for `kind`."""
    if kind == FAMILY_COSINE_HOLD:
        return TrajectoryFamily(kind, angle_noise=1e-3, shift_noise=5e-4, seed=seed)
    if kind == FAMILY_NOISY_LINEAR:
        # translation jitter sigma 1e-3 m; rotation jitter is a unit normal
        # scaled per step by 1e-2 rad
        return TrajectoryFamily(kind, angle_noise=1e-2, shift_noise=1e-3, seed=seed)
    if kind in (FAMILY_SINUSOID, FAMILY_LINEAR_TILT):
        return TrajectoryFamily(kind, seed=seed)
    raise ConfigurationError(f"unknown trajectory family: {kind!r}")


def _sign(family, rng):
    if family.direction:
        return float(family.direction)
    return float((-1.0, 1.0)[int(rng.integers(2))])


def _require(ok, why):
    if not ok:
        raise ConfigurationError(f"family parameters cannot satisfy bounds: {why}")


def _confine(actions, H):
    """Clip to the actuator box, then sweep forward clamping increments.

    The sweep never leaves the box: each clamped value lies between two
    quantities that are themselves inside it.
    """
    low, high = action_bounds()
    np.clip(actions, low, high, out=actions)
    lim = step_delta_limits(H)
    for t in range(1, H):
        np.clip(actions[t], actions[t - 1] - lim, actions[t - 1] + lim,
                out=actions[t])
    return actions


def make_trajectory(family, H, rng=None, dt=0.01):
    """Sample one (H, 2) absolute-pose action sequence [theta, shift].

    The noise-free base profile must fit the actuator and rate limits or a
    parameter error is raised; additive noise on top is clipped instead.
    Every returned sequence passes validate_actions.
    """
    if H < 2:
        raise ConfigurationError("trajectory needs at least 2 steps")
    if rng is None:
        rng = np.random.default_rng(family.seed)
    lim = step_delta_limits(H)
    out = np.zeros((H, 2))

    if family.kind == FAMILY_COSINE_HOLD:
        theta_max = _sign(family, rng) * rng.uniform(*family.angle_range)
        _require(abs(theta_max) <= ACTION_ANGLE_MAX, "max rotation beyond actuator")
        _require(H >= family.plateau + 2, "horizon too short for the plateau")
        ramp = (H - family.plateau) // 2
        down = H - family.plateau - ramp
        # steepest slope of the half-cosine ramp is pi/(2 ramp) per step
        _require(abs(theta_max) * np.pi / (2 * min(ramp, down)) <= lim[0],
                 "cosine ramp steeper than the rate limit")
        up = theta_max * 0.5 * (1.0 - np.cos(np.pi * np.arange(1, ramp + 1) / ramp))
        hold = np.full(family.plateau, theta_max)
        back = theta_max * 0.5 * (1.0 + np.cos(np.pi * np.arange(1, down + 1) / down))
        out[:, 0] = np.concatenate([up, hold, back])
        if family.angle_noise > 0:
            out[:, 0] += rng.normal(0.0, family.angle_noise, H)
        if family.shift_noise > 0:
            out[:, 1] = np.cumsum(rng.normal(0.0, family.shift_noise, H))

    elif family.kind == FAMILY_SINUSOID:
        amp_t = _sign(family, rng) * rng.uniform(*family.angle_range)
        f_t = rng.uniform(*family.freq_range)
        amp_s = _sign(family, rng) * rng.uniform(*family.shift_range)
        f_s = rng.uniform(*family.freq_range)
        _require(abs(amp_t) <= ACTION_ANGLE_MAX, "rotation amplitude beyond actuator")
        _require(abs(amp_s) <= ACTION_SHIFT_MAX, "shift amplitude beyond actuator")
        _require(abs(amp_t) * 2 * np.pi * f_t * dt <= lim[0],
                 "rotation sinusoid faster than the rate limit")
        _require(abs(amp_s) * 2 * np.pi * f_s * dt <= lim[1],
                 "shift sinusoid faster than the rate limit")
        t = np.arange(H) * dt
        out[:, 0] = amp_t * np.sin(2 * np.pi * f_t * t)
        out[:, 1] = amp_s * np.sin(2 * np.pi * f_s * t)

    elif family.kind == FAMILY_LINEAR_TILT:
        rate = _sign(family, rng) * rng.uniform(*family.tilt_rate_range) * dt
        _require(abs(rate) <= lim[0], "tilt velocity beyond the rate limit")
        _require(H >= 4, "tilt profile needs at least 4 steps")
        quarter = H // 4
        _require(abs(rate) * quarter <= ACTION_ANGLE_MAX,
                 "tilt excursion beyond the actuator")
        slope = np.zeros(H)
        slope[:quarter] = rate
        slope[quarter:3 * quarter] = -rate
        slope[3 * quarter:4 * quarter] = rate
        out[:, 0] = np.cumsum(slope)

    elif family.kind == FAMILY_NOISY_LINEAR:
        _require(H >= 3, "thirds profile needs at least 3 steps")
        third = H // 3
        rem = H - 2 * third
        shift = _sign(family, rng) * rng.uniform(*family.shift_range)
        theta = _sign(family, rng) * rng.uniform(*family.angle_range)
        _require(abs(theta) <= ACTION_ANGLE_MAX, "rotation target beyond actuator")
        _require(abs(shift) <= ACTION_SHIFT_MAX, "shift target beyond actuator")
        _require(abs(shift) / third <= lim[1] and abs(theta) / third <= lim[0]
                 and abs(shift) / rem <= lim[1] and abs(theta) / rem <= lim[0],
                 "per-third ramps steeper than the rate limit")
        out[:third, 1] = np.linspace(0.0, shift, third + 1)[1:]
        out[third:2 * third, 1] = shift
        out[third:2 * third, 0] = np.linspace(0.0, theta, third + 1)[1:]
        out[2 * third:, 0] = np.linspace(theta, 0.0, rem + 1)[1:]
        out[2 * third:, 1] = np.linspace(shift, 0.0, rem + 1)[1:]
        if family.shift_noise > 0:
            out[:, 1] += rng.normal(0.0, family.shift_noise, H)
        if family.angle_noise > 0:
            out[:, 0] += family.angle_noise * rng.standard_normal(H)

    else:  # pragma: no cover - guarded by the dataclass validator
        raise ConfigurationError(f"unknown trajectory family: {family.kind!r}")

    _confine(out, H)
    return validate_actions(out, H)


def noise_trajectory(H, rng):
    """Cup pose random walk with small Gaussian steps around the rest pose.

    This is the first special simulation: the cup translates and rotates
    with small noise but never pours, exposing fine cup-grain contacts.
    """
    lim = step_delta_limits(H)
    sigma = np.array([2e-3, 5e-4])
    envelope = np.array([0.15, 0.01])
    out = np.empty((H, 2))
    pose = np.zeros(2)
    for t in range(H):
        step = np.clip(rng.normal(0.0, sigma), -lim, lim)
        pose = np.clip(pose + step, -envelope, envelope)
        out[t] = pose
    return validate_actions(out, H)


# ---------------------------------------------------------------------------
# records


@dataclasses.dataclass
class SimulationRecord:
    """One rollout of the DEM under a scripted action sequence.

    positions is float32 with shape (H+1, N, dim); actions is (H, 2).
    The stored frames satisfy the replayability invariant: frame t+1 is
    the (float32-rounded) result of posing the rigid body at actions[t]
    and stepping the DEM from the reconstruction of frame t.
    """

    config: object
    actions: np.ndarray
    positions: np.ndarray
    material: np.ndarray
    family: dict
    name: str = ""

    @property
    def horizon(self):
        return self.positions.shape[0] - 1

    @property
    def n(self):
        return self.positions.shape[1]

    @property
    def dim(self):
        return self.positions.shape[2]

    def state_at(self, t):
        """Reconstruct the ParticleState for frame t.

        Velocities are the finite difference of stored frames over dt;
        the initial frame is at rest by convention.
        """
        pos = self.positions[t].astype(np.float64)
        if t == 0:
            vel = np.zeros_like(pos)
        else:
            prev = self.positions[t - 1].astype(np.float64)
            vel = (pos - prev) / self.config.dt
        return ParticleState(pos, vel, self.material.copy(), t)


def simulate_record(config, actions, state0, family=None, name=""):
    """Run the DEM under `actions` from `state0` and store every frame.

    The running state is collapsed onto the stored representation after
    each outer step: positions rounded to float32, velocities replaced by
    the finite difference of rounded frames (the initial frame starts at
    rest).  The trajectory is then a function of the stored data only, so
    replaying a record reproduces it exactly.
    """
    actions = np.asarray(actions, dtype=np.float64)
    H = actions.shape[0]
    if config.cup is not None:
        validate_actions(actions, H)
    material = np.asarray(state0.material, dtype=np.uint8).copy()
    frames = np.empty((H + 1,) + state0.positions.shape, dtype=np.float32)
    frames[0] = state0.positions.astype(np.float32)
    cur = ParticleState(frames[0].astype(np.float64),
                        np.zeros_like(state0.positions, dtype=np.float64),
                        material, 0)
    for t in range(H):
        if config.cup is not None and cur.rigid_mask().any():
            cur = rigid_pose_apply(cur, actions[t], config.cup, config.dt)
        cur = dem_step(cur, config)
        frames[t + 1] = cur.positions.astype(np.float32)
        pos = frames[t + 1].astype(np.float64)
        vel = (pos - frames[t].astype(np.float64)) / config.dt
        cur = ParticleState(pos, vel, material, cur.t)
    return SimulationRecord(config=config, actions=actions, positions=frames,
                            material=material, family=dict(family or {}),
                            name=name)


def verify_replay(record):
    """Re-simulate a record from its stored initial frame.

    Returns True when every stored frame is reproduced bit for bit.
    """
    redo = simulate_record(record.config, record.actions, record.state_at(0),
                           family=record.family, name=record.name)
    return bool(np.array_equal(redo.positions, record.positions))


def _settled_state(config, seed):
    """Initial packing dropped into the cup and settled, then zeroed."""
    res = settle(init_scene(config, seed), config)
    out = res.state
    out.velocities[:] = 0.0
    out.t = 0
    return out


def generate_dataset(config, n_sims, seed=0):
    """Generate n_sims records: n_sims - 2 family draws plus the two specials.

    Families are drawn uniformly; the last two records are always the
    noise-only cup jitter and the free-fall simulation with the cup
    removed (its stored config drops the cup and zeroes the packing
    count; row membership lives in the record's material array).  Each
    simulation owns an RNG stream derived from (seed, sim index), so the
    corpus is reproducible and simulations are independent.
    """
    config.validate()
    if n_sims < 2:
        raise ConfigurationError("n_sims must cover the two special simulations")
    H = config.horizon
    records = []
    for i in range(n_sims):
        rng = np.random.default_rng([seed, i])
        name = f"sim{i:03d}"
        if i < n_sims - 2:
            kind = FAMILY_KINDS[int(rng.integers(len(FAMILY_KINDS)))]
            fam = default_family(kind, seed=int(rng.integers(2 ** 31)))
            actions = make_trajectory(fam, H, dt=config.dt)
            state0 = _settled_state(config, int(rng.integers(2 ** 31)))
            rec = simulate_record(config, actions, state0,
                                  family=fam.to_dict(), name=name)
        elif i == n_sims - 2:
            actions = noise_trajectory(H, rng)
            state0 = _settled_state(config, int(rng.integers(2 ** 31)))
            rec = simulate_record(config, actions, state0,
                                  family={"kind": SPECIAL_NOISE_ONLY}, name=name)
        else:
            ffcfg = dataclasses.replace(config, cup=None, granular_count=0)
            state0 = strip_rigid(init_scene(config, int(rng.integers(2 ** 31))))
            rec = simulate_record(ffcfg, np.zeros((H, 2)), state0,
                                  family={"kind": SPECIAL_FREE_FALL}, name=name)
        records.append(rec)
    return records


# ---------------------------------------------------------------------------
# persistence


def write_dataset(records, path):
    """Write records to a dataset directory; returns the path.

    Layout: manifest.json with the scene config, per-record metadata,
    shapes, and byte offsets; per record a little-endian float32 blob of
    positions [time][particle][axis] and a uint8 material-tag array.
    """
    path = pathlib.Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = [rec.name for rec in records]
    if len(set(names)) != len(names):
        raise ValueError("record names must be unique within a dataset")
    entries = []
    for rec in records:
        pos = np.ascontiguousarray(rec.positions, dtype="<f4")
        mat = np.ascontiguousarray(rec.material, dtype=np.uint8)
        pos_file = f"{rec.name}_positions.f32"
        mat_file = f"{rec.name}_material.u8"
        (path / pos_file).write_bytes(pos.tobytes())
        (path / mat_file).write_bytes(mat.tobytes())
        entries.append({
            "name": rec.name,
            "family": rec.family,
            "shape": list(pos.shape),
            "positions_file": pos_file,
            "positions_offset": 0,
            "positions_bytes": int(pos.nbytes),
            "material_file": mat_file,
            "material_offset": 0,
            "material_bytes": int(mat.nbytes),
            "actions": [[float(u), float(v)] for u, v in rec.actions],
            "scene": json.loads(scene_to_json(rec.config)),
        })
    manifest = {
        "format": MANIFEST_FORMAT,
        "scene": json.loads(scene_to_json(records[0].config)) if records else None,
        "records": entries,
    }
    (path / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True))
    return path


def read_dataset(path):
    """Load a dataset directory back into SimulationRecord objects.

    Raises ValueError on a malformed manifest or when a payload size does
    not match its manifest-declared shape.
    """
    path = pathlib.Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed manifest: {exc}") from exc
    if manifest.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"unrecognized dataset format: {manifest.get('format')!r}")
    records = []
    try:
        entries = manifest["records"]
        for ent in entries:
            shape = tuple(int(s) for s in ent["shape"])
            if len(shape) != 3:
                raise ValueError(f"record {ent['name']}: shape must be rank 3")
            raw = (path / ent["positions_file"]).read_bytes()
            need = int(np.prod(shape)) * 4
            if len(raw) != need:
                raise ValueError(
                    f"record {ent['name']}: positions payload is {len(raw)} "
                    f"bytes but shape {shape} needs {need}")
            pos = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            mraw = (path / ent["material_file"]).read_bytes()
            if len(mraw) != shape[1]:
                raise ValueError(
                    f"record {ent['name']}: material payload is {len(mraw)} "
                    f"bytes but the record has {shape[1]} particles")
            material = np.frombuffer(mraw, dtype=np.uint8).copy()
            actions = np.asarray(ent["actions"], dtype=np.float64)
            if actions.shape != (shape[0] - 1, 2):
                raise ValueError(
                    f"record {ent['name']}: {actions.shape[0]} actions for "
                    f"{shape[0]} frames")
            cfg = scene_from_json(json.dumps(ent["scene"]))
            records.append(SimulationRecord(
                config=cfg, actions=actions, positions=pos, material=material,
                family=dict(ent.get("family") or {}), name=ent["name"]))
    except KeyError as exc:
        raise ValueError(f"malformed manifest: missing key {exc}") from exc
    return records


def dataset_digest(path):
    """SHA-256 over every file in a dataset directory, name-sorted.

    Two runs of generate_dataset + write_dataset with the same seed give
    the same digest.
    """
    h = hashlib.sha256()
    for p in sorted(pathlib.Path(path).iterdir()):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()
