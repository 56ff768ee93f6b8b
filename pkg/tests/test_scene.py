"""Ground-truth DEM and scene plumbing.

Expected values here are either closed-form mechanics solutions or
independent re-derivations (lattice enumeration, pose maps) frozen into
the assertions.
"""

import math

import numpy as np
import pytest

from granuplan.presets import benchtop_scene_3d, pouring_scene_2d, training_scene_2d
from granuplan.scene import (
    ConfigurationError,
    MATERIAL_GRANULAR,
    MATERIAL_RIGID,
    ParticleState,
    SceneConfig,
    SimulationInstabilityError,
    boundary_distances,
    cup_lattice_sites,
    dem_step,
    init_scene,
    make_cup_2d,
    particle_mass,
    rigid_pose_apply,
    rigid_world_points,
    scene_from_json,
    scene_to_json,
    settle,
    strip_rigid,
    validate_actions,
    wall_planes,
)


def free_config(substeps=1, dt=0.01):
    # a bare container without a cup; states are built by hand
    return SceneConfig(
        dim=2, container_extents=(0.5, 0.5), dt=dt, gravity=9.81,
        connectivity_radius=0.01, particle_radius=0.0025, cup=None,
        horizon=10, granular_count=0, substeps=substeps,
    )


def lone_particle(y, vy=0.0, x=0.25, vx=0.0):
    return ParticleState(
        np.array([[x, y]]), np.array([[vx, vy]]),
        np.array([MATERIAL_GRANULAR], dtype=np.uint8),
    )


def test_free_fall_matches_closed_form():
    # with substeps=1 each outer step is one explicit update, so after n
    # steps from rest: v = -g n dt, y = y0 - g dt^2 n(n+1)/2
    cfg = free_config(substeps=1)
    st = lone_particle(0.15)
    g, dt = cfg.gravity, cfg.dt
    for n in range(1, 11):
        st = dem_step(st, cfg)
        assert abs(st.velocities[0, 1] - (-g * n * dt)) < 1e-12
        assert abs(st.positions[0, 1] - (0.15 - g * dt * dt * n * (n + 1) / 2)) < 1e-12
    assert st.velocities[0, 0] == 0.0
    assert st.positions[0, 0] == 0.25


def test_free_fall_shadow_energy_conserved():
    # semi-implicit Euler exactly conserves E + 0.5 dt m (g_vec . v) for a
    # constant force; drift should be at rounding level
    cfg = free_config(substeps=1)
    m = particle_mass(cfg)
    st = lone_particle(0.45, vx=0.3)
    dt, g = cfg.dt, cfg.gravity

    def shadow(s):
        v = s.velocities[0]
        ke = 0.5 * m * float(v @ v)
        pe = m * g * s.positions[0, 1]
        return ke + pe + 0.5 * dt * m * (-g * v[1])

    s = dem_step(st, cfg)
    e0 = shadow(s)
    for _ in range(24):  # stays clear of the floor for this many steps
        s = dem_step(s, cfg)
        assert abs(shadow(s) - e0) < 1e-9 * abs(e0)


def test_floor_equilibrium_overlap():
    # resting overlap mg/k balances gravity exactly
    cfg = free_config(substeps=4)
    m = particle_mass(cfg)
    delta = m * cfg.gravity / cfg.normal_stiffness
    st = lone_particle(cfg.particle_radius - delta)
    out = dem_step(st, cfg)
    assert abs(out.velocities[0, 1]) < 1e-12
    assert abs(out.positions[0, 1] - st.positions[0, 1]) < 1e-12


def test_head_on_contact_symmetry():
    # equal and opposite incoming velocities stay equal and opposite
    cfg = free_config(substeps=16)
    r = cfg.particle_radius
    x0, x1 = 0.14, 0.14 + 1.8 * r
    st = ParticleState(
        np.array([[x0, 0.1], [x1, 0.1]]),
        np.array([[0.1, 0.0], [-0.1, 0.0]]),
        np.array([MATERIAL_GRANULAR] * 2, dtype=np.uint8),
    )
    for _ in range(3):
        st = dem_step(st, cfg)
        assert st.velocities[0, 0] == -st.velocities[1, 0]
        assert st.velocities[0, 1] == st.velocities[1, 1]
    # the contact is repulsive: the pair must separate over time
    assert st.velocities[0, 0] < 0.0 < st.velocities[1, 0]


def test_pose_map_quarter_turn_2d():
    spec = make_cup_2d(0.04, 0.08, (0.15, 0.12), 0.0025)
    pts = np.array([[0.15, 0.02]])  # 0.10 below the pivot
    spec.surface_points = pts
    world = rigid_world_points(spec, (math.pi / 2, 0.02), 2)
    assert np.allclose(world, [[0.27, 0.12]], atol=1e-12)
    world = rigid_world_points(spec, (-math.pi / 2, 0.0), 2)
    assert np.allclose(world, [[0.05, 0.12]], atol=1e-12)


def test_pose_map_quarter_turn_3d():
    from granuplan.scene import RigidBodySpec
    spec = RigidBodySpec(
        np.array([[0.05, 0.10, 0.06]]), np.array([0.05, 0.10, 0.16]))
    world = rigid_world_points(spec, (math.pi / 2, 0.02), 3)
    # rotation about x sends -z to +y; translation acts along y
    assert np.allclose(world, [[0.05, 0.22, 0.16]], atol=1e-12)


def test_pose_is_absolute_not_cumulative():
    cfg = training_scene_2d()
    st = init_scene(cfg, seed=3)
    ref = st.positions[st.rigid_mask()].copy()
    s = st
    rng = np.random.default_rng(0)
    for _ in range(10):
        act = (rng.uniform(-2.0, 2.0), rng.uniform(-0.05, 0.05))
        s = rigid_pose_apply(s, act, cfg.cup, cfg.dt)
    s = rigid_pose_apply(s, (0.0, 0.0), cfg.cup, cfg.dt)
    assert np.array_equal(s.positions[s.rigid_mask()], ref)
    assert np.array_equal(s.positions[s.granular_mask()],
                          st.positions[st.granular_mask()])


def test_pose_apply_velocity_is_finite_difference():
    cfg = training_scene_2d()
    st = init_scene(cfg, seed=3)
    s = rigid_pose_apply(st, (0.3, 0.01), cfg.cup, cfg.dt)
    rigid = st.rigid_mask()
    fd = (s.positions[rigid] - st.positions[rigid]) / cfg.dt
    assert np.array_equal(s.velocities[rigid], fd)
    assert np.array_equal(s.velocities[st.granular_mask()],
                          st.velocities[st.granular_mask()])


def test_lattice_packing_enumeration():
    # independent re-derivation of the packing rule for the 3x6 cm cup:
    # pitch 2.2 r, margin 1.08 r on each side of the interior box
    cfg = training_scene_2d()
    r = cfg.particle_radius
    pitch, margin = 2.2 * r, 1.08 * r
    nx = math.floor((0.03 - 2 * margin) / pitch) + 1
    ny = math.floor((0.06 - 2 * margin) / pitch) + 1
    assert (nx, ny) == (5, 10)
    sites = cup_lattice_sites(cfg.cup, r, 2)
    assert len(sites) == 50
    fmin, fmax = cfg.cup.fill_region
    assert np.all(sites >= np.asarray(fmin) + r - 1e-12)
    assert np.all(sites <= np.asarray(fmax) - r + 1e-12)
    # bottom-up order
    assert np.all(np.diff(sites[:, 1]) >= -1e-12)


def test_init_scene_rejects_overfull_cup():
    import dataclasses
    cfg = training_scene_2d()
    bad = dataclasses.replace(cfg, granular_count=51)
    with pytest.raises(ConfigurationError):
        init_scene(bad, seed=0)


def test_benchtop_scene_counts():
    cfg = benchtop_scene_3d()
    st = init_scene(cfg, seed=0)
    assert st.n == 1945
    assert int((st.material == MATERIAL_GRANULAR).sum()) == 1362
    assert int((st.material == MATERIAL_RIGID).sum()) == 583
    assert abs((st.material == MATERIAL_GRANULAR).mean() - 0.70) < 0.005
    assert st.dim == 3
    # no initial contact: minimum pairwise distance at least 2r
    from granuplan.neighbors import find_neighbors
    g = st.positions[st.material == MATERIAL_GRANULAR]
    send, recv = find_neighbors(g, 2 * cfg.particle_radius)
    assert send.size == 0


def test_wall_order_and_boundary_distances():
    cfg2 = training_scene_2d()
    assert wall_planes(cfg2) == [(0, 1), (0, -1), (1, 1)]
    cfg3 = benchtop_scene_3d()
    assert wall_planes(cfg3) == [(0, 1), (0, -1), (1, 1), (1, -1), (2, 1)]
    d = boundary_distances(np.array([[0.02, 0.05]]), cfg2)
    assert np.allclose(d, [[0.02, 0.28, 0.05]], atol=1e-15)


def test_settle_containment_and_determinism():
    cfg = training_scene_2d()
    st = init_scene(cfg, seed=0)
    res = settle(st, cfg, max_steps=600)
    assert res.converged
    g = res.state.granular_mask()
    pos = res.state.positions[g]
    lo = np.asarray(cfg.container_origin) - cfg.particle_radius
    hi = lo + np.asarray(cfg.container_extents) + 2 * cfg.particle_radius
    assert np.all(pos >= lo) and np.all(pos <= hi)
    # bit-exact reproducibility
    res2 = settle(init_scene(cfg, seed=0), cfg, max_steps=600)
    assert np.array_equal(res.state.positions, res2.state.positions)
    assert np.array_equal(res.state.velocities, res2.state.velocities)
    # a different seed jitters differently
    other = settle(init_scene(cfg, seed=1), cfg, max_steps=600)
    assert not np.array_equal(res.state.positions, other.state.positions)


def test_rigid_rows_never_move_in_dem_step():
    cfg = training_scene_2d()
    st = init_scene(cfg, seed=0)
    rigid = st.rigid_mask()
    s = st
    for _ in range(5):
        s = dem_step(s, cfg)
    assert np.array_equal(s.positions[rigid], st.positions[rigid])
    assert s.t == 5


def test_granular_only_free_fall_state():
    cfg = training_scene_2d()
    st = strip_rigid(init_scene(cfg, seed=0))
    assert int(st.rigid_mask().sum()) == 0
    s = dem_step(st, cfg)
    # everything accelerates downward on the first step
    assert np.all(s.velocities[:, 1] < 0)


def test_rigid_only_scene():
    import dataclasses
    cfg = dataclasses.replace(training_scene_2d(), granular_count=0)
    st = init_scene(cfg, seed=0)
    assert int(st.granular_mask().sum()) == 0
    s = dem_step(st, cfg)
    assert np.array_equal(s.positions, st.positions)


def test_instability_raises_with_index():
    cfg = SceneConfig(
        dim=2, container_extents=(0.5, 0.5), dt=0.01, gravity=9.81,
        connectivity_radius=0.01, particle_radius=0.0025, cup=None,
        horizon=10, granular_count=0, substeps=1, normal_stiffness=1e12,
    )
    r = cfg.particle_radius
    st = ParticleState(
        np.array([[0.2, 0.2], [0.2 + 0.5 * r, 0.2]]),
        np.zeros((2, 2)),
        np.array([MATERIAL_GRANULAR] * 2, dtype=np.uint8),
    )
    with pytest.raises(SimulationInstabilityError) as e:
        dem_step(st, cfg)
    assert e.value.particle_index in (0, 1)


def test_action_validation():
    acts = np.zeros((120, 2))
    validate_actions(acts, horizon=120)
    bad = acts.copy()
    bad[5, 0] = 3.0
    with pytest.raises(ConfigurationError):
        validate_actions(bad)
    jump = acts.copy()
    jump[60, 0] = 1.0  # a 1 rad jump in a single step
    with pytest.raises(ConfigurationError):
        validate_actions(jump)
    with pytest.raises(ConfigurationError):
        validate_actions(np.zeros((5, 3)))
    with pytest.raises(ConfigurationError):
        validate_actions(acts, horizon=100)


def test_scene_json_round_trip():
    cfg = pouring_scene_2d()
    back = scene_from_json(scene_to_json(cfg))
    a = init_scene(cfg, seed=11)
    b = init_scene(back, seed=11)
    assert np.array_equal(a.positions, b.positions)
    assert np.array_equal(a.material, b.material)
    assert back.connectivity_radius == cfg.connectivity_radius
    assert back.substeps == cfg.substeps


def test_scene_json_rejects_malformed():
    cfg = training_scene_2d()
    import json
    d = json.loads(scene_to_json(cfg))
    d["unknown_knob"] = 1
    with pytest.raises(ConfigurationError):
        scene_from_json(json.dumps(d))
    d2 = json.loads(scene_to_json(cfg))
    del d2["dt"]
    with pytest.raises(ConfigurationError):
        scene_from_json(json.dumps(d2))


def test_config_validation_errors():
    with pytest.raises(ConfigurationError):
        SceneConfig(dim=4, container_extents=(1, 1), dt=0.01, gravity=9.81,
                    connectivity_radius=0.1, particle_radius=0.01, cup=None,
                    horizon=10, granular_count=0).validate()
    with pytest.raises(ConfigurationError):
        SceneConfig(dim=2, container_extents=(1, 1), dt=-0.01, gravity=9.81,
                    connectivity_radius=0.1, particle_radius=0.01, cup=None,
                    horizon=10, granular_count=0).validate()
    with pytest.raises(ConfigurationError):
        # granular particles without a cup to hold them
        SceneConfig(dim=2, container_extents=(1, 1), dt=0.01, gravity=9.81,
                    connectivity_radius=0.1, particle_radius=0.01, cup=None,
                    horizon=10, granular_count=5).validate()
