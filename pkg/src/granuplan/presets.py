"""Ready-made scene configurations.

Two desk-scale 2D scenes sized so that full train/plan cycles run on a
single CPU core, plus the benchtop-scale 3D scene matching the physical
setup the package models (10x20x20 cm container, a 7 cm diameter cup,
1945 particles of which 70% are granular).
"""

from .scene import SceneConfig, make_cup_2d, make_cup_3d

PARTICLE_RADIUS_2D = 0.0025


def training_scene_2d(horizon=120):
    """Small 2D scene: 50 granular particles in a 3x6 cm cup."""
    cup = make_cup_2d(0.03, 0.06, (0.15, 0.12), PARTICLE_RADIUS_2D)
    return SceneConfig(
        dim=2,
        container_extents=(0.30, 0.20),
        dt=0.01,
        gravity=9.81,
        connectivity_radius=0.010,
        particle_radius=PARTICLE_RADIUS_2D,
        cup=cup,
        horizon=horizon,
        granular_count=50,
        substeps=40,
    ).validate()


def pouring_scene_2d(horizon=120):
    """Planning-scale 2D scene: 200 granular particles in a 5.5x12 cm cup."""
    cup = make_cup_2d(0.055, 0.12, (0.15, 0.18), PARTICLE_RADIUS_2D)
    return SceneConfig(
        dim=2,
        container_extents=(0.30, 0.20),
        dt=0.01,
        gravity=9.81,
        connectivity_radius=0.010,
        particle_radius=PARTICLE_RADIUS_2D,
        cup=cup,
        horizon=horizon,
        granular_count=200,
        substeps=40,
    ).validate()


def benchtop_scene_3d(horizon=240):
    """Full-scale 3D scene: open 10x20x20 cm box, 7x10 cm cylindrical cup,
    1945 particles total (1362 granular, 583 rigid)."""
    cup = make_cup_3d(0.07, 0.10, (0.05, 0.10, 0.16), 0.0025, rigid_count=583)
    return SceneConfig(
        dim=3,
        container_extents=(0.10, 0.20, 0.20),
        dt=0.01,
        gravity=9.81,
        connectivity_radius=0.015,
        particle_radius=0.0025,
        cup=cup,
        horizon=horizon,
        granular_count=1362,
        substeps=512,
    ).validate()
