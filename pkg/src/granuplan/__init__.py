"""granuplan: granular-material manipulation with learned graph dynamics.

The package covers the full loop: a spring-dashpot DEM oracle (scene),
trajectory-family dataset generation (datagen), graph construction and
normalization (graphs, neighbors), a numpy autodiff core (core), the
learned graph-network simulator (gns), entropic optimal-transport
metrics (ot), and trajectory optimization against the learned model
(planner).  The cli module exposes the same loop as subcommands.
"""

from .scene import (
    MATERIAL_GRANULAR,
    MATERIAL_RIGID,
    ConfigurationError,
    SimulationInstabilityError,
    ParticleState,
    RigidBodySpec,
    SceneConfig,
    action_bounds,
    dem_step,
    init_scene,
    rigid_pose_apply,
    settle,
    scene_from_json,
    scene_to_json,
    validate_actions,
)
from .neighbors import find_neighbors
from .graphs import GraphSample, NormalizationStats, build_graph
from .gns import (
    GNSConfig,
    GNSModel,
    TrainingDivergedError,
    compute_stats,
    load_model,
    rollout,
    rollout_batch,
    save_model,
    train,
)
from .ot import (
    PointCloud,
    SinkhornResult,
    TargetCost,
    auto_epsilon,
    exact_w2,
    sinkhorn_divergence,
)
from .datagen import (
    SimulationRecord,
    TrajectoryFamily,
    default_family,
    generate_dataset,
    make_trajectory,
    read_dataset,
    simulate_record,
    verify_replay,
    write_dataset,
)
from .planner import (
    CMAResult,
    PlannerConfig,
    PlanResult,
    ViaTrajectory,
    cmaes_minimize,
    pchip_interpolate,
    plan_trajectory,
    project_constraints,
)
from .presets import benchtop_scene_3d, pouring_scene_2d, training_scene_2d

__version__ = "0.1.0"
