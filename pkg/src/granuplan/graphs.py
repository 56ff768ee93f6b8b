"""Interaction graphs from particle states.

Node features are laid out as

    [ C finite-difference velocities, oldest first (C * dim entries) |
      signed wall distances, clipped (2 * dim - 1 entries)           |
      material flag (1 = rigid)                                      |
      control input (dim entries)                                    ]

Velocities are standardized with dataset statistics; wall distances are
divided by the connectivity radius and clipped to [-1, 1]; the control
block holds the commanded rigid velocity for the next step, scaled (but
never mean-shifted) so that granular rows stay exactly zero.

Edge features for sender i and receiver j are [s / R, |s| / R] with
s = p_i - p_j, connecting all pairs strictly closer than R.
"""

import dataclasses

import numpy as np

from .neighbors import find_neighbors
from .scene import MATERIAL_RIGID, boundary_distances

__all__ = [
    "GraphSample",
    "NormalizationStats",
    "apply_random_walk_noise",
    "build_graph",
    "find_neighbors",
    "node_feature_size",
    "edge_feature_size",
]

STD_FLOOR = 1e-8


def node_feature_size(dim, history):
    return dim * history + (2 * dim - 1) + 1 + dim


def edge_feature_size(dim):
    return dim + 1


@dataclasses.dataclass
class NormalizationStats:
    """Per-axis dataset statistics for inputs and targets."""

    vel_mean: np.ndarray
    vel_std: np.ndarray
    acc_mean: np.ndarray
    acc_std: np.ndarray

    @classmethod
    def identity(cls, dim):
        z = np.zeros(dim)
        o = np.ones(dim)
        return cls(z.copy(), o.copy(), z.copy(), o.copy())

    @classmethod
    def from_moments(cls, vel_mean, vel_var, acc_mean, acc_var):
        return cls(
            np.asarray(vel_mean, dtype=np.float64),
            np.sqrt(np.maximum(np.asarray(vel_var, dtype=np.float64), 0.0))
            .clip(min=STD_FLOOR),
            np.asarray(acc_mean, dtype=np.float64),
            np.sqrt(np.maximum(np.asarray(acc_var, dtype=np.float64), 0.0))
            .clip(min=STD_FLOOR),
        )

    def to_dict(self):
        return {
            "vel_mean": self.vel_mean.tolist(),
            "vel_std": self.vel_std.tolist(),
            "acc_mean": self.acc_mean.tolist(),
            "acc_std": self.acc_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], dtype=np.float64)
                     for k in ("vel_mean", "vel_std", "acc_mean", "acc_std")))


@dataclasses.dataclass
class GraphSample:
    """One encoded scene: features plus connectivity.

    positions is the (un-normalized) current frame, kept around so the
    caller can integrate predictions back into world coordinates.
    """

    node_features: np.ndarray
    edge_features: np.ndarray
    senders: np.ndarray
    receivers: np.ndarray
    material: np.ndarray
    positions: np.ndarray

    @property
    def n_nodes(self):
        return self.node_features.shape[0]

    @property
    def n_edges(self):
        return self.senders.shape[0]


def apply_random_walk_noise(history, material, sigma, rng):
    """Add a zero-start random walk to granular rows of a position history.

    history is (C+1, N, dim); frame 0 is left untouched and each later
    frame accumulates an independent N(0, sigma^2 / C) increment per axis,
    so the final frame carries accumulated variance sigma^2.  Rigid rows
    are never perturbed.
    """
    history = np.asarray(history, dtype=np.float64)
    frames = history.shape[0]
    noised = history.copy()
    if frames < 2 or sigma == 0.0:
        return noised
    steps = frames - 1
    g = material != MATERIAL_RIGID
    inc = rng.normal(0.0, sigma / np.sqrt(steps),
                     size=(steps, int(g.sum()), history.shape[2]))
    walk = np.cumsum(inc, axis=0)
    noised[1:, g, :] += walk
    return noised


def build_graph(history, material, config, control=None, stats=None,
                dtype=np.float32):
    """Encode a position history into node/edge features.

    Args:
        history: (C+1, N, dim) positions, oldest first; the last frame is
            the current one and defines connectivity.
        material: (N,) material codes.
        config: SceneConfig (dt, connectivity radius, container walls).
        control: (N, dim) commanded velocities for the coming step, or None
            for all-zero controls.
        stats: NormalizationStats or None for identity.
        dtype: feature dtype (float32 for training, float64 for checks).
    """
    history = np.asarray(history, dtype=np.float64)
    if history.ndim != 3:
        raise ValueError("history must be (C+1, N, dim)")
    frames, n, dim = history.shape
    if frames < 2:
        raise ValueError("history needs at least two frames")
    if dim != config.dim:
        raise ValueError("history dim does not match scene config")
    steps = frames - 1
    if stats is None:
        stats = NormalizationStats.identity(dim)

    current = history[-1]
    vel = np.diff(history, axis=0) / config.dt           # (C, N, dim)
    vel = (vel - stats.vel_mean) / stats.vel_std
    vel_block = np.moveaxis(vel, 0, 1).reshape(n, steps * dim)

    bd = boundary_distances(current, config) / config.connectivity_radius
    np.clip(bd, -1.0, 1.0, out=bd)

    flag = (material == MATERIAL_RIGID).astype(np.float64)[:, None]

    if control is None:
        ctrl = np.zeros((n, dim))
    else:
        ctrl = np.asarray(control, dtype=np.float64) / stats.vel_std

    nodes = np.concatenate([vel_block, bd, flag, ctrl], axis=1).astype(dtype)

    senders, receivers = find_neighbors(current, config.connectivity_radius)
    s = current[senders] - current[receivers]
    dist = np.sqrt(np.einsum("ij,ij->i", s, s))
    edges = np.concatenate(
        [s / config.connectivity_radius,
         (dist / config.connectivity_radius)[:, None]], axis=1
    ).astype(dtype)

    return GraphSample(nodes, edges, senders, receivers,
                       np.asarray(material), current)
