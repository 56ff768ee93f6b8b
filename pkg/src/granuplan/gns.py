"""Learned surrogate for granular dynamics.

Encode-process-decode graph network: particle histories become graphs
(graphs.build_graph), an encoder lifts node and edge attributes to a
latent width, K interaction blocks pass messages with residual updates
on both nodes and edges, and a decoder emits one normalized velocity
delta per particle.  Training regresses one-step finite-difference
accelerations under random-walk input noise; rollout feeds predictions
back autoregressively while rigid particles follow the commanded poses
exactly.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .graphs import (GraphSample, NormalizationStats, apply_random_walk_noise,
                     build_graph, edge_feature_size, node_feature_size)
from .scene import MATERIAL_RIGID, rigid_world_points

LOSS_GRANULAR = "granular"
LOSS_GRANULAR_RIGID = "granular_rigid"

DEFAULT_NOISE_STD = 3e-4
LR_HOLD_EPOCHS = 500
LR_DECAY = 0.997


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries the offending epoch index."""

    def __init__(self, epoch):
        super().__init__(f"training loss diverged at epoch {epoch}")
        self.epoch = epoch


@dataclass(frozen=True)
class GNSConfig:
    dim: int
    K: int = 10
    C: int = 5
    latent: int = 128
    use_controls: bool = True
    loss_variant: str = LOSS_GRANULAR

    def __post_init__(self):
        if self.dim not in (2, 3):
            raise ValueError("dim must be 2 or 3")
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.C < 1:
            raise ValueError("C must be >= 1")
        if self.latent < 1:
            raise ValueError("latent width must be positive")
        if self.loss_variant not in (LOSS_GRANULAR, LOSS_GRANULAR_RIGID):
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")

    def node_width(self):
        return node_feature_size(self.dim, self.C)

    def edge_width(self):
        return edge_feature_size(self.dim)

    def to_dict(self):
        return {"dim": self.dim, "K": self.K, "C": self.C,
                "latent": self.latent, "use_controls": self.use_controls,
                "loss_variant": self.loss_variant}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def init_params(config, seed):
    """Fresh parameter pyramid, deterministic in the seed."""
    rng = np.random.default_rng(seed)
    latent = config.latent
    params = {
        "node_encoder": ad.mlp_init(rng, config.node_width(), latent, latent,
                                    with_layer_norm=True),
        "edge_encoder": ad.mlp_init(rng, config.edge_width(), latent, latent,
                                    with_layer_norm=True),
    }
    for k in range(config.K):
        params[f"block{k}_edge"] = ad.mlp_init(
            rng, 3 * latent, latent, latent, with_layer_norm=True)
        params[f"block{k}_node"] = ad.mlp_init(
            rng, 2 * latent, latent, latent, with_layer_norm=True)
    params["decoder"] = ad.mlp_init(rng, latent, latent, config.dim,
                                    with_layer_norm=False)
    return params


@dataclass
class GNSModel:
    """Trained bundle: architecture, weights, and feature normalization."""

    config: GNSConfig
    params: dict
    stats: NormalizationStats


def forward(params, graph, config):
    """Normalized per-particle velocity deltas for one graph.

    Parameter leaves may be plain arrays (inference) or autodiff tensors
    (training); the ops promote accordingly, so the exact same code runs
    in both modes.
    """
    v = ad.mlp_apply(params["node_encoder"], graph.node_features)
    e = ad.mlp_apply(params["edge_encoder"], graph.edge_features)
    n = graph.n_nodes
    if config.K > 0 and graph.n_edges > 0:
        send_plan = ad.scatter_plan(graph.senders, n)
        recv_plan = ad.scatter_plan(graph.receivers, n)
        for k in range(config.K):
            vs = ad.gather(v, graph.senders, send_plan)
            vr = ad.gather(v, graph.receivers, recv_plan)
            msg = ad.mlp_apply(params[f"block{k}_edge"],
                               ad.concat([e, vs, vr]))
            agg = ad.segment_sum(msg, graph.receivers, n)
            upd = ad.mlp_apply(params[f"block{k}_node"], ad.concat([v, agg]))
            v = ad.add(v, upd)
            e = ad.add(e, msg)
    elif config.K > 0:
        # no edges: aggregation is identically zero but node blocks still run
        zeros = np.zeros((n, config.latent), dtype=np.float32)
        for k in range(config.K):
            upd = ad.mlp_apply(params[f"block{k}_node"], ad.concat([v, zeros]))
            v = ad.add(v, upd)
    return ad.mlp_apply(params["decoder"], v)


def integrate(positions, velocities, accel, dt):
    """Semi-implicit Euler step: velocity first, position with the new one."""
    v = np.asarray(velocities) + dt * np.asarray(accel)
    x = np.asarray(positions) + dt * v
    return x, v


# ---------------------------------------------------------------------------
# normalization statistics


def compute_stats(records, dt):
    """Per-component moments of granular finite-difference velocities and
    their per-step deltas over a list of trajectory records."""
    dim = records[0].positions.shape[2]
    s_v = np.zeros(dim)
    s_v2 = np.zeros(dim)
    n_v = 0
    s_a = np.zeros(dim)
    s_a2 = np.zeros(dim)
    n_a = 0
    for rec in records:
        g = rec.material != MATERIAL_RIGID
        pos = rec.positions[:, g, :].astype(np.float64)
        vel = np.diff(pos, axis=0) / dt
        acc = np.diff(vel, axis=0)
        s_v += vel.sum(axis=(0, 1))
        s_v2 += (vel * vel).sum(axis=(0, 1))
        n_v += vel.shape[0] * vel.shape[1]
        if acc.shape[0]:
            s_a += acc.sum(axis=(0, 1))
            s_a2 += (acc * acc).sum(axis=(0, 1))
            n_a += acc.shape[0] * acc.shape[1]
    if n_v == 0 or n_a == 0:
        raise ValueError("records too short to compute statistics")
    vm = s_v / n_v
    am = s_a / n_a
    return NormalizationStats.from_moments(
        vm, np.maximum(s_v2 / n_v - vm * vm, 0.0),
        am, np.maximum(s_a2 / n_a - am * am, 0.0))


def record_controls(rec, t):
    """Commanded per-particle velocity for step t of a stored trajectory:
    the rigid finite-difference velocity into frame t+1, zero elsewhere."""
    n = rec.positions.shape[1]
    ctrl = np.zeros((n, rec.positions.shape[2]))
    r = rec.material == MATERIAL_RIGID
    if r.any():
        delta = rec.positions[t + 1, r, :].astype(np.float64) \
            - rec.positions[t, r, :].astype(np.float64)
        ctrl[r] = delta / rec.config.dt
    return ctrl


def _prepare_sample(rec, t, config, stats, noise_std, rng):
    """History window ending at frame t, noised, plus the normalized target."""
    scene = rec.config
    hist = rec.positions[t - config.C:t + 1].astype(np.float64)
    noised = apply_random_walk_noise(hist, rec.material, noise_std, rng)
    ctrl = record_controls(rec, t) if config.use_controls else None
    graph = build_graph(noised, rec.material, scene, control=ctrl,
                        stats=stats)
    x_next = rec.positions[t + 1].astype(np.float64)
    v_now = (noised[-1] - noised[-2]) / scene.dt
    v_next = (x_next - noised[-1]) / scene.dt
    target = ((v_next - v_now) - stats.acc_mean) / stats.acc_std
    return graph, target.astype(np.float32)


def _merge_graphs(graphs):
    """Disjoint union of GraphSamples with node indices offset per part."""
    if len(graphs) == 1:
        return graphs[0]
    nodes, edges, sends, recvs, mats, poss = [], [], [], [], [], []
    offset = 0
    for g in graphs:
        nodes.append(g.node_features)
        edges.append(g.edge_features)
        sends.append(g.senders + offset)
        recvs.append(g.receivers + offset)
        mats.append(g.material)
        poss.append(g.positions)
        offset += g.n_nodes
    return GraphSample(np.concatenate(nodes), np.concatenate(edges),
                       np.concatenate(sends), np.concatenate(recvs),
                       np.concatenate(mats), np.concatenate(poss))


def _union(prepared):
    """Disjoint union of (graph, target) pairs into one big graph."""
    if len(prepared) == 1:
        g, t = prepared[0]
        return g, t, g.material
    big = _merge_graphs([g for g, _ in prepared])
    return big, np.concatenate([t for _, t in prepared]), big.material


def _loss_mask(material, dim, loss_variant):
    if loss_variant == LOSS_GRANULAR_RIGID:
        keep = np.ones(material.shape[0], dtype=bool)
    else:
        keep = material != MATERIAL_RIGID
    mask = np.zeros((material.shape[0], dim), dtype=np.float32)
    mask[keep] = 1.0
    return mask, int(keep.sum())


def one_step_loss(params, batch, config):
    """Masked mean absolute error on normalized velocity deltas."""
    graph, target, material = _union(batch)
    mask, count = _loss_mask(material, config.dim, config.loss_variant)
    pred = forward(params, graph, config)
    diff = ad.absolute(ad.mul(ad.sub(pred, target), mask))
    return ad.mul(ad.sum_all(diff), 1.0 / max(count * config.dim, 1))


def _wrap_params(params):
    tensors = {}
    view = {}
    for mod, sub in params.items():
        view[mod] = {}
        for name, arr in sub.items():
            t = ad.Tensor(arr)
            tensors[f"{mod}/{name}"] = t
            view[mod][name] = t
    return tensors, view


def _sample_index(records, history):
    """All (record, t) pairs with a full history window and a next frame."""
    out = []
    for i, rec in enumerate(records):
        steps = rec.positions.shape[0] - 1
        for t in range(history, steps):
            out.append((i, t))
    return out


def train(records, config, epochs, seed, epoch_samples=5000, batch_size=2,
          noise_std=DEFAULT_NOISE_STD, lr=1e-4, stats=None, callback=None):
    """Fit a surrogate on stored trajectories.

    One epoch visits a fresh seeded subsample of (trajectory, step) pairs
    of size min(epoch_samples, all), in minibatches that are merged into a
    single disjoint graph.  The learning rate holds at `lr` for the first
    500 epochs and then decays by 0.997 per epoch.  Returns (GNSModel,
    per-epoch mean loss list).
    """
    if not records:
        raise ValueError("no training records")
    if stats is None:
        stats = compute_stats(records, records[0].config.dt)
    params = init_params(config, seed)
    index = _sample_index(records, config.C)
    if not index:
        raise ValueError("records too short for the configured history")

    tensors, view = _wrap_params(params)
    flat = {name: t.data for name, t in tensors.items()}
    opt = ad.Adam(flat, lr=lr)
    noise_rng = np.random.default_rng([seed, 0xA11CE])
    losses = []
    for epoch in range(epochs):
        opt.lr = lr if epoch < LR_HOLD_EPOCHS \
            else lr * LR_DECAY ** (epoch - LR_HOLD_EPOCHS + 1)
        erng = np.random.default_rng([seed, epoch])
        take = min(epoch_samples, len(index))
        picks = erng.choice(len(index), size=take, replace=False)
        total = 0.0
        nb = 0
        for lo in range(0, take, batch_size):
            batch = []
            for j in picks[lo:lo + batch_size]:
                ri, t = index[j]
                batch.append(_prepare_sample(records[ri], t, config, stats,
                                             noise_std, noise_rng))
            loss = one_step_loss(view, batch, config)
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise TrainingDivergedError(epoch)
            ad.backward(loss)
            opt.step({name: t.grad for name, t in tensors.items()})
            for t in tensors.values():
                t.grad = None
            total += lval
            nb += 1
        losses.append(total / max(nb, 1))
        if callback is not None:
            callback(epoch, losses[-1])
    return GNSModel(config, params, stats), losses


# ---------------------------------------------------------------------------
# rollout


@dataclass
class RolloutResult:
    positions: np.ndarray      # (H+1, N, dim) float64
    accels: np.ndarray         # (H, N, dim) velocity deltas, physical units

    @property
    def final(self):
        return self.positions[-1]


def rollout(model, history, material, scene_config, actions=None):
    """Autoregressive prediction from a position history.

    Args:
        model: GNSModel.
        history: (C+1, N, dim) positions, oldest first (repeat a settled
            frame to start from rest).
        material: (N,) material codes.
        scene_config: SceneConfig supplying dt, walls, and the rigid body.
        actions: (H, 2) absolute poses driving the rigid particles, or
            None to run with no kinematic override (free granular flow).

    Rigid rows are placed exactly at each commanded pose; granular rows
    advance by the decoded velocity delta under semi-implicit Euler.  No
    noise is injected.  Returns RolloutResult with H = len(actions)
    (or 0 positions beyond the start when actions is None or empty).
    """
    config = model.config
    hist = np.asarray(history, dtype=np.float64)
    if hist.shape[0] != config.C + 1:
        raise ValueError(f"history must have C+1 = {config.C + 1} frames")
    steps = 0 if actions is None else len(actions)
    n = hist.shape[1]
    dim = hist.shape[2]
    rigid = material == MATERIAL_RIGID
    dt = scene_config.dt
    stats = model.stats

    out = np.empty((steps + 1, n, dim))
    out[0] = hist[-1]
    acc_out = np.empty((steps, n, dim))
    window = hist.copy()
    for t in range(steps):
        pos = window[-1]
        ctrl = np.zeros((n, dim))
        if rigid.any():
            new_rigid = rigid_world_points(scene_config.cup, actions[t], dim)
            ctrl[rigid] = (new_rigid - pos[rigid]) / dt
        graph = build_graph(window, material, scene_config,
                            control=ctrl if config.use_controls else None,
                            stats=stats)
        acc_n = forward(model.params, graph, config).astype(np.float64)
        acc = acc_n * stats.acc_std + stats.acc_mean
        v_now = (window[-1] - window[-2]) / dt
        new_pos = pos + dt * (v_now + acc)
        if rigid.any():
            new_pos[rigid] = new_rigid
        window = np.concatenate([window[1:], new_pos[None]], axis=0)
        out[t + 1] = new_pos
        acc_out[t] = acc
    return RolloutResult(out, acc_out)


def rollout_batch(model, history, material, scene_config, actions_batch):
    """Roll several action sequences out from one start in lockstep.

    Candidates share the history, material, and horizon, and advance
    together; each step evaluates the network once on the disjoint union
    of the candidate graphs, which keeps the matrix work in large blocks
    instead of many small ones.  Per-candidate results match independent
    rollout() calls up to BLAS reassociation of the row blocks.  Returns
    a list of RolloutResult in input order.
    """
    config = model.config
    hist = np.asarray(history, dtype=np.float64)
    if hist.shape[0] != config.C + 1:
        raise ValueError(f"history must have C+1 = {config.C + 1} frames")
    acts = [np.asarray(a, dtype=np.float64) for a in actions_batch]
    if not acts:
        return []
    steps = len(acts[0])
    if any(len(a) != steps for a in acts):
        raise ValueError("all candidates must share one horizon")
    B = len(acts)
    n = hist.shape[1]
    dim = hist.shape[2]
    rigid = material == MATERIAL_RIGID
    has_rigid = bool(rigid.any())
    dt = scene_config.dt
    stats = model.stats

    outs = np.empty((B, steps + 1, n, dim))
    outs[:, 0] = hist[-1]
    accs = np.empty((B, steps, n, dim))
    windows = [hist.copy() for _ in range(B)]
    for t in range(steps):
        graphs = []
        rigid_targets = []
        for b in range(B):
            pos = windows[b][-1]
            ctrl = np.zeros((n, dim))
            if has_rigid:
                new_rigid = rigid_world_points(scene_config.cup,
                                               acts[b][t], dim)
                ctrl[rigid] = (new_rigid - pos[rigid]) / dt
                rigid_targets.append(new_rigid)
            graphs.append(build_graph(
                windows[b], material, scene_config,
                control=ctrl if config.use_controls else None, stats=stats))
        big = _merge_graphs(graphs)
        acc_n = forward(model.params, big, config).astype(np.float64)
        acc_all = (acc_n * stats.acc_std + stats.acc_mean).reshape(B, n, dim)
        for b in range(B):
            window = windows[b]
            v_now = (window[-1] - window[-2]) / dt
            new_pos = window[-1] + dt * (v_now + acc_all[b])
            if has_rigid:
                new_pos[rigid] = rigid_targets[b]
            windows[b] = np.concatenate([window[1:], new_pos[None]], axis=0)
            outs[b, t + 1] = new_pos
            accs[b, t] = acc_all[b]
    return [RolloutResult(outs[b], accs[b]) for b in range(B)]


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model, path):
    """Write manifest.json + params.bin (little-endian float32) under path."""
    os.makedirs(path, exist_ok=True)
    entries = []
    chunks = []
    for mod in sorted(model.params):
        for name in sorted(model.params[mod]):
            arr = np.ascontiguousarray(model.params[mod][name],
                                       dtype="<f4")
            entries.append({"name": f"{mod}/{name}",
                            "shape": list(arr.shape)})
            chunks.append(arr.reshape(-1))
    manifest = {"format": "gns-checkpoint-v1",
                "config": model.config.to_dict(),
                "stats": model.stats.to_dict(),
                "dtype": "<f4",
                "entries": entries}
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(path, "params.bin"), "wb") as fh:
        fh.write(np.concatenate(chunks).tobytes())


def load_model(path):
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "gns-checkpoint-v1":
        raise ValueError("not a model checkpoint")
    config = GNSConfig.from_dict(manifest["config"])
    stats = NormalizationStats.from_dict(manifest["stats"])
    blob = np.fromfile(os.path.join(path, "params.bin"),
                       dtype=manifest["dtype"])
    params = {}
    off = 0
    for entry in manifest["entries"]:
        mod, name = entry["name"].split("/")
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if off + size > blob.size:
            raise ValueError("parameter blob shorter than manifest")
        arr = blob[off:off + size].reshape(entry["shape"]).astype(np.float32)
        params.setdefault(mod, {})[name] = arr
        off += size
    if off != blob.size:
        raise ValueError("parameter blob longer than manifest")
    return GNSModel(config, params, stats)
