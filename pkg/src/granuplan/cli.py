"""Command-line entry point.

Subcommands wire the library end to end: gen-data drives the DEM oracle
into a dataset, train fits the graph-network simulator, rollout and
ablation score learned rollouts against stored ground truth, ot compares
two point clouds, and plan optimizes a pouring trajectory against a
checkpoint.  Every command stamps its output directory with exactly one
run_manifest.json recording the command, the full configuration, seeds,
content hashes of the inputs, and the produced artifacts.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical
failure (simulator blowup, diverged training, degenerate linear algebra).

Point clouds and states travel as a JSON manifest next to a little-endian
float32 blob; datasets and checkpoints are the directory formats of the
datagen and gns modules.
"""

import argparse
import dataclasses
import datetime
import hashlib
import json
import os
import pathlib
import sys

import numpy as np

from . import datagen, gns, presets
from .ot import TargetCost, auto_epsilon, exact_w2, sinkhorn_divergence
from .planner import PlannerConfig, ViaTrajectory, plan_trajectory
from .scene import (
    ConfigurationError,
    MATERIAL_RIGID,
    SimulationInstabilityError,
    scene_from_json,
    scene_to_json,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3

SCENE_PRESETS = {
    "training2d": presets.training_scene_2d,
    "pouring2d": presets.pouring_scene_2d,
    "bench3d": presets.benchtop_scene_3d,
}

CLOUD_FORMAT = "granuplan-cloud-v1"
STATE_FORMAT = "granuplan-state-v1"


# ---------------------------------------------------------------------------
# small file formats


def write_cloud(path, points):
    """Point cloud to a JSON manifest plus a float32 blob beside it."""
    path = pathlib.Path(path)
    arr = np.ascontiguousarray(points, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("cloud must be (N, dim)")
    blob = path.with_suffix(".f32")
    blob.write_bytes(arr.tobytes())
    path.write_text(json.dumps(
        {"format": CLOUD_FORMAT, "shape": list(arr.shape), "dtype": "<f4",
         "file": blob.name}, indent=2, sort_keys=True))
    return path


def read_cloud(path):
    path = pathlib.Path(path)
    man = json.loads(path.read_text())
    if man.get("format") != CLOUD_FORMAT:
        raise ValueError(f"{path} is not a cloud file")
    shape = tuple(int(s) for s in man["shape"])
    raw = (path.parent / man["file"]).read_bytes()
    need = int(np.prod(shape)) * 4
    if len(raw) != need:
        raise ValueError(
            f"{path}: payload is {len(raw)} bytes, shape {shape} needs {need}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def write_state(path, positions, material):
    """Single-frame particle state (positions + material tags) on disk."""
    path = pathlib.Path(path)
    arr = np.ascontiguousarray(positions, dtype="<f4")
    mat = np.ascontiguousarray(material, dtype=np.uint8)
    if arr.ndim != 2 or mat.shape != (arr.shape[0],):
        raise ValueError("state needs (N, dim) positions and (N,) material")
    pblob = path.with_suffix(".f32")
    mblob = path.with_suffix(".u8")
    pblob.write_bytes(arr.tobytes())
    mblob.write_bytes(mat.tobytes())
    path.write_text(json.dumps(
        {"format": STATE_FORMAT, "shape": list(arr.shape),
         "positions_file": pblob.name, "material_file": mblob.name},
        indent=2, sort_keys=True))
    return path


def read_state(path):
    path = pathlib.Path(path)
    man = json.loads(path.read_text())
    if man.get("format") != STATE_FORMAT:
        raise ValueError(f"{path} is not a state file")
    shape = tuple(int(s) for s in man["shape"])
    raw = (path.parent / man["positions_file"]).read_bytes()
    if len(raw) != int(np.prod(shape)) * 4:
        raise ValueError(f"{path}: positions payload does not match shape")
    mraw = (path.parent / man["material_file"]).read_bytes()
    if len(mraw) != shape[0]:
        raise ValueError(f"{path}: material payload does not match shape")
    pos = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)
    return pos, np.frombuffer(mraw, dtype=np.uint8).copy()


def load_scene(spec):
    """Scene from a JSON file path or a named preset."""
    p = pathlib.Path(spec)
    if p.is_file():
        return scene_from_json(p.read_text())
    if spec in SCENE_PRESETS:
        return SCENE_PRESETS[spec]()
    raise ConfigurationError(
        f"scene {spec!r} is neither a file nor one of "
        f"{sorted(SCENE_PRESETS)}")


# ---------------------------------------------------------------------------
# run manifests


@dataclasses.dataclass
class RunManifest:
    """Provenance stamp written once per output directory.

    Timestamps differ across reruns; determinism is checked over the
    artifact files themselves (see artifact_digest), which are identical
    for identical commands and seeds.
    """

    command: str
    config: dict
    seeds: list
    inputs: dict
    outputs: list
    started: str
    finished: str


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_sha256(path):
    """Content hash of a directory: file names and bytes, name-sorted."""
    h = hashlib.sha256()
    for p in sorted(pathlib.Path(path).rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(path)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def hash_input(path):
    p = pathlib.Path(path)
    return tree_sha256(p) if p.is_dir() else file_sha256(p)


def artifact_digest(path, exclude=("run_manifest.json",)):
    """Digest of an output directory minus the timestamped run manifest."""
    h = hashlib.sha256()
    for p in sorted(pathlib.Path(path).rglob("*")):
        if p.is_file() and p.name not in exclude:
            h.update(str(p.relative_to(path)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def _write_run_manifest(out_dir, command, config, seeds, inputs, started):
    out_dir = pathlib.Path(out_dir)
    outputs = sorted(
        str(p.relative_to(out_dir)) for p in out_dir.rglob("*")
        if p.is_file() and p.name != "run_manifest.json")
    man = RunManifest(command=command, config=config,
                      seeds=[int(s) for s in seeds],
                      inputs={k: {"path": str(p), "sha256": hash_input(p)}
                              for k, p in inputs.items()},
                      outputs=outputs, started=started, finished=_now())
    (out_dir / "run_manifest.json").write_text(
        json.dumps(dataclasses.asdict(man), indent=2, sort_keys=True))


def _config_snapshot(args, skip=("func", "threads")):
    out = {}
    for k, v in vars(args).items():
        if k in skip:
            continue
        out[k] = str(v) if isinstance(v, pathlib.Path) else v
    return out


# ---------------------------------------------------------------------------
# shared helpers


def _load_model(path):
    model = gns.load_model(str(path))
    return model


def _subsample(points, limit):
    n = len(points)
    if n <= limit:
        return points
    idx = np.linspace(0, n - 1, limit).round().astype(int)
    return points[idx]


def _box_stats(values):
    v = np.asarray(values, dtype=np.float64)
    q1, med, q3 = np.percentile(v, [25.0, 50.0, 75.0])
    return {"min": float(v.min()), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(v.max()), "mean": float(v.mean())}


BOX_COLUMNS = ("min", "q1", "median", "q3", "max", "mean")


def _rollout_against_record(model, rec, limit):
    """Model rollout along a record's actions, scored against its frames.

    Returns (predicted positions (H-C+1, N, dim) float32, per-step W2 list).
    """
    C = model.config.C
    if rec.horizon < C + 1:
        raise ConfigurationError(
            f"record {rec.name}: horizon {rec.horizon} is too short for "
            f"history length {C}")
    if rec.dim != model.config.dim:
        raise ConfigurationError(
            f"record {rec.name}: dim {rec.dim} does not match the model")
    hist = rec.positions[:C + 1].astype(np.float64)
    res = gns.rollout(model, hist, rec.material, rec.config,
                      rec.actions[C:])
    g = rec.material != MATERIAL_RIGID
    per_step = []
    for i in range(1, res.positions.shape[0]):
        a = _subsample(res.positions[i][g], limit)
        b = _subsample(rec.positions[C + i].astype(np.float64)[g], limit)
        per_step.append(float(exact_w2(a, b)))
    return res.positions.astype(np.float32), per_step


def _svg_scatter(panels, path, size=360, pad=0.06):
    """Static scatter plot, one or more square panels side by side.

    panels: list of (title, groups) with groups = [(label, color, (N, 2)
    points)].  Writes SVG 1.1 with flipped y so larger y is up.
    """
    W = size * len(panels)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" '
        f'width="{W}" height="{size + 40}" '
        f'viewBox="0 0 {W} {size + 40}">',
        f'<rect x="0" y="0" width="{W}" height="{size + 40}" fill="white"/>',
    ]
    for pi, (title, groups) in enumerate(panels):
        x0 = pi * size
        allpts = np.concatenate([np.asarray(p, dtype=np.float64)
                                 for _, _, p in groups], axis=0)
        lo = allpts.min(axis=0)
        hi = allpts.max(axis=0)
        span = np.maximum(hi - lo, 1e-9)
        lo = lo - pad * span
        hi = hi + pad * span
        span = hi - lo
        scale = (size - 20) / span.max()

        def to_px(p, x0=x0, lo=lo, span=span, scale=scale):
            x = x0 + 10 + (p[:, 0] - lo[0]) * scale
            y = 30 + (size - 20) - (p[:, 1] - lo[1]) * scale
            return x, y

        parts.append(
            f'<rect x="{x0 + 10}" y="30" width="{size - 20}" '
            f'height="{size - 20}" fill="none" stroke="#888"/>')
        parts.append(
            f'<text x="{x0 + 12}" y="20" font-family="sans-serif" '
            f'font-size="13">{title}</text>')
        for gi, (label, color, pts) in enumerate(groups):
            xs, ys = to_px(np.asarray(pts, dtype=np.float64))
            for x, y in zip(xs, ys):
                parts.append(
                    f'<circle cx="{x:.2f}" cy="{y:.2f}" r="2.5" '
                    f'fill="{color}" fill-opacity="0.65"/>')
            parts.append(
                f'<text x="{x0 + 90 * (gi + 1)}" y="20" fill="{color}" '
                f'font-family="sans-serif" font-size="12">{label}</text>')
    parts.append("</svg>")
    pathlib.Path(path).write_text("\n".join(parts))


def _projection_panels(dim):
    # 2D scenes plot (x, y); 3D scenes get a front (y, z) and top (x, y)
    # pair of projections
    if dim == 2:
        return [("view", (0, 1))]
    return [("front", (1, 2)), ("top", (0, 1))]


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args):
    started = _now()
    scene = load_scene(args.scene)
    if args.horizon is not None:
        scene = dataclasses.replace(scene, horizon=args.horizon).validate()
    records = datagen.generate_dataset(scene, args.sims, seed=args.seed)
    out = pathlib.Path(args.out)
    datagen.write_dataset(records, out)
    inputs = {}
    if pathlib.Path(args.scene).is_file():
        inputs["scene"] = args.scene
    _write_run_manifest(out, "gen-data", _config_snapshot(args),
                        [args.seed], inputs, started)
    print(f"wrote {len(records)} records to {out}")
    return EXIT_OK


def cmd_train(args):
    started = _now()
    records = datagen.read_dataset(args.dataset)
    if not records:
        raise ConfigurationError("dataset holds no records")
    dim = records[0].dim
    if args.dim is not None and args.dim != dim:
        raise ConfigurationError(
            f"--dim {args.dim} does not match dataset dim {dim}")
    loss_variant = {"g": gns.LOSS_GRANULAR,
                    "g+r": gns.LOSS_GRANULAR_RIGID}[args.loss]
    config = gns.GNSConfig(dim=dim, K=args.k, C=args.history,
                           latent=args.latent,
                           use_controls=args.controls == "on",
                           loss_variant=loss_variant)
    every = max(1, args.epochs // 10)

    def progress(epoch, loss):
        if (epoch + 1) % every == 0 or epoch == 0:
            print(f"epoch {epoch + 1}/{args.epochs} loss {loss:.6f}")

    model, losses = gns.train(
        records, config, epochs=args.epochs, seed=args.seed,
        epoch_samples=args.samples, batch_size=args.batch,
        noise_std=args.noise, lr=args.lr,
        callback=progress if args.epochs else None)
    out = pathlib.Path(args.out)
    gns.save_model(model, str(out))
    with open(out / "loss_curve.csv", "w") as fh:
        fh.write("epoch,loss\n")
        for i, v in enumerate(losses):
            fh.write(f"{i},{v:.8e}\n")
    _write_run_manifest(out, "train", _config_snapshot(args), [args.seed],
                        {"dataset": args.dataset}, started)
    print(f"checkpoint written to {out}")
    return EXIT_OK


def cmd_rollout(args):
    started = _now()
    model = _load_model(args.checkpoint)
    records = datagen.read_dataset(args.dataset)
    if args.record is not None:
        records = [r for r in records if r.name == args.record]
        if not records:
            raise ConfigurationError(f"no record named {args.record!r}")
    if not records:
        raise ConfigurationError("dataset holds no records")
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    metrics = {}
    finals = []
    for rec in records:
        pred, per_step = _rollout_against_record(model, rec, args.limit)
        (out / f"{rec.name}_rollout.f32").write_bytes(
            np.ascontiguousarray(pred, dtype="<f4").tobytes())
        metrics[rec.name] = {
            "shape": list(pred.shape),
            "per_step_w2": per_step,
            "final_w2": per_step[-1],
        }
        finals.append(per_step[-1])
    (out / "metrics.json").write_text(
        json.dumps({"records": metrics, "final_w2": _box_stats(finals)},
                   indent=2, sort_keys=True))
    stats = _box_stats(finals)
    with open(out / "rollout_metrics.csv", "w") as fh:
        fh.write(",".join(BOX_COLUMNS) + "\n")
        fh.write(",".join(f"{stats[c]:.8e}" for c in BOX_COLUMNS) + "\n")
    _write_run_manifest(out, "rollout", _config_snapshot(args), [],
                        {"checkpoint": args.checkpoint,
                         "dataset": args.dataset}, started)
    print(f"median final W2 {stats['median']:.6f} over {len(finals)} records")
    return EXIT_OK


def cmd_ablation(args):
    started = _now()
    records = datagen.read_dataset(args.dataset)
    if not records:
        raise ConfigurationError("ablation needs a non-empty test set")
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    detail = {}
    for ckpt in args.checkpoints:
        model = _load_model(ckpt)
        finals = []
        for rec in records:
            _, per_step = _rollout_against_record(model, rec, args.limit)
            finals.append(per_step[-1])
        stats = _box_stats(finals)
        name = pathlib.Path(ckpt).name
        rows.append((name, stats))
        detail[name] = {"finals": finals, **stats}
    with open(out / "ablation.csv", "w") as fh:
        fh.write("checkpoint," + ",".join(BOX_COLUMNS) + "\n")
        for name, stats in rows:
            fh.write(name + ","
                     + ",".join(f"{stats[c]:.8e}" for c in BOX_COLUMNS)
                     + "\n")
    (out / "ablation.json").write_text(
        json.dumps(detail, indent=2, sort_keys=True))
    _write_run_manifest(
        out, "ablation", _config_snapshot(args), [],
        {f"checkpoint{i}": c for i, c in enumerate(args.checkpoints)}
        | {"dataset": args.dataset}, started)
    for name, stats in rows:
        print(f"{name}: median {stats['median']:.6f}")
    return EXIT_OK


def cmd_ot(args):
    a = read_cloud(args.a)
    b = read_cloud(args.b)
    eps = args.epsilon if args.epsilon is not None else auto_epsilon(a, b)
    res = sinkhorn_divergence(a, b, epsilon=eps, tol=args.tol,
                              max_iters=args.max_iters)
    payload = {
        "sinkhorn": res.value,
        "epsilon": eps,
        "iterations": res.iterations,
        "converged": res.converged,
        "n_a": len(a),
        "n_b": len(b),
    }
    if len(a) == len(b) and len(a) <= 512:
        payload["exact_w2"] = float(exact_w2(a, b))
    print(json.dumps(payload, indent=2, sort_keys=True))
    return EXIT_OK


def _plan_inputs(args, model):
    """History frames, material, scene, and start pose for planning."""
    C = model.config.C
    if args.state is not None:
        if args.scene is None:
            raise ConfigurationError("--state needs --scene for the rollout")
        scene = load_scene(args.scene)
        pos, material = read_state(args.state)
        hist = np.repeat(pos[None, :, :], C + 1, axis=0)
        start = np.zeros(2)
        return hist, material, scene, start, {"state": args.state}
    if args.dataset is None or args.record is None:
        raise ConfigurationError("provide --dataset with --record, or --state")
    records = datagen.read_dataset(args.dataset)
    matches = [r for r in records if r.name == args.record]
    if not matches:
        raise ConfigurationError(f"no record named {args.record!r}")
    rec = matches[0]
    f = args.frame
    if f < 0 or f + C > rec.horizon:
        raise ConfigurationError(
            f"frame {f} leaves no room for {C + 1} history frames")
    hist = rec.positions[f:f + C + 1].astype(np.float64)
    start = rec.actions[f + C - 1] if f + C >= 1 else np.zeros(2)
    return hist, rec.material, rec.config, np.asarray(start), \
        {"dataset": args.dataset}


def cmd_plan(args):
    started = _now()
    model = _load_model(args.checkpoint)
    hist, material, scene, start, inputs = _plan_inputs(args, model)
    if not np.any(material == MATERIAL_RIGID):
        raise ConfigurationError("planning needs a rigid body to actuate")
    target = read_cloud(args.target)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    horizon = args.horizon if args.horizon is not None else scene.horizon
    pcfg = PlannerConfig(
        sigma0=args.sigma0, population=args.population,
        iterations=args.iterations, alpha=args.alpha, beta=args.beta,
        seeds=seeds, H=horizon, via_count=args.via,
        epsilon=args.epsilon, sinkhorn_tol=args.sinkhorn_tol,
        sinkhorn_max_iters=args.sinkhorn_iters).validate()
    init_via = ViaTrajectory(
        np.repeat(np.asarray(start, dtype=np.float64)[None, :],
                  args.via + 1, axis=0))
    result = plan_trajectory(model, hist, material, scene, target,
                             init_via=init_via, config=pcfg)

    tcost = TargetCost(target, epsilon=pcfg.epsilon,
                       tol=pcfg.sinkhorn_tol,
                       max_iters=pcfg.sinkhorn_max_iters)
    granular = material != MATERIAL_RIGID
    s_initial = float(tcost(hist[-1][granular]))

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trajectory.json").write_text(json.dumps({
        "start_pose": [float(v) for v in start],
        "via": result.via.via.tolist(),
        "actions": result.actions.tolist(),
    }, indent=2, sort_keys=True))
    summary = {
        "s_initial": s_initial,
        "s_init_end": result.initial_sinkhorn,
        "s_optimized_mean": result.sinkhorn_mean,
        "s_optimized_std": result.sinkhorn_std,
    }
    (out / "diagnostics.json").write_text(json.dumps({
        "summary": summary,
        "best_cost": result.cost,
        "best_sinkhorn": result.sinkhorn,
        "seeds": result.seed_results,
    }, indent=2, sort_keys=True))
    write_cloud(out / "predicted_cloud.json", result.predicted_cloud)
    if args.emit_plots:
        panels = []
        for title, (i, j) in _projection_panels(target.shape[1]):
            panels.append((title, [
                ("target", "#1f77b4", target[:, (i, j)]),
                ("predicted", "#d62728",
                 result.predicted_cloud[:, (i, j)]),
            ]))
        _svg_scatter(panels, out / "plan.svg")
    _write_run_manifest(out, "plan", _config_snapshot(args), seeds,
                        inputs | {"checkpoint": args.checkpoint,
                                  "target": args.target}, started)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser and dispatch


def build_parser():
    p = argparse.ArgumentParser(
        prog="granuplan",
        description="granular manipulation: simulate, learn, plan")
    p.add_argument("--threads", type=int, default=None,
                   help="cap BLAS/OpenMP thread pools (best effort)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a DEM training dataset")
    g.add_argument("--scene", required=True,
                   help="scene JSON file or preset name "
                        f"({', '.join(sorted(SCENE_PRESETS))})")
    g.add_argument("--sims", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--horizon", type=int, default=None,
                   help="override the scene horizon")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fit the graph-network simulator")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--k", type=int, default=10,
                   help="message-passing steps")
    t.add_argument("--history", type=int, default=5,
                   help="history length C")
    t.add_argument("--controls", choices=("on", "off"), default="on")
    t.add_argument("--loss", choices=("g", "g+r"), default="g")
    t.add_argument("--epochs", type=int, default=300)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--latent", type=int, default=128)
    t.add_argument("--samples", type=int, default=5000,
                   help="samples drawn per epoch")
    t.add_argument("--batch", type=int, default=2)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--noise", type=float, default=gns.DEFAULT_NOISE_STD)
    t.add_argument("--dim", type=int, default=None,
                   help="expected scene dimension (checked)")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rollout", help="roll a checkpoint along a dataset")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--dataset", required=True)
    r.add_argument("--record", default=None,
                   help="single record name (default: all)")
    r.add_argument("--limit", type=int, default=512,
                   help="subsample clouds above this size for exact W2")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rollout)

    a = sub.add_parser("ablation", help="box statistics for checkpoints")
    a.add_argument("--checkpoints", nargs="+", required=True)
    a.add_argument("--dataset", required=True)
    a.add_argument("--limit", type=int, default=512)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablation)

    o = sub.add_parser("ot", help="compare two point-cloud files")
    o.add_argument("--a", required=True)
    o.add_argument("--b", required=True)
    o.add_argument("--epsilon", type=float, default=None)
    o.add_argument("--tol", type=float, default=1e-6)
    o.add_argument("--max-iters", type=int, default=2000)
    o.set_defaults(func=cmd_ot)

    q = sub.add_parser("plan", help="optimize a pouring trajectory")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--dataset", default=None)
    q.add_argument("--record", default=None)
    q.add_argument("--frame", type=int, default=0)
    q.add_argument("--state", default=None,
                   help="state file alternative to --dataset/--record")
    q.add_argument("--scene", default=None,
                   help="scene (file or preset), required with --state")
    q.add_argument("--target", required=True)
    q.add_argument("--out", required=True)
    q.add_argument("--seeds", default="0")
    q.add_argument("--population", type=int, default=20)
    q.add_argument("--iterations", "--iters", type=int, default=150)
    q.add_argument("--sigma0", type=float, default=1.5)
    q.add_argument("--alpha", type=float, default=1000.0)
    q.add_argument("--beta", type=float, default=0.001)
    q.add_argument("--via", type=int, default=6)
    q.add_argument("--horizon", type=int, default=None)
    q.add_argument("--epsilon", type=float, default=None)
    q.add_argument("--sinkhorn-tol", type=float, default=1e-4)
    q.add_argument("--sinkhorn-iters", type=int, default=300)
    q.add_argument("--emit-plots", action="store_true")
    q.set_defaults(func=cmd_plan)
    return p


def _set_threads(n):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_threads(args.threads)
    try:
        return args.func(args)
    except (SimulationInstabilityError, gns.TrainingDivergedError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigurationError, ValueError, OSError,
            json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
