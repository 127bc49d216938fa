"""Command line: gen-data | train | eval | ablate | metrics.

Every artifact-producing run writes a manifest (command, config hash,
content hash of inputs, output paths) next to its outputs; reruns with
identical seeds and inputs reproduce every byte. All files are written to
a temp path and atomically renamed. The LGS_SEED environment variable
overrides configured seeds everywhere.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .core import (
    BEVGridSpec,
    FrameSample,
    LaneGraph,
    save_sequence,
    segment_from_json,
    sequence_to_json,
    write_json_atomic,
)
from .evaluation import DETECTION_THRESHOLDS, EvalReport, evaluate
from .model import LaneSegmentModel, ModelConfig, predictions_to_graph
from .streaming import make_bundle, stream_step
from .synth import (
    ScenarioSpec,
    TEMPLATES,
    generate_sequence,
    grid_from_meta,
    load_rendered_sequence,
    load_sequence_meta,
    scenario_meta,
)
from .training import TrainConfig, Trainer, ablate, evaluate_model, format_ablation_table
from . import engine as E


class CliError(Exception):
    """User-facing failure; main prints it and exits nonzero."""


# hashing and manifests ---------------------------------------------------------


def content_hash(paths: list[str]) -> str:
    """Hash over file contents with git-style blob framing, in path order."""
    h = hashlib.sha256()
    for p in sorted(paths):
        with open(p, "rb") as fh:
            data = fh.read()
        h.update(f"blob {len(data)}\0".encode())
        h.update(data)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_manifest(out_dir, command, config, seed, inputs, outputs) -> str:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "config_hash": config_hash(config),
        "input_hash": content_hash(inputs),
        "outputs": sorted(outputs),
    }
    path = os.path.join(out_dir, "manifest.json")
    write_json_atomic(manifest, path, indent=2)
    return path


def write_csv_atomic(rows: list[dict], fields: list[str], path: str) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp, path)


def resolve_seed(seed: int) -> int:
    env = os.environ.get("LGS_SEED")
    return int(env) if env else int(seed)


# input loading ------------------------------------------------------------------


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise CliError(f"{path}: {err.strerror or err}")
    try:
        return json.loads(text)
    except json.JSONDecodeError as err:
        raise CliError(f"{path}: line {err.lineno}, column {err.colno}: {err.msg}")


def _graphs_from_doc(doc: dict, path: str) -> list[LaneGraph]:
    if "frames" not in doc:
        raise CliError(f"{path}: missing field 'frames'")
    graphs = []
    for i, fr in enumerate(doc["frames"]):
        where = f"{path}: frames[{i}]"
        segments = []
        for j, s in enumerate(fr.get("segments", ())):
            try:
                segments.append(segment_from_json(s))
            except KeyError as err:
                raise CliError(f"{where}.segments[{j}]: missing field {err.args[0]!r}")
            except (ValueError, TypeError) as err:
                raise CliError(f"{where}.segments[{j}]: {err}")
        if "adjacency" not in fr:
            raise CliError(f"{where}: missing field 'adjacency'")
        try:
            graphs.append(LaneGraph(segments, np.asarray(fr["adjacency"], dtype=np.float64)))
        except ValueError as err:
            raise CliError(f"{where}: field 'adjacency': {err}")
    return graphs


def _sequence_files(path: str) -> list[str]:
    if os.path.isdir(path):
        files = sorted(
            os.path.join(path, n)
            for n in os.listdir(path)
            if n.startswith("seq_") and n.endswith(".json")
        )
        if not files:
            raise CliError(f"{path}: no seq_*.json files")
        return files
    if not os.path.exists(path):
        raise CliError(f"{path}: no such file or directory")
    return [path]


def load_graph_frames(path: str) -> list[LaneGraph]:
    """Per-frame lane graphs from a dump file or a directory of sequences."""
    graphs = []
    for p in _sequence_files(path):
        graphs.extend(_graphs_from_doc(_load_json(p), p))
    return graphs


def load_dataset(path: str) -> tuple[list[list[FrameSample]], BEVGridSpec, list[str]]:
    """Sequences with re-rendered BEV rasters, their grid, and source files."""
    files = _sequence_files(path)
    seqs = []
    grid = None
    for p in files:
        try:
            seqs.append(load_rendered_sequence(p))
            g = grid_from_meta(load_sequence_meta(p))
        except (KeyError, ValueError, TypeError) as err:
            raise CliError(f"{p}: {err}")
        if grid is not None and g != grid:
            raise CliError(f"{p}: grid differs from the first sequence's grid")
        grid = g
    return seqs, grid, files


# gen-data -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    seed = resolve_seed(args.seed)
    grid = BEVGridSpec(
        height_cells=args.height_cells,
        width_cells=args.width_cells,
        x_range=args.x_range,
        y_range=args.y_range,
        channels=args.channels,
    )
    os.makedirs(args.out, exist_ok=True)
    outputs, rows = [], []
    for i in range(args.num_sequences):
        template = TEMPLATES[i % len(TEMPLATES)] if args.template == "mixed" else args.template
        spec = ScenarioSpec(
            template=template,
            n_lanes=args.n_lanes,
            frames=args.frames,
            speed=args.speed,
            curvature=args.curvature,
            seed=seed + i,
            noise_sigma=args.noise_sigma,
            grid=grid,
        )
        # rasters are not stored; loaders re-render them from the meta
        frames = generate_sequence(spec, render=False)
        name = f"seq_{i:04d}.json"
        save_sequence(frames, os.path.join(args.out, name), meta=scenario_meta(spec))
        outputs.append(name)
        rows.append(
            {
                "file": name,
                "template": template,
                "seed": seed + i,
                "frames": len(frames),
                "segments": sum(len(f.gt) for f in frames),
            }
        )
    write_csv_atomic(rows, ["file", "template", "seed", "frames", "segments"], os.path.join(args.out, "index.csv"))
    outputs.append("index.csv")
    config = {
        "num_sequences": args.num_sequences,
        "frames": args.frames,
        "template": args.template,
        "speed": args.speed,
        "noise_sigma": args.noise_sigma,
        "n_lanes": args.n_lanes,
        "curvature": args.curvature,
        "grid": dataclasses.asdict(grid),
    }
    write_manifest(args.out, "gen-data", config, seed, [], outputs)
    total = sum(r["frames"] for r in rows)
    print(f"wrote {len(rows)} sequences ({total} frames) to {args.out}")
    return 0


# train ----------------------------------------------------------------------------


def _load_config_file(path: str | None) -> tuple[dict, dict]:
    if not path:
        return {}, {}
    doc = _load_json(path)
    if "train" in doc or "model" in doc:
        return doc.get("train", {}), doc.get("model", {})
    return doc, {}


def _build_train_config(args, train_section: dict) -> TrainConfig:
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    for key in train_section:
        if key not in fields:
            raise CliError(f"{args.config}: unknown train field {key!r}")
    merged = dict(train_section)
    for key in ("epochs", "lr", "batch_size", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    for flag in ("stream", "dbpe", "dn", "id_track"):
        if getattr(args, f"no_{flag}", False):
            merged[flag] = False
    if "alphas" in merged:
        merged["alphas"] = tuple(merged["alphas"])
    cfg = TrainConfig(**merged)
    return dataclasses.replace(cfg, seed=resolve_seed(cfg.seed))


def _build_model_config(args, model_section: dict, grid: BEVGridSpec) -> ModelConfig:
    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    for key in model_section:
        if key not in fields:
            raise CliError(f"{args.config}: unknown model field {key!r}")
    merged = dict(model_section)
    for key in ("layers", "channels", "queries", "stream_slots", "dn_total"):
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    merged["bev_channels"] = grid.channels
    try:
        return ModelConfig(**merged)
    except ValueError as err:
        raise CliError(f"model config: {err}")


def cmd_train(args) -> int:
    train_section, model_section = _load_config_file(args.config)
    train_seqs, grid, data_files = load_dataset(args.data)
    val_seqs = None
    val_files = []
    if args.val:
        val_seqs, val_grid, val_files = load_dataset(args.val)
        if val_grid != grid:
            raise CliError(f"{args.val}: grid differs from the training data's grid")
    cfg = _build_train_config(args, train_section)
    mc = _build_model_config(args, model_section, grid)
    os.makedirs(args.out, exist_ok=True)
    model = LaneSegmentModel(mc, grid, seed=cfg.seed)
    trainer = Trainer(model, cfg, out_dir=args.out)
    trainer.fit(train_seqs, val_seqs=val_seqs)
    resolved = {"train": cfg.to_dict(), "model": mc.to_dict(), "grid": dataclasses.asdict(grid)}
    write_json_atomic(resolved, os.path.join(args.out, "config.json"), indent=2)
    outputs = ["checkpoint.bin", "checkpoint.json", "config.json", "metrics.jsonl"]
    inputs = data_files + val_files + ([args.config] if args.config else [])
    write_manifest(args.out, "train", resolved, cfg.seed, inputs, outputs)
    last = trainer.history[-1]
    line = f"trained {cfg.epochs} epochs ({trainer.global_step} steps), final loss {last['train_loss']:.4f}"
    if "report" in last:
        line += f", val mAP {last['report']['map']:.4f}"
    print(line)
    return 0


# eval and metrics ----------------------------------------------------------------


def _parse_thresholds(text: str) -> tuple:
    try:
        vals = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise CliError(f"invalid threshold set {text!r}")
    if not vals:
        raise CliError(f"invalid threshold set {text!r}")
    return vals


def _distance_kinds(name: str) -> tuple:
    return ("frechet", "chamfer") if name == "both" else (name,)


def _report_rows(report: EvalReport) -> list[dict]:
    return [{"metric": k, "value": v} for k, v in report.to_dict().items()]


def _checkpoint_predictions(args) -> tuple[list, list, list, list[str]]:
    """Run a trained model over a dataset; returns predictions, GT, frames."""
    seqs, grid, data_files = load_dataset(args.data)
    config_path = args.config or os.path.join(os.path.dirname(args.checkpoint) or ".", "config.json")
    doc = _load_json(config_path)
    for key in ("model", "train"):
        if key not in doc:
            raise CliError(f"{config_path}: missing field {key!r}")
    mc = ModelConfig(**doc["model"])
    if mc.bev_channels != grid.channels:
        raise CliError(f"{args.data}: grid channels {grid.channels} do not match the checkpoint")
    model = LaneSegmentModel(mc, grid, seed=0)
    try:
        model.params.load(args.checkpoint)
    except (OSError, ValueError, KeyError) as err:
        raise CliError(f"{args.checkpoint}: {err}")
    stream = bool(doc["train"].get("stream", True))
    dynamic_pe = bool(doc["train"].get("dbpe", True))
    preds, gts, pred_frames = [], [], []
    with E.no_grad():
        for seq in seqs:
            bundle = None
            for frame in seq:
                result, bev, _ = stream_step(model, frame, bundle, dynamic_pe=dynamic_pe)
                graph = predictions_to_graph(result, args.min_confidence)
                preds.append(graph)
                gts.append(frame.gt)
                pred_frames.append(FrameSample(frame.timestamp, frame.pose, graph))
                if stream:
                    bundle = make_bundle(model, result, bev, None, frame.pose)
    inputs = data_files + [config_path, args.checkpoint + ".bin", args.checkpoint + ".json"]
    return preds, gts, pred_frames, inputs


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.pred):
        raise CliError("give either --checkpoint with --data, or --pred with --gt")
    outputs = []
    if args.checkpoint:
        if not args.data:
            raise CliError("--checkpoint needs --data")
        preds, gts, pred_frames, inputs = _checkpoint_predictions(args)
    else:
        if not args.gt:
            raise CliError("--pred needs --gt")
        preds = load_graph_frames(args.pred)
        gts = load_graph_frames(args.gt)
        pred_frames = None
        inputs = _sequence_files(args.pred) + _sequence_files(args.gt)
    if len(preds) != len(gts):
        raise CliError(f"{len(preds)} prediction frames vs {len(gts)} GT frames")
    thresholds = _parse_thresholds(args.threshold_set)
    kinds = _distance_kinds(args.distance)
    report = evaluate(preds, gts, thresholds=thresholds, kinds=kinds)
    os.makedirs(args.out, exist_ok=True)
    write_json_atomic(report.to_dict(), os.path.join(args.out, "report.json"), indent=2)
    write_csv_atomic(_report_rows(report), ["metric", "value"], os.path.join(args.out, "report.csv"))
    outputs += ["report.json", "report.csv"]
    if pred_frames is not None:
        write_json_atomic(
            sequence_to_json(pred_frames, {"source": "model"}),
            os.path.join(args.out, "predictions.json"),
        )
        outputs.append("predictions.json")
    if not args.no_figures:
        from .figures import save_lane_graph, save_pr_curves

        save_pr_curves(preds, gts, os.path.join(args.out, "pr.svg"), thresholds=thresholds, kind=kinds[0])
        save_lane_graph(
            preds[0],
            os.path.join(args.out, "lane_graph.svg"),
            gt=gts[0],
            title="frame 0: predictions over ground truth",
        )
        outputs += ["pr.svg", "lane_graph.svg"]
    config = {
        "threshold_set": list(thresholds),
        "distance": args.distance,
        "min_confidence": args.min_confidence,
        "mode": "checkpoint" if args.checkpoint else "files",
    }
    write_manifest(args.out, "eval", config, 0, inputs, outputs)
    d = report.to_dict()
    fmt = lambda v: "n/a" if v is None else f"{v:.4f}"
    print(
        f"evaluated {len(preds)} frames: mAP {fmt(d['map'])}, TOP_lsls "
        f"{fmt(d['top_lsls'])}, OLS {fmt(d['ols'])}, Acc_b {fmt(d['acc_b'])}"
    )
    return 0


def cmd_metrics(args) -> int:
    preds = load_graph_frames(args.pred)
    gts = load_graph_frames(args.gt)
    if len(preds) != len(gts):
        raise CliError(f"{len(preds)} prediction frames vs {len(gts)} GT frames")
    report = evaluate(
        preds, gts, thresholds=_parse_thresholds(args.threshold_set), kinds=_distance_kinds(args.distance)
    )
    if args.out:
        write_json_atomic(report.to_dict(), args.out, indent=2)
        csv_path = os.path.splitext(args.out)[0] + ".csv"
        write_csv_atomic(_report_rows(report), ["metric", "value"], csv_path)
        out_dir = os.path.dirname(args.out) or "."
        config = {"threshold_set": args.threshold_set, "distance": args.distance}
        inputs = _sequence_files(args.pred) + _sequence_files(args.gt)
        write_manifest(out_dir, "metrics", config, 0, inputs, [os.path.basename(args.out), os.path.basename(csv_path)])
        print(f"wrote {args.out}")
    else:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


# ablate --------------------------------------------------------------------------


def cmd_ablate(args) -> int:
    train_section, model_section = _load_config_file(args.config)
    train_seqs, grid, data_files = load_dataset(args.data)
    val_files = []
    if args.val:
        val_seqs, val_grid, val_files = load_dataset(args.val)
        if val_grid != grid:
            raise CliError(f"{args.val}: grid differs from the training data's grid")
    else:
        val_seqs = train_seqs
    base = _build_train_config(args, train_section)
    mc = _build_model_config(args, model_section, grid)
    try:
        seeds = tuple(int(s) for s in args.seeds.split(",") if s.strip())
    except ValueError:
        raise CliError(f"invalid seed list {args.seeds!r}")
    os.makedirs(args.out, exist_ok=True)
    table = ablate(mc, grid, train_seqs, val_seqs, base, seeds=seeds, out_dir=args.out)
    rows = [
        {k: r[k] for k in ("variant", "map", "acc_b", "top_lsls", "ols")} for r in table["rows"]
    ]
    write_csv_atomic(rows, ["variant", "map", "acc_b", "top_lsls", "ols"], os.path.join(args.out, "ablation.csv"))
    outputs = ["ablation.json", "ablation.txt", "ablation.csv"]
    if not args.no_figures:
        from .figures import save_ablation_bars

        save_ablation_bars(table["rows"], os.path.join(args.out, "ablation.svg"))
        outputs.append("ablation.svg")
    config = {
        "train": base.to_dict(),
        "model": mc.to_dict(),
        "seeds": list(seeds),
    }
    inputs = data_files + val_files + ([args.config] if args.config else [])
    write_manifest(args.out, "ablate", config, base.seed, inputs, outputs)
    print(format_ablation_table(table["rows"]), end="")
    return 0


# argument parsing ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lanestream",
        description="Streaming lane-segment perception: data generation, training, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"lanestream {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate synthetic lane-graph sequences")
    gen.add_argument("--out", required=True)
    gen.add_argument("--num-sequences", type=int, default=8)
    gen.add_argument("--frames", type=int, default=20)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--template", default="mixed", choices=("mixed",) + TEMPLATES)
    gen.add_argument("--speed", type=float, default=5.0)
    gen.add_argument("--noise-sigma", type=float, default=0.0)
    gen.add_argument("--n-lanes", type=int, default=3)
    gen.add_argument("--curvature", type=float, default=0.0)
    gen.add_argument("--height-cells", type=int, default=200)
    gen.add_argument("--width-cells", type=int, default=100)
    gen.add_argument("--x-range", type=float, default=50.0)
    gen.add_argument("--y-range", type=float, default=25.0)
    gen.add_argument("--channels", type=int, default=32)
    gen.set_defaults(func=cmd_gen_data)

    def train_like(p):
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--val")
        p.add_argument("--config", help="JSON with train/model sections or flat train fields")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--layers", type=int)
        p.add_argument("--channels", type=int)
        p.add_argument("--queries", type=int)
        p.add_argument("--stream-slots", type=int)
        p.add_argument("--dn-total", type=int)

    train = sub.add_parser("train", help="train a model on generated sequences")
    train_like(train)
    for flag in ("stream", "dbpe", "dn", "id-track"):
        train.add_argument(f"--no-{flag}", action="store_true")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score predictions against ground truth")
    ev.add_argument("--pred", help="prediction dump (file or directory)")
    ev.add_argument("--gt", help="ground-truth sequences (file or directory)")
    ev.add_argument("--checkpoint", help="checkpoint base path (without .bin/.json)")
    ev.add_argument("--data", help="dataset to run the checkpoint on")
    ev.add_argument("--config", help="model/train config (defaults to config.json beside the checkpoint)")
    ev.add_argument("--out", required=True)
    ev.add_argument("--threshold-set", default="1.0,2.0,3.0")
    ev.add_argument("--distance", default="both", choices=("frechet", "chamfer", "both"))
    ev.add_argument("--min-confidence", type=float, default=0.0)
    ev.add_argument("--no-figures", action="store_true")
    ev.set_defaults(func=cmd_eval)

    ab = sub.add_parser("ablate", help="train flag variants and tabulate medians")
    train_like(ab)
    ab.add_argument("--seeds", default="0,1,2")
    ab.add_argument("--no-figures", action="store_true")
    ab.set_defaults(func=cmd_ablate)

    met = sub.add_parser("metrics", help="standalone metric computation on dumps")
    met.add_argument("--pred", required=True)
    met.add_argument("--gt", required=True)
    met.add_argument("--out", help="report JSON path (stdout when omitted)")
    met.add_argument("--threshold-set", default="1.0,2.0,3.0")
    met.add_argument("--distance", default="both", choices=("frechet", "chamfer", "both"))
    met.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
