"""Command-line entry point: ``soundobj <command> [options]``.

Every command writes its outputs plus a ``manifest.json`` into one output
directory (``--out``, else ``$SOUNDOBJ_OUTPUT_DIR/<command>``, else
``./soundobj-runs/<command>``). A failed run still writes its manifest,
with ``status`` set to ``failed`` and the error message, so partial outputs
are marked.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .encoders import CheckpointError, EncoderParams, encode_audio, encode_visual, load_checkpoint
from .evaluation import (
    agglomerative_cluster,
    auc_pr,
    auc_roc,
    detect_sounding_object,
    discovery_scores,
    embed_samples,
    eval_frame,
    similarity_map,
    top1_accuracy,
    write_pgm,
    write_records,
)
from .gradcheck import LOSSES, run_gradcheck
from .synthworld import DatasetFormatError, WorldSpec, generate_dataset, generate_world, read_dataset, write_dataset
from .trainer import STAGES, TrainConfig, TrainingArrays, TrainingError, coerce_value, load_flat_config, run_pipeline

OUTPUT_ENV = "SOUNDOBJ_OUTPUT_DIR"
SPLIT_SIZES = {"train_size": 500, "finetune_size": 200, "eval_size": 200}
SPLIT_FILES = {"train": "train.sod", "finetune": "finetune.sod", "eval": "eval.sod"}


class CommandError(RuntimeError):
    pass


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: list[str] = field(default_factory=list)
    version: str = __version__
    wall_time: float = 0.0
    status: str = "running"
    error: str | None = None

    def write(self, out_dir: Path):
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")


# -- helpers -------------------------------------------------------------------

def _output_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ENV) or "soundobj-runs"
    return Path(root) / args.command


def world_from_flat(values: dict) -> tuple[WorldSpec, dict[str, int]]:
    """Split a flat spec file into a WorldSpec and the three split sizes."""
    defaults = WorldSpec()
    world, sizes = {}, dict(SPLIT_SIZES)
    for key, raw in values.items():
        if key in sizes:
            sizes[key] = int(raw)
            if sizes[key] < 0:
                raise ValueError(f"{key} must be >= 0")
        elif key in WorldSpec.__dataclass_fields__:
            default = getattr(defaults, key)
            if isinstance(default, tuple):
                world[key] = tuple(int(v) for v in str(raw).split(","))
            else:
                world[key] = coerce_value(raw, default)
        else:
            raise ValueError(f"unknown spec key {key!r}")
    return WorldSpec(**world), sizes


def _load_data(path) -> tuple[list, WorldSpec]:
    samples, header = read_dataset(path)
    if not header.get("world"):
        raise DatasetFormatError(f"{path}: dataset header carries no world spec")
    return samples, WorldSpec.from_dict(header["world"])


def _check_compatible(params: EncoderParams, spec: WorldSpec):
    want = {"vision": spec.input_dim, "audio": spec.audio_dim, "language": spec.narration_dim}
    for modality, dim in want.items():
        if modality not in params.encoders:
            raise CheckpointError(f"checkpoint has no {modality} encoder")
        if params[modality].in_dim != dim:
            raise CheckpointError(
                f"checkpoint {modality} encoder expects {params[modality].in_dim}-d input, dataset has {dim}-d"
            )


# -- commands ------------------------------------------------------------------

def cmd_gen_data(args, out: Path, manifest: RunManifest):
    values = load_flat_config(args.spec) if args.spec else {}
    spec, sizes = world_from_flat(values)
    manifest.config = {"world": spec.to_dict(), **sizes}
    manifest.seeds = {"root": args.seed}
    manifest.inputs = {"spec": args.spec}
    banks = generate_world(spec, args.seed)
    for split, fname in SPLIT_FILES.items():
        n = sizes[f"{split}_size"]
        samples = generate_dataset(spec, n, args.seed, split, banks)
        path = out / fname
        write_dataset(path, samples, spec, {"split": split, "seed": args.seed, "count": n})
        manifest.outputs.append(str(path))
        print(f"{split}: {n} samples -> {path}")


def _train_config(args) -> TrainConfig:
    values: dict = dict(load_flat_config(args.config)) if args.config else {}
    for f in dataclasses.fields(TrainConfig):
        flag = getattr(args, f"cfg_{f.name}")
        if flag is not None:
            values[f.name] = flag
    return TrainConfig.from_mapping(values)


def cmd_train(args, out: Path, manifest: RunManifest):
    config = _train_config(args)
    stages = list(STAGES) if args.stage == "all" else [args.stage]
    if args.stage not in ("all", "align") and not args.init_from:
        raise CommandError(f"--stage {args.stage} needs --from <checkpoint of the previous stage>")
    if args.stage == "all" and args.init_from:
        raise CommandError("--from only applies to a single --stage")
    data_dir = Path(args.data) if args.data else None
    pre_path = args.pretrain or (data_dir / SPLIT_FILES["train"] if data_dir else None)
    fine_path = args.finetune or (data_dir / SPLIT_FILES["finetune"] if data_dir else None)
    need_pre = any(s != "finetune" for s in stages)
    need_fine = "finetune" in stages
    if (need_pre and pre_path is None) or (need_fine and fine_path is None):
        raise CommandError("give --data DIR or explicit --pretrain/--finetune dataset paths")

    manifest.config = config.to_dict()
    manifest.seeds = {"root": config.seed}
    manifest.inputs = {"pretrain": str(pre_path) if need_pre else None,
                       "finetune": str(fine_path) if need_fine else None,
                       "from": args.init_from}

    pretrain = finetune = None
    spec = None
    if need_pre:
        samples, spec = _load_data(pre_path)
        pretrain = TrainingArrays.from_samples(samples, spec.patch_size, config.use_masks)
    if need_fine:
        samples, fspec = _load_data(fine_path)
        spec = spec or fspec
        finetune = TrainingArrays.from_samples(samples, fspec.patch_size, config.use_masks)

    params = None
    if args.init_from:
        params, meta = load_checkpoint(args.init_from)
        _check_compatible(params, spec)
        manifest.inputs["from_stage"] = meta["stage"]
    result, report = run_pipeline(pretrain, finetune, config, out, params, stages)
    for rec in report.records:
        print(f"{rec.stage} epoch {rec.epoch}: loss {rec.mean_loss:.5f}")
    manifest.outputs += [str(out / f"{s}.ckpt") for s in result] + [str(out / "metrics.jsonl")]


def _eval_inputs(args, manifest: RunManifest):
    params, meta = load_checkpoint(args.checkpoint)
    samples, spec = _load_data(args.data)
    _check_compatible(params, spec)
    manifest.inputs = {"checkpoint": args.checkpoint, "checkpoint_stage": meta["stage"], "data": args.data}
    return params, samples, spec


def cmd_eval_objects(args, out: Path, manifest: RunManifest):
    params, samples, spec = _eval_inputs(args, manifest)
    manifest.config = {"maps": args.maps}
    records, results = [], []
    for idx, s in enumerate(samples):
        if not s.sounding:
            continue
        t = eval_frame(s)
        smap = similarity_map(encode_visual(s.patches[t], params), encode_audio(s.audio, params),
                              spec.height, spec.width, spec.patch_size, frames=[t])
        res = detect_sounding_object(smap, s.pool)
        results.append(res)
        records.append({"index": idx, "scores": res.scores, "predicted": res.predicted,
                        "positives": list(s.pool.positive_indices), "hit": res.hit})
        if len(results) <= args.maps:
            path = out / f"map_{idx:05d}.pgm"
            write_pgm(path, smap.pixels[0])
            manifest.outputs.append(str(path))
    if not results:
        raise CommandError("dataset has no sounding samples to evaluate")
    acc = top1_accuracy(results)
    records.append({"summary": {"accuracy": acc, "evaluated": len(results), "hits": sum(r.hit for r in results)}})
    path = out / "objects.jsonl"
    write_records(path, records)
    manifest.outputs.append(str(path))
    print(f"top-1 accuracy {acc:.4f} over {len(results)} sounding samples")


def cmd_eval_actions(args, out: Path, manifest: RunManifest):
    params, samples, spec = _eval_inputs(args, manifest)
    manifest.config = {"theta": args.theta, "use_masks": not args.no_masks}
    v, a, l = embed_samples(params, samples, spec.patch_size, args.theta, not args.no_masks)
    scores = discovery_scores(v, a, l)
    labels = np.array([s.sounding for s in samples])
    records = [{"index": i, "av": float(scores["AV"][i]), "al": float(scores["AL"][i]), "sounding": bool(labels[i])}
               for i in range(len(samples))]
    summary = {"samples": len(samples), "positive_rate": float(labels.mean()) if len(labels) else 0.0}
    for pair, sc in scores.items():
        summary[pair] = {"roc": auc_roc(sc, labels).area, "pr": auc_pr(sc, labels).area}
        print(f"{pair}: AUC-ROC {summary[pair]['roc']:.4f}  AUC-PR {summary[pair]['pr']:.4f}")
    records.append({"summary": summary})
    path = out / "actions.jsonl"
    write_records(path, records)
    manifest.outputs.append(str(path))


def cmd_cluster(args, out: Path, manifest: RunManifest):
    params, samples, spec = _eval_inputs(args, manifest)
    manifest.config = {"k": args.k, "modality": args.modality}
    v, a, l = embed_samples(params, samples, spec.patch_size)
    emb = {"vision": v, "audio": a, "language": l}[args.modality]
    clusters = agglomerative_cluster(emb, args.k)
    actions = np.array([s.action for s in samples])
    # purity: share of samples whose cluster's majority action matches their own
    purity = sum(np.bincount(actions[clusters.labels == c]).max() for c in np.unique(clusters.labels)) / len(samples)
    records = [{"index": i, "cluster": int(c), "action": int(actions[i])} for i, c in enumerate(clusters.labels)]
    records.append({"summary": {"k": args.k, "modality": args.modality, "action_purity": float(purity)}})
    path = out / "clusters.jsonl"
    write_records(path, records)
    manifest.outputs.append(str(path))
    print(f"{args.k} clusters over {len(samples)} {args.modality} embeddings, action purity {purity:.4f}")


def cmd_gradcheck(args, out: Path, manifest: RunManifest):
    manifest.config = {"batches": args.batches, "size": args.size, "dim": args.dim, "h": args.h, "tol": args.tol}
    manifest.seeds = {"root": args.seed}
    reports = run_gradcheck(args.seed, args.batches, args.size, args.dim, args.h)
    records = [{"loss": name, **dataclasses.asdict(reports[name])} for name in LOSSES]
    worst = max(r.max_rel_error for r in reports.values())
    records.append({"summary": {"max_rel_error": worst, "tol": args.tol, "pass": worst <= args.tol}})
    path = out / "gradcheck.jsonl"
    write_records(path, records)
    manifest.outputs.append(str(path))
    for name in LOSSES:
        print(f"{name:10s} max rel error {reports[name].max_rel_error:.3e}")
    print(f"worst {worst:.3e} (tolerance {args.tol:g})")
    if worst > args.tol:
        raise CommandError(f"gradient check failed: {worst:.3e} > {args.tol:g}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval-objects": cmd_eval_objects,
    "eval-actions": cmd_eval_actions,
    "cluster": cmd_cluster,
    "gradcheck": cmd_gradcheck,
}


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help=f"output directory (default: ${OUTPUT_ENV}/<command> or ./soundobj-runs/<command>)")
    common.add_argument("--threads", type=int, default=None,
                        help="cap on numerical library threads (default: machine parallelism)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(prog="soundobj", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate train/finetune/eval synthetic datasets")
    p.add_argument("--spec", help="flat 'key = value' world spec; also train_size, finetune_size, eval_size "
                                  f"(defaults {SPLIT_SIZES['train_size']}/{SPLIT_SIZES['finetune_size']}/"
                                  f"{SPLIT_SIZES['eval_size']})")
    p.add_argument("--seed", type=int, default=0, help="root seed (default: 0)")

    p = sub.add_parser("train", parents=[common], help="run training stages and write checkpoints")
    p.add_argument("--config", help="flat 'key = value' training config; flags below override it")
    p.add_argument("--data", help="directory holding train.sod and finetune.sod")
    p.add_argument("--pretrain", help="dataset for the align and refine stages")
    p.add_argument("--finetune", help="dataset for the finetune stage")
    p.add_argument("--stage", choices=("all",) + STAGES, default="all", help="stage to run (default: all)")
    p.add_argument("--from", dest="init_from", help="checkpoint to start a single stage from")
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f"cfg_{f.name}", metavar=f.name.upper(), default=None,
                       help=f"(default: {f.default})")

    for name, helptext in (("eval-objects", "sounding object detection accuracy"),
                           ("eval-actions", "sounding action discovery AUCs"),
                           ("cluster", "average-linkage clustering of embeddings")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="dataset file")
        if name == "eval-objects":
            p.add_argument("--maps", type=int, default=0, help="dump this many similarity maps as PGM (default: 0)")
        if name == "eval-actions":
            p.add_argument("--theta", type=float, default=0.5, help="objectness threshold (default: 0.5)")
            p.add_argument("--no-masks", action="store_true", help="pool all patches instead of the object region")
        if name == "cluster":
            p.add_argument("--k", type=int, default=20, help="number of clusters (default: 20)")
            p.add_argument("--modality", choices=("audio", "vision", "language"), default="audio",
                           help="embeddings to cluster (default: audio)")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss")
    p.add_argument("--seed", type=int, default=0, help="root seed (default: 0)")
    p.add_argument("--batches", type=int, default=10, help="random batches (default: 10)")
    p.add_argument("--size", type=int, default=4, help="batch size (default: 4)")
    p.add_argument("--dim", type=int, default=16, help="embedding dimension (default: 16)")
    p.add_argument("--h", type=float, default=1e-5, help="difference step (default: 1e-5)")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error (default: 1e-4)")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    if args.verbose:
        import logging

        logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")
    out = _output_dir(args)
    manifest = RunManifest(args.command, argv)
    start = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"soundobj: error: cannot create output directory {out}: {exc}", file=sys.stderr)
        return 2
    status = 0
    try:
        if args.threads is not None:
            if args.threads < 1:
                raise CommandError("--threads must be >= 1")
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=args.threads):
                COMMANDS[args.command](args, out, manifest)
        else:
            COMMANDS[args.command](args, out, manifest)
        manifest.status = "ok"
    except (CommandError, ValueError, OSError, TrainingError) as exc:
        # DatasetFormatError and CheckpointError are ValueErrors
        manifest.status = "failed"
        manifest.error = f"{type(exc).__name__}: {exc}"
        print(f"soundobj: error: {exc}", file=sys.stderr)
        status = 1
    manifest.wall_time = time.perf_counter() - start
    try:
        manifest.write(out)
    except OSError as exc:
        print(f"soundobj: error: cannot write manifest: {exc}", file=sys.stderr)
        status = status or 2
    return status


if __name__ == "__main__":
    sys.exit(main())
