"""Command line interface: ``hlnet generate | train | eval | infer``.

Outputs live under ``--out`` with fixed names:

* generate: ``dataset.train``, ``dataset.val``, ``dataset.test``, ``dataset.json``
* train: ``checkpoint.bin``, ``config.json``, ``train.log``
* eval: ``metrics.json``, ``metrics.csv``
* infer: ``scene_graph.json`` (and ``scene_graph.txt`` with ``--text``)

Log lines that carry wall-clock time start with ``#`` so the remaining
lines are identical across re-runs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_model_state, load_records, save_model
from .evaluation import evaluate, rank_triplets
from .exceptions import HlnError, NonFiniteError
from .hypergraph import SceneGraph
from .model import HlnModel, predict_scores
from .scenes import (
    DatasetConfig,
    detector_rng,
    loads_scene,
    predicate_statistics,
    read_dataset,
    simulate_detector,
    write_split_files,
)
from .training import SGD, STEP_KEY, RunConfig, build_model, train

CHECKPOINT = "checkpoint.bin"
RUN_CONFIG = "config.json"
DATA_CONFIG = "dataset.json"
TRAIN_LOG = "train.log"


class CliError(HlnError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _load_data_config(data_dir: Path) -> DatasetConfig:
    path = data_dir / DATA_CONFIG
    if not path.exists():
        raise CliError(f"{path} not found; run `hlnet generate` first")
    return DatasetConfig.from_dict(json.loads(path.read_text()))


def _split(data_dir: Path, name: str) -> list[SceneGraph]:
    path = data_dir / f"dataset.{name}"
    if not path.exists():
        raise CliError(f"{path} not found")
    return read_dataset(path)


def _detections(scenes, data: DatasetConfig, mode: str):
    exact = mode == "precls"
    return [simulate_detector(s, detector_rng(data, s), data, exact=exact) for s in scenes]


def _scores(model, scenes, data, mode):
    precls = mode == "precls"
    return predict_scores(model, _detections(scenes, data, mode), scenes if precls else None, use_gt_labels=precls)


def _load_model(ckpt: Path, run: RunConfig, data: DatasetConfig) -> tuple[HlnModel, dict]:
    if not ckpt.exists():
        raise CliError(f"checkpoint {ckpt} not found")
    records = load_records(ckpt)
    model = HlnModel(run.model_config(), data.n_categories, data.n_predicates, data.d_v, seed=run.seed)
    load_model_state(model, records)
    return model, records


def _run_config_for(args, ckpt: Path | None = None) -> RunConfig:
    """--config wins, else config.json beside the checkpoint, else defaults."""
    if args.config:
        run = RunConfig.load(args.config)
    elif ckpt is not None and (ckpt.parent / RUN_CONFIG).exists():
        run = RunConfig.load(ckpt.parent / RUN_CONFIG)
    else:
        run = RunConfig()
    if args.preset:
        run.preset = args.preset
    if args.seed is not None:
        run.seed = args.seed
    return run


def _data_dir(args, run: RunConfig) -> Path:
    d = getattr(args, "data", None) or run.data_dir
    if not d:
        raise CliError("no dataset directory: pass --data or set data_dir in the config")
    return Path(d)


def _validation_line(model, scenes, data, mode, step) -> str:
    if not scenes:
        return ""
    rep = evaluate(_scores(model, scenes, data, mode), scenes, data.predicates, mode)
    w = rep.with_constraint
    return f"val step={step} R@50={w['R@50']!r} R@100={w['R@100']!r} mR@50={w['mR@50']!r} mR@100={w['mR@100']!r}"


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    data = DatasetConfig.from_dict(json.loads(Path(args.config).read_text())) if args.config else DatasetConfig()
    if args.seed is not None:
        data.seed = args.seed
    if args.n_scenes is not None:
        data.n_scenes = args.n_scenes
    data.validate()
    out = Path(args.out)
    if (out / "dataset.train").exists() and not args.force:
        raise CliError(f"{out} already holds a dataset; pass --force to overwrite")
    paths = write_split_files(out, data)
    train_scenes = read_dataset(paths["train"])
    stats = predicate_statistics(train_scenes, data)
    total = sum(stats.values())
    print(f"scenes={data.n_scenes} train={len(train_scenes)} train_triplets={total}")
    for name, count in stats.items():
        print(f"predicate={name} count={count} frac={count / max(total, 1):.4f}")
    return 0


def cmd_train(args) -> int:
    out = Path(args.out)
    ckpt = out / CHECKPOINT
    run = _run_config_for(args, ckpt if args.resume else None)
    if args.data:
        run.data_dir = str(Path(args.data))
    if args.steps is not None:
        run.total_steps = args.steps
        run.warmup_steps = min(run.warmup_steps, args.steps)
        run.milestones = tuple(m for m in run.milestones if m < args.steps)
    run.out_dir = str(out)
    run.validate()
    data_dir = _data_dir(args, run)
    data = _load_data_config(data_dir)
    if ckpt.exists() and not (args.force or args.resume):
        raise CliError(f"{ckpt} exists; pass --resume to continue or --force to restart")
    train_scenes = _split(data_dir, "train")
    val_scenes = _split(data_dir, "val") if run.eval_every else []
    out.mkdir(parents=True, exist_ok=True)

    model = build_model(run, data, train_scenes)
    opt = SGD(model.parameters(), run.momentum, run.weight_decay)
    start = 0
    if args.resume and ckpt.exists():
        records = load_records(ckpt)
        load_model_state(model, records)
        opt.load_state(records)
        start = int(records[STEP_KEY]) if STEP_KEY in records else 0
    run.dump(out / RUN_CONFIG)

    log_mode = "a" if start else "w"
    with open(out / TRAIN_LOG, log_mode, encoding="utf-8") as log_fh:

        def log(line: str) -> None:
            log_fh.write(line + "\n")
            log_fh.flush()
            if not args.quiet:
                print(line)

        def checkpoint(step: int) -> None:
            extra = dict(opt.state())
            extra[STEP_KEY] = np.array(float(step))
            save_model(ckpt, model, extra)

        def validate(step: int) -> str:
            checkpoint(step)
            return _validation_line(model, val_scenes, data, run.mode, step)

        stop = run.total_steps if args.until is None else min(args.until, run.total_steps)
        log(f"# started {time.strftime('%Y-%m-%dT%H:%M:%S')} preset={run.preset} start_step={start}")
        try:
            train(model, train_scenes, data, run, start_step=start, stop_step=stop, optimizer=opt,
                  log=log, validate=validate)
        except NonFiniteError as exc:
            log(f"abort step={exc.step} tensor={exc.tensor_name} reason={exc}")
            raise
        checkpoint(max(stop, start))
        log(f"# finished {time.strftime('%Y-%m-%dT%H:%M:%S')}")
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    run = _run_config_for(args, ckpt)
    data_dir = _data_dir(args, run)
    data = _load_data_config(data_dir)
    model, _ = _load_model(ckpt, run, data)
    scenes = _split(data_dir, args.split)
    train_path = data_dir / "dataset.train"
    counts = None
    if train_path.exists():
        counts = list(predicate_statistics(read_dataset(train_path), data).values())
    report = evaluate(_scores(model, scenes, data, run.mode), scenes, data.predicates, run.mode, counts)
    out = Path(args.out) if args.out else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(report.to_json())
    (out / "metrics.csv").write_text(report.to_csv())
    for section in ("with_constraint", "without_constraint"):
        vals = getattr(report, section)
        print(section + " " + " ".join(f"{k}={v:.4f}" for k, v in vals.items()))
    return 0


def _read_scene(path: Path) -> SceneGraph:
    lines = [(k, ln) for k, ln in enumerate(path.read_text(encoding="utf-8").splitlines(), 1) if ln.strip()]
    if len(lines) != 1:
        text = path.read_text(encoding="utf-8")
        if text.strip().startswith("{") and len(lines) > 1:
            return loads_scene(" ".join(ln for _, ln in lines), 1)
        raise CliError(f"{path}: expected exactly one scene record, found {len(lines)}")
    k, line = lines[0]
    return loads_scene(line, k)


def scene_graph_record(scene: SceneGraph, scores, data: DatasetConfig, top_k: int) -> dict:
    ranked = rank_triplets(scores, constraint=True, limit=top_k)
    cats = ("background",) + tuple(data.categories)
    return {
        "scene": scene.image.scene_id,
        "objects": [
            {"index": i, "category": cats[int(c)], "box": [float(v) for v in b]}
            for i, (c, b) in enumerate(zip(scores.labels, scores.boxes))
        ],
        "triplets": [
            {
                "rank": r + 1,
                "subject": t.subject,
                "predicate": data.predicates[t.predicate],
                "object": t.object,
                "score": t.score,
                "subject_category": cats[t.subject_category],
                "object_category": cats[t.object_category],
            }
            for r, t in enumerate(ranked)
        ],
    }


def edge_list(record: dict) -> str:
    lines = []
    for t in record["triplets"]:
        lines.append(
            f"{t['subject_category']}#{t['subject']} --{t['predicate']}--> "
            f"{t['object_category']}#{t['object']}  {t['score']:.4f}"
        )
    return "\n".join(lines) + ("\n" if lines else "")


def cmd_infer(args) -> int:
    ckpt = Path(args.checkpoint)
    run = _run_config_for(args, ckpt)
    data = _load_data_config(_data_dir(args, run))
    model, _ = _load_model(ckpt, run, data)
    scene = _read_scene(Path(args.scene))
    scores = _scores(model, [scene], data, run.mode)[0]
    record = scene_graph_record(scene, scores, data, args.top_k)
    out = Path(args.out) if args.out else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "scene_graph.json").write_text(json.dumps(record, indent=2) + "\n")
    text = edge_list(record)
    if args.text:
        (out / "scene_graph.txt").write_text(text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON config (dataset keys for generate, run keys otherwise)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--preset", choices=["hln", "hln-or", "hln-o", "hln-b"], default=None)

    p = argparse.ArgumentParser(prog="hlnet", description="Scene graph generation with hyper-relationship attention.")
    p.add_argument("--version", action="version", version=f"hlnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    g.add_argument("--n-scenes", type=int, default=None)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", help="dataset directory")
    t.add_argument("--steps", type=int, default=None, help="override total steps")
    t.add_argument("--resume", action="store_true", help="continue from checkpoint.bin in --out")
    t.add_argument("--until", type=int, default=None, help="stop after this many steps (schedule unchanged)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="dataset directory (default: data_dir from the run config)")
    e.add_argument("--split", default="test", choices=["train", "val", "test"])
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", parents=[common], help="export the scene graph of one scene")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--scene", required=True, help="file holding one scene record")
    i.add_argument("--data", help="dataset directory (for vocabularies and detector settings)")
    i.add_argument("--top-k", type=int, default=6)
    i.add_argument("--text", action="store_true", help="also write scene_graph.txt")
    i.set_defaults(func=cmd_infer)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ("generate", "train") and not args.out:
        parser.error(f"{args.command} requires --out")
    if getattr(args, "top_k", 1) < 1:
        parser.error("--top-k must be >= 1")
    try:
        return args.func(args)
    except (HlnError, ValueError, OSError) as exc:
        print(f"hlnet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
