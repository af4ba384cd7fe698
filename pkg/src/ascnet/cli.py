"""Command-line entry point: ``ascnet {gen-data,pretrain,eval,ablate} CONFIG``.

Exit codes: 0 success, 1 runtime or I/O failure, 2 invalid config or usage.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, load_config
from .errors import AscnetError, ConfigError
from .evaluate import (appearance_probe, clip_features, collapse_metrics, eval_clips, extract_video_features,
                       finetune, speed_probe, split_query_gallery, topk_retrieval)
from .model import init_params
from .pretrain import load_model, train
from .synthcorpus import MANIFEST, SPEEDS, build_manifest, clips_to_batch, load_corpus, write_corpus

log = logging.getLogger("ascnet")

TASKS = ("retrieval", "probe", "finetune", "speed", "collapse")
AXES = ("instance_mode", "speed_set", "augmentation")


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def ensure_corpus(cfg: RunConfig):
    """Load the corpus under ``out_dir/corpus``, writing it first if absent."""
    root = cfg.corpus_dir
    manifest = root / MANIFEST
    if not manifest.exists():
        write_corpus(cfg.corpus, root)
    elif json.loads(manifest.read_text()) != build_manifest(cfg.corpus):
        raise ConfigError(f"corpus at {root} was generated with a different [corpus] config or seed")
    return load_corpus(root)


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    path = write_corpus(cfg.corpus, cfg.corpus_dir)
    cfg.write_resolved()
    print(f"wrote {cfg.corpus.n_videos} videos, manifest {path}")
    return 0


def cmd_pretrain(cfg: RunConfig, args) -> int:
    corpus = ensure_corpus(cfg)
    cfg.write_resolved()
    trainer = train(corpus, cfg.train, cfg.model, cfg.augment, out_dir=cfg.out_dir, resume=args.resume)
    if trainer.records:
        last = trainer.records[-1]
        print(f"step {trainer.step}: total {last.total:.4f} l_a {last.l_a:.4f} feat_std {last.feat_std:.4f}")
    print(f"metrics {Path(cfg.out_dir) / 'metrics.jsonl'}")
    return 0


def evaluate_task(task: str, params, corpus, cfg: RunConfig) -> dict:
    ev, seed = cfg.eval, cfg.seed
    n_classes = cfg.corpus.n_classes
    probe_kw = {"epochs": ev.probe_epochs, "base_lr": ev.probe_lr}
    if task == "retrieval":
        feats = extract_video_features(corpus, params, ev.space, ev.n_clips)
        queries, gallery = split_query_gallery(feats, seed, ev.query_frac)
        report = topk_retrieval(queries, gallery, ev.ks)
        print(report.table(), end="")
        return {**report.to_dict(), "space": ev.space,
                "degenerate_videos": sum(f.degenerate for f in feats)}
    if task == "probe":
        res = appearance_probe(params, corpus, n_classes, seed, space=ev.space, **probe_kw)
        print(f"appearance probe accuracy {res.accuracy:.4f}")
        return {**res.to_dict(), "space": ev.space}
    if task == "finetune":
        acc = finetune(corpus, params, n_classes, ev.finetune_epochs, ev.finetune_lr,
                       cfg.train.batch_size, seed)
        print(f"finetune accuracy {acc:.4f}")
        return {"accuracy": acc, "epochs": ev.finetune_epochs}
    if task == "speed":
        speeds = cfg.train.speed_classes if len(cfg.train.speed_classes) > 1 else SPEEDS
        res = speed_probe(params, corpus, speeds, seed, ev.clips_per_speed, **probe_kw)
        print(f"speed probe accuracy {res.accuracy:.4f} over speeds {list(speeds)}")
        return {**res.to_dict(), "speeds": list(speeds)}
    if task == "collapse":
        frames, h, w = params.config.clip_shape
        clips = [c for v in corpus for c in eval_clips(v, frames, (h, w), 1)]
        out = {}
        for space in ("encoder", "appearance", "speed"):
            out[space] = collapse_metrics(clip_features(params, clips_to_batch(clips), space)).to_dict()
        print("per-dim std  " + "  ".join(f"{s} {m['mean_std']:.5f}" for s, m in out.items()))
        return out
    raise ConfigError(f"unknown task {task!r}; choose from {', '.join(TASKS)}")


def cmd_eval(cfg: RunConfig, args) -> int:
    corpus = ensure_corpus(cfg)
    if args.ckpt:
        params, meta = load_model(args.ckpt)
        source = {"checkpoint": str(args.ckpt), "step": meta.get("step")}
    else:
        params = init_params(cfg.model, cfg.train.seed)
        source = {"checkpoint": None, "step": 0}
    report = {"task": args.task, **source, "result": evaluate_task(args.task, params, corpus, cfg)}
    path = Path(cfg.out_dir) / f"eval_{args.task}.json"
    _dump(path, report)
    print(f"report {path}")
    return 0


def ablation_rows(cfg: RunConfig, axis: str) -> list[tuple[str, RunConfig]]:
    """(label, config) per configuration on ``axis``; all share corpus and seed."""
    rows = []

    def variant(label, **train_kw):
        c = copy.deepcopy(cfg)
        for k, v in train_kw.items():
            setattr(c.train, k, v)
        return label, c

    if axis == "instance_mode":
        rows = [variant(f"ACP+SCP {m} instance", instance_mode=m, scp_mode="scp")
                for m in ("same", "different", "similar")]
    elif axis == "speed_set":
        for pair in ((1, 2), (1, 1), (1, 4), (4, 8)):
            rows.append(variant(f"speeds {{x{pair[0]}, x{pair[1]}}}", speed_set=pair, fixed_speed_pair=True))
    elif axis == "augmentation":
        steps = [("color jittering", "jitter"), ("+ gaussian blurring", "blur"),
                 ("+ random grayscale", "grayscale"), ("+ solarization", "solarize")]
        enabled: list[str] = []
        for label, flag in steps:
            enabled.append(flag)
            c = copy.deepcopy(cfg)
            for f in ("jitter", "blur", "grayscale", "solarize"):
                setattr(c.augment, f, f in enabled)
            rows.append((label, c))
    else:
        raise ConfigError(f"unknown axis {axis!r}; choose from {', '.join(AXES)}")
    for _, c in rows:
        c.train.validate()
        if c.train.scp_mode == "sp":
            c.model.n_speeds = len(c.train.speed_classes)
    return rows


def cmd_ablate(cfg: RunConfig, args) -> int:
    rows = ablation_rows(cfg, args.axis)
    corpus = ensure_corpus(cfg)
    root = Path(cfg.out_dir) / f"ablate_{args.axis}"
    probe_speeds = SPEEDS if args.axis == "speed_set" or len(cfg.train.speed_classes) < 2 \
        else cfg.train.speed_classes
    table = []
    for i, (label, c) in enumerate(rows):
        run_dir = root / f"{i:02d}"
        c.write_resolved(run_dir)
        log.info("ablation %s: %s", args.axis, label)
        trainer = train(corpus, c.train, c.model, c.augment, out_dir=run_dir)
        feats = extract_video_features(corpus, trainer.params, c.eval.space, c.eval.n_clips)
        queries, gallery = split_query_gallery(feats, c.seed, c.eval.query_frac)
        topk = topk_retrieval(queries, gallery, c.eval.ks).topk
        tail = trainer.records[-100:]
        row = {
            "config": label,
            "top1": topk[min(topk)],
            "top5": topk.get(5),
            "appearance_probe": appearance_probe(trainer.params, corpus, c.corpus.n_classes, c.seed,
                                                 space=c.eval.space, epochs=c.eval.probe_epochs,
                                                 base_lr=c.eval.probe_lr).accuracy,
            "speed_probe": speed_probe(trainer.params, corpus, probe_speeds, c.seed, c.eval.clips_per_speed,
                                       epochs=c.eval.probe_epochs, base_lr=c.eval.probe_lr).accuracy,
            "final_loss": float(np.mean([r.total for r in tail])) if tail else None,
            "final_feat_std": tail[-1].feat_std if tail else None,
            "run_dir": str(run_dir),
        }
        table.append(row)
        print(f"{label:28s} top1 {row['top1']:.3f}  probe {row['appearance_probe']:.3f}  "
              f"speed {row['speed_probe']:.3f}", flush=True)
    ordering = [r["config"] for r in sorted(table, key=lambda r: (-r["top1"], -r["appearance_probe"]))]
    report = {
        "axis": args.axis,
        "steps": rows[0][1].train.max_steps,
        "seed": cfg.seed,
        "speed_probe_speeds": list(probe_speeds),
        "columns": ["config", "top1", "top5", "appearance_probe", "speed_probe", "final_loss", "final_feat_std"],
        "rows": table,
        "ordering_by_top1": ordering,
    }
    path = Path(cfg.out_dir) / f"ablate_{args.axis}.json"
    _dump(path, report)
    print("ordering (diagnostic): " + " > ".join(ordering))
    print(f"report {path}")
    return 0


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ascnet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def command(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("config", help="TOML run config")
        p.add_argument("--out", default=None, help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, default=None, help="seed (overrides the config)")
        p.set_defaults(fn=fn)
        return p

    command("gen-data", cmd_gen_data, "write the synthetic corpus")
    command("pretrain", cmd_pretrain, "run pretraining").add_argument("--resume", default=None,
                                                                     help="checkpoint to resume from")
    p = command("eval", cmd_eval, "evaluate a checkpoint")
    p.add_argument("--ckpt", default=None, help="checkpoint (default: untrained encoder)")
    p.add_argument("--task", required=True, help=f"one of {', '.join(TASKS)}")
    p = command("ablate", cmd_ablate, "run one ablation axis")
    p.add_argument("--axis", required=True, help=f"one of {', '.join(AXES)}")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "task", None) is not None and args.task not in TASKS:
        print(f"error: unknown task {args.task!r}; choose from {', '.join(TASKS)}", file=sys.stderr)
        return 2
    if getattr(args, "axis", None) is not None and args.axis not in AXES:
        print(f"error: unknown axis {args.axis!r}; choose from {', '.join(AXES)}", file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        return args.fn(cfg, args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (AscnetError, OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
