"""Desk-scale pretraining run with the downstream checks.

Trains on the 200-video corpus, then compares retrieval top-1 and the speed
probe against the untrained encoder under identical seeds.

    python3 scripts/desk_run.py --steps 2000 --out runs/desk
    python3 scripts/desk_run.py --steps 2000 --no-stop-gradient --out runs/desk_nosg
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from ascnet.config import load_config
from ascnet.evaluate import extract_video_features, speed_probe, split_query_gallery, topk_retrieval
from ascnet.model import init_params
from ascnet.pretrain import TrainConfig, train
from ascnet.synthcorpus import generate_corpus

DESK_TOML = Path(__file__).resolve().parents[1] / "configs" / "desk.toml"


def downstream(params, corpus, speed_set, seed):
    feats = extract_video_features(corpus, params, "encoder")
    q, gal = split_query_gallery(feats, seed)
    return {"top1": topk_retrieval(q, gal).topk[1],
            "speed_probe": speed_probe(params, corpus, speed_set, seed).accuracy}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default=str(DESK_TOML))
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-stop-gradient", action="store_true")
    ap.add_argument("--set", action="append", default=[], help="TrainConfig override, key=json")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    run = load_config(args.config, seed=args.seed)
    overrides = {"max_steps": args.steps, "stop_gradient": not args.no_stop_gradient}
    for kv in args.set:
        k, v = kv.split("=", 1)
        overrides[k] = json.loads(v)
    corpus = generate_corpus(run.corpus)
    cfg = TrainConfig(**{**run.train.__dict__, **overrides})
    mcfg = run.model

    t0 = time.time()
    window = []

    def report(rec):
        window.append((rec.total, rec.feat_std))
        if (rec.step + 1) % 100 == 0:
            tot, std = np.array(window).T
            print(f"step {rec.step + 1:5d}  loss {tot.mean():.4f}  std min {std.min():.5f} "
                  f"mean {std.mean():.5f}  {time.time() - t0:.0f}s", flush=True)
            window.clear()

    trainer = train(corpus, cfg, mcfg, run.augment, out_dir=args.out, on_step=report)
    totals = np.array([r.total for r in trainer.records])
    stds = np.array([r.feat_std for r in trainer.records])
    summary = {
        "loss_ratio": float(totals[-100:].mean() / totals[:100].mean()),
        "loss_ratio_vs_100_199": float(totals[-100:].mean() / totals[100:200].mean()) if len(totals) >= 200 else None,
        "min_std_after_500": float(stds[501:].min()) if len(stds) > 501 else None,
        "final_std": float(stds[-1]),
        "trained": downstream(trainer.params, corpus, cfg.speed_set, args.seed),
        "untrained": downstream(init_params(mcfg, cfg.seed), corpus, cfg.speed_set, args.seed),
    }
    print(json.dumps(summary, indent=2))
    if args.out:
        Path(args.out, "summary.json").write_text(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
