"""Finite-difference check of the whole pretraining objective.

Runs in float64 on a tiny encoder, with targets frozen at their current
values so the stop-gradient objective is an ordinary function.

    python3 scripts/gradcheck_model.py --seeds 20
"""
import argparse
import time

import numpy as np

from ascnet.autodiff import Graph
from ascnet.gradcheck import check_gradients
from ascnet.model import EncoderConfig, init_params
from ascnet.pretrain import TrainConfig, objective

TINY = EncoderConfig(stage_channels=(2, 3, 4), clip_shape=(7, 15, 15), proj_dim=5, n_speeds=2)


def check(seed, cfg, n_entries):
    params = init_params(TINY, seed=seed).astype(np.float64)
    rng = np.random.default_rng(seed)
    for name in params.names():
        if name.endswith(".bias"):
            params[name].values[...] = rng.normal(0, 0.1, params[name].shape)
    bi, bj, bk = (rng.uniform(0, 1, size=(2, 3, *TINY.clip_shape)) for _ in range(3))
    labels = rng.integers(0, 2, 2)
    frozen = None
    if cfg.stop_gradient:
        out = objective(Graph(), params, bi, bj, bk, labels, cfg)
        frozen = {"a_target": out["a_j"].values.copy()}
        if "m_k" in out:
            frozen["m_target"] = out["m_k"].values.copy()
    skip = ("speed_cls.",) if cfg.scp_mode == "scp" else ("proj_m.", "pred_m.")
    tensors = {n: t for n, t in params.tensors.items() if not n.startswith(skip)}
    build = lambda g: objective(g, params, bi, bj, bk, labels, cfg, frozen)["total"]
    return check_gradients(build, tensors, rng, n_entries)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--entries", type=int, default=12, help="entries probed per tensor (0 = all)")
    ap.add_argument("--tol", type=float, default=1e-3)
    args = ap.parse_args()

    modes = {"scp": TrainConfig(), "scp-no-detach": TrainConfig(stop_gradient=False), "sp": TrainConfig(scp_mode="sp")}
    t0, worst = time.time(), 0.0
    for label, cfg in modes.items():
        errs = [max(check(s, cfg, args.entries or None).values()) for s in range(args.seeds)]
        worst = max(worst, max(errs))
        print(f"{label:14s} max rel err {max(errs):.2e} over {args.seeds} seeds")
    print(f"{'PASS' if worst <= args.tol else 'FAIL'} ({time.time() - t0:.1f}s)")
    raise SystemExit(worst > args.tol)


if __name__ == "__main__":
    main()
