"""Appearance/speed consistency pretraining loop with LARS.

Randomness is derived from ``SeedSequence([seed, step, item])`` per batch item
and ``SeedSequence([seed, epoch])`` per epoch shuffle, so a run is a pure
function of (seed, config, corpus) and resumes exactly from any checkpoint.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .autodiff import Graph, Tensor, backward, detach
from .errors import ConfigError, NoCandidateError, NumericsError
from .model import EncoderConfig, ModelParams, encode, init_params, predict, project, speed_logits
from .objectives import (LossBreakdown, MemoryBank, acp_loss, bank_insert, combined_loss, retrieve_similar,
                         scp_loss, sp_loss)
from .synthcorpus import (SPEEDS, AugmentConfig, SyntheticVideo, augment, check_speed, clip_span,
                          clips_to_batch, sample_clip)

log = logging.getLogger(__name__)

INSTANCE_MODES = ("same", "different", "similar")
SCP_MODES = ("scp", "sp")


@dataclass
class TrainConfig:
    batch_size: int = 16
    base_lr: float = 0.3
    momentum: float = 0.9
    weight_decay: float = 1e-6
    trust_coefficient: float = 0.001
    gamma: float = 0.5
    speed_set: tuple[int, ...] = (4, 8)
    fixed_speed_pair: bool = False  # s_i = speed_set[0], s_j = speed_set[1]
    epochs: int = 200
    max_steps: int | None = None  # overrides epochs when set
    instance_mode: str = "similar"
    scp_mode: str = "scp"
    bank_capacity: int = 512
    stop_gradient: bool = True
    symmetric: bool = False
    clip_frames: int = 8
    clip_size: tuple[int, int] = (32, 32)
    checkpoint_every: int = 0
    seed: int = 0

    def __post_init__(self):
        self.speed_set = tuple(int(s) for s in self.speed_set)
        self.clip_size = tuple(int(s) for s in self.clip_size)
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"gamma={self.gamma} outside [0, 1]")
        if not self.speed_set or any(s not in SPEEDS for s in self.speed_set):
            raise ConfigError(f"speed_set {self.speed_set} must be a non-empty subset of {SPEEDS}")
        if self.fixed_speed_pair and len(self.speed_set) != 2:
            raise ConfigError("fixed_speed_pair needs a two-element speed_set")
        if self.instance_mode not in INSTANCE_MODES:
            raise ConfigError(f"instance_mode must be one of {INSTANCE_MODES}")
        if self.scp_mode not in SCP_MODES:
            raise ConfigError(f"scp_mode must be one of {SCP_MODES}")
        if self.bank_capacity < 1 or self.epochs < 0 or self.clip_frames < 1:
            raise ConfigError("bank_capacity, epochs and clip_frames must be positive")
        if self.max_steps is not None and self.max_steps < 0:
            raise ConfigError("max_steps must be non-negative")

    @property
    def speed_classes(self) -> tuple[int, ...]:
        """Distinct speeds in label order (the SP head's classes)."""
        return tuple(sorted(set(self.speed_set)))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["speed_set"] = list(self.speed_set)
        d["clip_size"] = list(self.clip_size)
        return d


@dataclass
class StepRecord:
    step: int
    l_a: float
    l_m: float | None
    l_sp: float | None
    total: float
    lr: float
    feat_std: float
    ms: float = 0.0

    def log_line(self) -> str:
        # wall time is excluded so logs are reproducible byte-for-byte
        d = {"step": self.step, "l_a": self.l_a, "l_m": self.l_m, "l_sp": self.l_sp,
             "total": self.total, "lr": self.lr, "feat_std": self.feat_std}
        return json.dumps(d)


# --------------------------------------------------------------------------
# learning rates and LARS


def scaled_lr(base_lr: float, batch_size: int) -> float:
    return base_lr * batch_size / 128


def cosine_lr(step: int, total_steps: int, base: float) -> float:
    """Cosine decay from ``base`` to ``0.01 * base``."""
    if total_steps <= 0:
        return base
    return base * (0.01 + 0.99 * 0.5 * (1 + math.cos(math.pi * step / total_steps)))


@dataclass
class LarsState:
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "LarsState":
        return cls({n: np.zeros_like(v) for n, v in params.items()})


def lars_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: LarsState,
              lr: float, momentum: float, weight_decay: float, eta: float) -> None:
    """One in-place LARS update on every tensor named in ``grads``.

    1-d tensors (biases) skip weight decay and trust scaling.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericsError(f"non-finite gradient in {name}")
    for name, g in grads.items():
        w = params[name]
        if w.ndim > 1:
            g = g + w.dtype.type(weight_decay) * w
            w_norm = float(np.linalg.norm(w.astype(np.float64)))
            g_norm = float(np.linalg.norm(g.astype(np.float64)))
            local_lr = eta * w_norm / g_norm if w_norm > 0 and g_norm > 0 else 1.0
        else:
            local_lr = 1.0
        v = state.buffers.setdefault(name, np.zeros_like(w))
        v *= w.dtype.type(momentum)
        v += w.dtype.type(local_lr * lr) * g
        w -= v


# --------------------------------------------------------------------------
# objective


def _active_params(cfg: TrainConfig) -> tuple[str, ...]:
    skip = ("speed_cls.",) if cfg.scp_mode == "scp" else ("proj_m.", "pred_m.")
    return skip


def _target(t: Tensor, cfg: TrainConfig, frozen: np.ndarray | None) -> Tensor:
    if frozen is not None:
        return Tensor(frozen, dtype=frozen.dtype)
    return detach(t) if cfg.stop_gradient else t


def appearance_stage(g: Graph, params: ModelParams, batch_i: np.ndarray, batch_j: np.ndarray,
                     cfg: TrainConfig, frozen: dict | None = None) -> dict:
    """Encode both views of each video and form the appearance consistency loss."""
    frozen = frozen or {}
    n = batch_i.shape[0]
    dtype = next(iter(params.tensors.values())).values.dtype
    x = encode(g, Tensor(np.concatenate([batch_i, batch_j]), dtype=dtype), params)
    x_i, x_j = g.rows(x, 0, n), g.rows(x, n, 2 * n)
    a_i = project(g, x_i, "appearance", params)
    a_j = project(g, x_j, "appearance", params)
    l_a = acp_loss(g, predict(g, a_i, "appearance", params), _target(a_j, cfg, frozen.get("a_target")))
    if cfg.symmetric:
        back = acp_loss(g, predict(g, a_j, "appearance", params), _target(a_i, cfg, frozen.get("a_target_rev")))
        l_a = g.scale(g.add(l_a, back), 0.5)
    return {"x_i": x_i, "a_i": a_i, "a_j": a_j, "l_a": l_a}


def speed_stage(g: Graph, params: ModelParams, x_i: Tensor, batch_k: np.ndarray,
                cfg: TrainConfig, frozen: dict | None = None) -> dict:
    """Speed consistency loss between clip i and its same-speed partner clip k."""
    frozen = frozen or {}
    x_k = encode(g, Tensor(batch_k, dtype=x_i.values.dtype), params)
    m_i = project(g, x_i, "speed", params)
    m_k = project(g, x_k, "speed", params)
    l_m = scp_loss(g, predict(g, m_i, "speed", params), _target(m_k, cfg, frozen.get("m_target")))
    if cfg.symmetric:
        back = scp_loss(g, predict(g, m_k, "speed", params), _target(m_i, cfg, frozen.get("m_target_rev")))
        l_m = g.scale(g.add(l_m, back), 0.5)
    return {"m_i": m_i, "m_k": m_k, "l_m": l_m}


def objective(g: Graph, params: ModelParams, batch_i: np.ndarray, batch_j: np.ndarray,
              batch_k: np.ndarray | None, speed_labels, cfg: TrainConfig, frozen: dict | None = None) -> dict:
    """Full pretraining loss for fixed clip batches.

    ``frozen`` replaces target features by constants; with targets frozen at
    their current values the function's gradient is what stop-gradient
    training follows.
    """
    out = appearance_stage(g, params, batch_i, batch_j, cfg, frozen)
    if cfg.scp_mode == "scp":
        out.update(speed_stage(g, params, out["x_i"], batch_k, cfg, frozen))
        second = out["l_m"]
    else:
        out["l_sp"] = sp_loss(g, speed_logits(g, out["x_i"], params), speed_labels)
        second = out["l_sp"]
    out["total"] = combined_loss(out["l_a"], second, cfg.gamma, g)
    return out


# --------------------------------------------------------------------------
# data preparation


def item_rng(seed: int, step: int, item: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, item]))


def _random_clip(video: SyntheticVideo, speed: int, cfg: TrainConfig, aug: AugmentConfig,
                 rng: np.random.Generator):
    span = clip_span(cfg.clip_frames, speed)
    start = int(rng.integers(video.n_frames - span + 1))
    aug_seed = int(rng.integers(2**63))
    clip = sample_clip(video, start, speed, cfg.clip_frames)
    return augment(clip, aug, aug_seed, cfg.clip_size)


def _draw_speeds(cfg: TrainConfig, rng: np.random.Generator) -> tuple[int, int]:
    if cfg.fixed_speed_pair:
        return cfg.speed_set[0], cfg.speed_set[1]
    s = rng.choice(np.asarray(cfg.speed_set), size=2)
    return int(s[0]), int(s[1])


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("ASCNET_THREADS", "1")))
    except ValueError:
        return 1


def _parallel_map(fn, items):
    n = _threads()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# training


class Trainer:
    """Holds the mutable state of one pretraining run."""

    def __init__(self, corpus: list[SyntheticVideo], config: TrainConfig, model_config: EncoderConfig,
                 augment_config: AugmentConfig | None = None):
        if len(corpus) < 2:
            raise ConfigError("pretraining needs at least 2 videos")
        if model_config.clip_shape != (config.clip_frames, *config.clip_size):
            raise ConfigError(f"model clip_shape {model_config.clip_shape} does not match clip geometry "
                              f"{(config.clip_frames, *config.clip_size)}")
        if config.scp_mode == "sp" and model_config.n_speeds != len(config.speed_classes):
            raise ConfigError(f"speed classifier has {model_config.n_speeds} outputs, "
                              f"speed set has {len(config.speed_classes)} speeds")
        longest = clip_span(config.clip_frames, max(config.speed_set))
        if any(v.n_frames < longest for v in corpus):
            raise ConfigError(f"videos must have at least {longest} frames for speed {max(config.speed_set)}")
        self.corpus = corpus
        self.by_id = {v.video_id: v for v in corpus}
        self.position = {v.video_id: i for i, v in enumerate(corpus)}
        self.cfg = config
        self.model_config = model_config
        self.aug = augment_config or AugmentConfig()
        self.params = init_params(model_config, config.seed)
        self.lars = LarsState.for_params(self.params.arrays())
        self.bank = MemoryBank(config.bank_capacity, model_config.proj_dim)
        self.step = 0
        self.records: list[StepRecord] = []

    # -- schedule --

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.corpus) // self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        if self.cfg.max_steps is not None:
            return self.cfg.max_steps
        return self.cfg.epochs * self.steps_per_epoch

    @property
    def lr(self) -> float:
        return scaled_lr(self.cfg.base_lr, self.cfg.batch_size)

    def batch_videos(self, step: int) -> list[SyntheticVideo]:
        epoch, pos = divmod(step, self.steps_per_epoch)
        perm = np.random.default_rng(np.random.SeedSequence([self.cfg.seed, epoch])).permutation(len(self.corpus))
        b = self.cfg.batch_size
        return [self.corpus[i] for i in perm[pos * b:(pos + 1) * b]]

    # -- one step --

    def _partner(self, video: SyntheticVideo, query: np.ndarray, rng: np.random.Generator) -> SyntheticVideo:
        mode = self.cfg.instance_mode
        if mode == "same":
            return video
        if mode == "similar" and self.bank.full:
            try:
                return self.by_id[retrieve_similar(query, self.bank, video.video_id).video_id]
            except NoCandidateError:
                pass
        idx = int(rng.integers(len(self.corpus) - 1))
        own = self.position[video.video_id]
        return self.corpus[idx + (idx >= own)]

    def train_step(self) -> StepRecord:
        cfg, step = self.cfg, self.step
        t0 = time.perf_counter()
        videos = self.batch_videos(step)
        rngs = [item_rng(cfg.seed, step, i) for i in range(len(videos))]

        def views(k):
            s_i, s_j = _draw_speeds(cfg, rngs[k])
            c_i = _random_clip(videos[k], s_i, cfg, self.aug, rngs[k])
            c_j = _random_clip(videos[k], s_j, cfg, self.aug, rngs[k])
            return c_i, c_j

        pairs = _parallel_map(views, list(range(len(videos))))
        clips_i = [p[0] for p in pairs]
        clips_j = [p[1] for p in pairs]
        labels = np.array([cfg.speed_classes.index(c.speed) for c in clips_i])

        g = Graph()
        out = appearance_stage(g, self.params, clips_to_batch(clips_i), clips_to_batch(clips_j), cfg)
        a_j = out["a_j"].values.copy()
        l_m = l_sp = None
        if cfg.scp_mode == "scp":
            partners = [self._partner(v, a_j[k], rngs[k]) for k, v in enumerate(videos)]
            clips_k = _parallel_map(lambda k: _random_clip(partners[k], clips_i[k].speed, cfg, self.aug, rngs[k]),
                                    list(range(len(videos))))
            out.update(speed_stage(g, self.params, out["x_i"], clips_to_batch(clips_k), cfg))
            second = l_m = out["l_m"]
        else:
            second = l_sp = sp_loss(g, speed_logits(g, out["x_i"], self.params), labels)
        total = combined_loss(out["l_a"], second, cfg.gamma, g)

        self.params.zero_grad()
        backward(total, g)
        skip = _active_params(cfg)
        names = [n for n in self.params.names() if not n.startswith(skip)]
        lars_step({n: self.params[n].values for n in names}, {n: self.params[n].grad for n in names},
                  self.lars, self.lr, cfg.momentum, cfg.weight_decay, cfg.trust_coefficient)

        for k, v in enumerate(videos):
            bank_insert(self.bank, a_j[k], v.video_id)

        rec = StepRecord(
            step=step,
            l_a=float(out["l_a"].item()),
            l_m=None if l_m is None else float(l_m.item()),
            l_sp=None if l_sp is None else float(l_sp.item()),
            total=float(total.item()),
            lr=self.lr,
            feat_std=float(a_j.std(axis=0).mean()),
            ms=(time.perf_counter() - t0) * 1000.0,
        )
        if not math.isfinite(rec.total):
            raise NumericsError(f"non-finite loss at step {step}")
        self.records.append(rec)
        self.step += 1
        return rec

    # -- persistence --

    def save(self, path: str | os.PathLike) -> None:
        bank_meta, bank_arrays = self.bank.state()
        blobs = {f"param.{n}": v for n, v in self.params.arrays().items()}
        blobs.update({f"lars.{n}": v for n, v in self.lars.buffers.items()})
        blobs.update(bank_arrays)
        meta = {
            "kind": "ascnet-train",
            "step": self.step,
            "rng": {"seed": self.cfg.seed, "next_step": self.step},
            "train": self.cfg.to_dict(),
            "model": self.model_config.to_dict(),
            "augment": self.aug.to_dict(),
            "bank": bank_meta,
            "corpus": corpus_fingerprint(self.corpus),
        }
        checkpoint.write_blobs(path, blobs, meta)

    def restore(self, path: str | os.PathLike) -> None:
        meta, blobs = checkpoint.read_blobs(path)
        if meta.get("corpus") != corpus_fingerprint(self.corpus):
            raise ConfigError(f"{path} was trained on a different corpus")
        if meta.get("model") != self.model_config.to_dict():
            raise ConfigError(f"{path} model config differs from the run config")
        self.params = ModelParams.from_arrays(
            self.model_config, {k[6:]: v for k, v in blobs.items() if k.startswith("param.")})
        self.lars = LarsState({k[5:]: v.copy() for k, v in blobs.items() if k.startswith("lars.")})
        self.bank = MemoryBank.from_state(meta["bank"], blobs)
        self.step = int(meta["step"])


def corpus_fingerprint(corpus: list[SyntheticVideo]) -> str:
    h = hashlib.sha256()
    for v in corpus:
        h.update(f"{v.video_id}:{v.appearance_class}:{v.motion_speed}:{v.seed}:{v.frames.shape};".encode())
    return h.hexdigest()[:16]


def load_model(path: str | os.PathLike) -> tuple[ModelParams, dict]:
    """Parameters and metadata from a training checkpoint."""
    meta, blobs = checkpoint.read_blobs(path)
    cfg = EncoderConfig(**meta["model"])
    params = ModelParams.from_arrays(cfg, {k[6:]: v for k, v in blobs.items() if k.startswith("param.")})
    return params, meta


def ckpt_name(step: int) -> str:
    return f"ckpt_{step:06d}.bin"


def train(corpus: list[SyntheticVideo], config: TrainConfig, model_config: EncoderConfig,
          augment_config: AugmentConfig | None = None, out_dir: str | os.PathLike | None = None,
          resume: str | os.PathLike | None = None, on_step=None) -> Trainer:
    """Run the fixed-length schedule; checkpoints and logs go to ``out_dir`` when given.

    Writes ``metrics.jsonl`` (one record per step), ``timing.jsonl`` (wall
    time per step) and ``ckpt_XXXXXX.bin`` at step 0, every
    ``checkpoint_every`` steps and at the end.
    """
    trainer = Trainer(corpus, config, model_config, augment_config)
    out = Path(out_dir) if out_dir is not None else None
    history: list[str] = []
    if resume is not None:
        trainer.restore(resume)
        src_log = Path(resume).parent / "metrics.jsonl"
        if src_log.exists():
            history = [ln for ln in src_log.read_text().splitlines()
                       if ln and json.loads(ln)["step"] < trainer.step]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / "metrics.jsonl", "w")
        timing = open(out / "timing.jsonl", "w")
        for ln in history:
            metrics.write(ln + "\n")
        if resume is None:
            trainer.save(out / ckpt_name(0))
    try:
        while trainer.step < trainer.total_steps:
            rec = trainer.train_step()
            if on_step is not None:
                on_step(rec)
            if out is not None:
                metrics.write(rec.log_line() + "\n")
                metrics.flush()
                timing.write(json.dumps({"step": rec.step, "ms": round(rec.ms, 3)}) + "\n")
                every = config.checkpoint_every
                if (every and trainer.step % every == 0) or trainer.step == trainer.total_steps:
                    trainer.save(out / ckpt_name(trainer.step))
            if rec.step % 100 == 0:
                log.info("step %d total %.4f l_a %.4f feat_std %.4f", rec.step, rec.total, rec.l_a, rec.feat_std)
    finally:
        if out is not None:
            metrics.close()
            timing.close()
    return trainer
