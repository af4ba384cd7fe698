"""Downstream evaluation: video-level features, top-k retrieval, linear probes,
fine-tuning and collapse diagnostics."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Graph, Tensor, backward
from .errors import ConfigError, LabelError
from .model import ModelParams, encode, init_bound, project
from .pretrain import cosine_lr
from .synthcorpus import SyntheticVideo, center_crop, clip_span, clips_to_batch, sample_clip, uniform_clip_starts

SPACES = ("encoder", "appearance", "speed")
TOPK = (1, 5, 10, 20, 50)


@dataclass
class VideoFeature:
    vector: np.ndarray
    video_id: int
    appearance_class: int
    degenerate: bool = False


@dataclass
class RetrievalReport:
    topk: dict[int, float]
    n_queries: int
    n_gallery: int

    def to_dict(self) -> dict:
        return {"topk": {str(k): v for k, v in self.topk.items()},
                "n_queries": self.n_queries, "n_gallery": self.n_gallery}

    def table(self) -> str:
        head = "".join(f"{'top-' + str(k):>9}" for k in self.topk)
        row = "".join(f"{100 * v:9.1f}" for v in self.topk.values())
        return f"{'':10}{head}\n{'accuracy':10}{row}\n"


@dataclass
class ProbeResult:
    accuracy: float
    confusion: np.ndarray
    n_train: int
    n_test: int

    def to_dict(self) -> dict:
        return {"accuracy": self.accuracy, "confusion": self.confusion.tolist(),
                "n_train": self.n_train, "n_test": self.n_test}


# --------------------------------------------------------------------------
# features


def frozen(params: ModelParams) -> ModelParams:
    """View of ``params`` that records no graph nodes (values shared, not copied)."""
    return ModelParams(params.config, {n: Tensor(t.values, requires_grad=False, dtype=t.values.dtype)
                                       for n, t in params.tensors.items()})


def clip_features(params: ModelParams, batch: np.ndarray, space: str, chunk: int = 64) -> np.ndarray:
    """Per-clip features for a [N, 3, T, H, W] batch in the requested space."""
    if space not in SPACES:
        raise ConfigError(f"space must be one of {SPACES}, got {space!r}")
    p = frozen(params)
    out = []
    for lo in range(0, batch.shape[0], chunk):
        g = Graph()
        x = encode(g, Tensor(batch[lo:lo + chunk]), p)
        if space != "encoder":
            x = project(g, x, space, p)
        out.append(x.values)
    return np.concatenate(out)


def average_features(feats: np.ndarray) -> tuple[np.ndarray, bool]:
    """Order-independent mean of clip features, re-normalized to unit norm.

    ``fsum`` makes the sum exact before rounding, so any permutation of the
    rows gives the same bits. A mean with norm below 1e-8 is returned raw and
    flagged.
    """
    feats = np.asarray(feats, dtype=np.float64)
    mean = np.array([math.fsum(col) for col in feats.T]) / feats.shape[0]
    norm = math.sqrt(math.fsum(mean * mean))
    if norm < 1e-8:
        return mean.astype(np.float32), True
    return (mean / norm).astype(np.float32), False


def eval_clips(video: SyntheticVideo, clip_frames: int, clip_size, n_clips: int = 10):
    """Uniformly spaced, center-cropped, unaugmented clips at speed 1."""
    starts = uniform_clip_starts(video.n_frames, n_clips, clip_span(clip_frames, 1))
    return [center_crop(sample_clip(video, s, 1, clip_frames), clip_size) for s in starts]


def extract_video_feature(video: SyntheticVideo, params: ModelParams, space: str = "encoder",
                          n_clips: int = 10) -> VideoFeature:
    return extract_video_features([video], params, space, n_clips)[0]


def extract_video_features(videos: list[SyntheticVideo], params: ModelParams, space: str = "encoder",
                           n_clips: int = 10) -> list[VideoFeature]:
    frames, h, w = params.config.clip_shape
    clips = [c for v in videos for c in eval_clips(v, frames, (h, w), n_clips)]
    feats = clip_features(params, clips_to_batch(clips), space)
    out = []
    for i, v in enumerate(videos):
        vec, degenerate = average_features(feats[i * n_clips:(i + 1) * n_clips])
        out.append(VideoFeature(vec, v.video_id, v.appearance_class, degenerate))
    return out


# --------------------------------------------------------------------------
# retrieval


def split_query_gallery(items: list, seed: int = 0, query_frac: float = 0.2) -> tuple[list, list]:
    """Seeded shuffle into (queries, gallery) = (query_frac, 1 - query_frac)."""
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x51])).permutation(len(items))
    n_q = max(1, int(round(query_frac * len(items))))
    return [items[i] for i in sorted(order[:n_q])], [items[i] for i in sorted(order[n_q:])]


def topk_retrieval(queries: list[VideoFeature], gallery: list[VideoFeature], ks=TOPK) -> RetrievalReport:
    """Fraction of queries with a same-class item among their k nearest gallery items.

    Ranking is by dot product, descending, with ties going to the smaller
    video id.
    """
    if not gallery:
        raise ConfigError("retrieval gallery is empty")
    if {q.video_id for q in queries} & {g.video_id for g in gallery}:
        raise ConfigError("query and gallery video ids must be disjoint")
    G = np.stack([g.vector for g in gallery]).astype(np.float64)
    g_ids = np.array([g.video_id for g in gallery])
    g_cls = np.array([g.appearance_class for g in gallery])
    ks = tuple(sorted(ks))
    hits = {k: 0 for k in ks}
    for q in queries:
        sims = G @ np.asarray(q.vector, dtype=np.float64)
        order = np.lexsort((g_ids, -sims))
        match = np.flatnonzero(g_cls[order] == q.appearance_class)
        if match.size:
            for k in ks:
                hits[k] += int(match[0] < k)
    n = max(len(queries), 1)
    return RetrievalReport({k: hits[k] / n for k in ks}, len(queries), len(gallery))


# --------------------------------------------------------------------------
# probes


def _standardize(train_x: np.ndarray, test_x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0)
    sd[sd < 1e-6] = 1.0
    return (train_x - mu) / sd, (test_x - mu) / sd


def linear_probe(train_x, train_y, test_x, test_y, n_classes: int, epochs: int = 200,
                 base_lr: float = 0.5, seed: int = 0, momentum: float = 0.9) -> ProbeResult:
    """Affine softmax classifier on frozen features, full-batch SGD with cosine decay.

    Features are standardized with train-set statistics first.
    """
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    if n_classes < 2 or np.unique(train_y).size < 2:
        raise LabelError("linear probe needs at least two classes in the training labels")
    for y in (train_y, test_y):
        if y.size and (y.min() < 0 or y.max() >= n_classes):
            raise LabelError(f"labels must lie in [0, {n_classes})")
    xtr, xte = _standardize(np.asarray(train_x, np.float64), np.asarray(test_x, np.float64))
    xtr, xte = xtr.astype(np.float32), xte.astype(np.float32)
    rng = np.random.default_rng(seed)
    bound = init_bound((xtr.shape[1], n_classes))
    W = Tensor(rng.uniform(-bound, bound, (xtr.shape[1], n_classes)), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    vel = [np.zeros_like(W.values), np.zeros_like(b.values)]
    X = Tensor(xtr)
    for epoch in range(epochs):
        g = Graph()
        loss = g.cross_entropy(g.linear(X, W, b), train_y)
        W.zero_grad()
        b.zero_grad()
        backward(loss, g)
        lr = np.float32(cosine_lr(epoch, epochs, base_lr))
        for p, v in zip((W, b), vel):
            v *= np.float32(momentum)
            v += p.grad
            p.values -= lr * v
    pred = (xte @ W.values + b.values).argmax(axis=1)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (test_y, pred), 1)
    acc = float((pred == test_y).mean()) if test_y.size else 0.0
    return ProbeResult(acc, confusion, int(train_y.size), int(test_y.size))


def speed_probe_features(params: ModelParams, videos: list[SyntheticVideo], speed_set, seed: int = 0,
                         clips_per_speed: int = 2, space: str = "speed"):
    """Labeled center-cropped clips at every speed; returns (features, labels, video_ids)."""
    speeds = sorted(set(speed_set))
    frames, h, w = params.config.clip_shape
    clips, labels, vids = [], [], []
    for v in videos:
        rng = np.random.default_rng(np.random.SeedSequence([seed, v.video_id, 0x5EED]))
        for label, s in enumerate(speeds):
            span = clip_span(frames, s)
            for _ in range(clips_per_speed):
                start = int(rng.integers(v.n_frames - span + 1))
                clips.append(center_crop(sample_clip(v, start, s, frames), (h, w)))
                labels.append(label)
                vids.append(v.video_id)
    feats = clip_features(params, clips_to_batch(clips), space)
    return feats, np.array(labels), np.array(vids)


def probe_by_video(feats, labels, video_ids, n_classes: int, seed: int = 0, **probe_kw) -> ProbeResult:
    """Linear probe with a train/test split over videos (20% of videos held out)."""
    ids = sorted(set(int(i) for i in video_ids))
    test_ids, _ = split_query_gallery(ids, seed)
    test = np.isin(video_ids, test_ids)
    return linear_probe(feats[~test], labels[~test], feats[test], labels[test], n_classes, seed=seed, **probe_kw)


def speed_probe(params: ModelParams, videos: list[SyntheticVideo], speed_set, seed: int = 0,
                clips_per_speed: int = 2, **probe_kw) -> ProbeResult:
    feats, labels, vids = speed_probe_features(params, videos, speed_set, seed, clips_per_speed)
    return probe_by_video(feats, labels, vids, len(set(speed_set)), seed, **probe_kw)


def appearance_probe(params: ModelParams, videos: list[SyntheticVideo], n_classes: int, seed: int = 0,
                     space: str = "encoder", **probe_kw) -> ProbeResult:
    """Linear probe of appearance class on video-level features."""
    feats = extract_video_features(videos, params, space)
    X = np.stack([f.vector for f in feats])
    y = np.array([f.appearance_class for f in feats])
    return probe_by_video(X, y, np.array([f.video_id for f in feats]), n_classes, seed, **probe_kw)


# --------------------------------------------------------------------------
# fine-tuning


def finetune(videos: list[SyntheticVideo], params: ModelParams, n_classes: int, epochs: int = 10,
             base_lr: float = 0.05, batch_size: int = 16, seed: int = 0, momentum: float = 0.9) -> float:
    """Train encoder + a fresh linear classifier end to end; held-out accuracy.

    Works on a private copy of ``params``. Test videos are scored by the mean
    softmax over 10 uniform center-cropped clips.
    """
    p = params.copy()
    cfg = p.config
    frames, h, w = cfg.clip_shape
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xF1]))
    shape = (cfg.feature_dim, n_classes)
    bound = init_bound(shape)
    W = Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    enc = [t for n, t in p.tensors.items() if n.startswith("enc.")] + [W, b]
    vel = {id(t): np.zeros_like(t.values) for t in enc}

    test_v, train_v = split_query_gallery(videos, seed)
    labels = np.array([v.appearance_class for v in train_v])
    if np.unique(labels).size < 2:
        raise LabelError("fine-tuning needs at least two classes")
    span = clip_span(frames, 1)
    steps_per_epoch = max(1, len(train_v) // batch_size)
    total = epochs * steps_per_epoch
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_v))
        for s in range(steps_per_epoch):
            idx = order[s * batch_size:(s + 1) * batch_size]
            clips = [center_crop(sample_clip(train_v[i], int(rng.integers(train_v[i].n_frames - span + 1)), 1,
                                             frames), (h, w)) for i in idx]
            g = Graph()
            x = encode(g, Tensor(clips_to_batch(clips)), p)
            loss = g.cross_entropy(g.linear(x, W, b), labels[idx])
            for t in enc:
                t.zero_grad()
            backward(loss, g)
            lr = np.float32(cosine_lr(step, total, base_lr))
            for t in enc:
                v = vel[id(t)]
                v *= np.float32(momentum)
                v += t.grad
                t.values -= lr * v
            step += 1

    correct = 0
    for v in test_v:
        feats = clip_features(p, clips_to_batch(eval_clips(v, frames, (h, w))), "encoder")
        logits = feats @ W.values + b.values
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        prob = (z / z.sum(axis=1, keepdims=True)).mean(axis=0)
        correct += int(prob.argmax() == v.appearance_class)
    return correct / max(len(test_v), 1)


# --------------------------------------------------------------------------
# collapse


@dataclass
class CollapseMetrics:
    per_dim_std: np.ndarray
    mean_std: float
    mean_cosine: float

    def to_dict(self) -> dict:
        return {"mean_std": self.mean_std, "min_std": float(self.per_dim_std.min()),
                "max_std": float(self.per_dim_std.max()), "mean_cosine": self.mean_cosine}


def collapse_metrics(features) -> CollapseMetrics:
    """Per-dimension std (population) and mean off-diagonal cosine similarity."""
    F = np.asarray(features, dtype=np.float64)
    if F.ndim != 2 or F.shape[0] < 2:
        raise ConfigError("collapse_metrics needs at least two feature rows")
    std = F.std(axis=0)
    norms = np.linalg.norm(F, axis=1, keepdims=True)
    U = F / np.where(norms > 0, norms, 1.0)
    C = U @ U.T
    n = F.shape[0]
    mean_cos = float((C.sum() - np.trace(C)) / (n * (n - 1)))
    return CollapseMetrics(std, float(std.mean()), mean_cos)
