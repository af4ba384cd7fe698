"""Consistency losses, the speed-prediction baseline loss and the feature memory bank."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Tensor
from .errors import ConfigError, DegenerateFeatureError, NoCandidateError, ShapeError

UNIT_TOL = 1e-5


def _sq_dist_mean(g: Graph, pred: Tensor, target: Tensor, where: str) -> Tensor:
    if pred.shape != target.shape or pred.values.ndim != 2:
        raise ShapeError(f"{where}: prediction {pred.shape} and target {target.shape} must match as [N, D]")
    d = g.sub(pred, target)
    return g.scale(g.sum(g.mul(d, d)), 1.0 / pred.shape[0])


def acp_loss(g: Graph, a_pred: Tensor, a_target: Tensor) -> Tensor:
    """Mean squared distance between predicted and target appearance features."""
    return _sq_dist_mean(g, a_pred, a_target, "acp_loss")


def scp_loss(g: Graph, m_pred: Tensor, m_target: Tensor) -> Tensor:
    """Mean squared distance between predicted and target speed features."""
    return _sq_dist_mean(g, m_pred, m_target, "scp_loss")


def combined_loss(l_a, l_m, gamma: float, g: Graph | None = None):
    """``gamma * l_m + (1 - gamma) * l_a`` for floats, or as a graph node for tensors."""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma={gamma} outside [0, 1]")
    if isinstance(l_a, Tensor) or isinstance(l_m, Tensor):
        if g is None:
            raise ValueError("combined_loss on tensors needs a graph")
        return g.add(g.scale(l_m, gamma), g.scale(l_a, 1.0 - gamma))
    return gamma * l_m + (1.0 - gamma) * l_a


def sp_loss(g: Graph, logits: Tensor, speed_labels) -> Tensor:
    """Softmax cross-entropy of playback-speed logits."""
    return g.cross_entropy(logits, speed_labels)


@dataclass
class LossBreakdown:
    l_a: float
    l_m: float | None
    l_sp: float | None
    total: float
    gamma: float


# --------------------------------------------------------------------------
# memory bank


@dataclass(frozen=True)
class FeatureRecord:
    vector: np.ndarray
    video_id: int
    insert_step: int


class MemoryBank:
    """Fixed-capacity FIFO ring of unit-norm appearance features tagged by video id."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ConfigError(f"bank capacity must be positive, got {capacity}")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.vectors = np.zeros((capacity, dim), dtype=np.float32)
        self.video_ids = np.full(capacity, -1, dtype=np.int64)
        self.insert_steps = np.full(capacity, -1, dtype=np.int64)
        self.cursor = 0
        self.count = 0
        self.total_inserts = 0

    def __len__(self) -> int:
        return self.count

    @property
    def full(self) -> bool:
        return self.count == self.capacity

    def records(self) -> list[FeatureRecord]:
        """Live records, oldest first."""
        order = np.argsort(self.insert_steps[:self.count], kind="stable")
        return [FeatureRecord(self.vectors[i].copy(), int(self.video_ids[i]), int(self.insert_steps[i]))
                for i in order]

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {"capacity": self.capacity, "dim": self.dim, "cursor": self.cursor,
                "count": self.count, "total_inserts": self.total_inserts}
        arrays = {"bank.vectors": self.vectors.copy(), "bank.video_ids": self.video_ids.copy(),
                  "bank.insert_steps": self.insert_steps.copy()}
        return meta, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict[str, np.ndarray]) -> "MemoryBank":
        bank = cls(meta["capacity"], meta["dim"])
        bank.vectors[...] = arrays["bank.vectors"]
        bank.video_ids[...] = arrays["bank.video_ids"]
        bank.insert_steps[...] = arrays["bank.insert_steps"]
        bank.cursor, bank.count, bank.total_inserts = meta["cursor"], meta["count"], meta["total_inserts"]
        return bank


def bank_insert(bank: MemoryBank, vector, video_id: int) -> FeatureRecord:
    """Write one record at the cursor, overwriting the oldest once full."""
    v = np.asarray(vector, dtype=np.float32).reshape(-1)
    if v.shape != (bank.dim,):
        raise ShapeError(f"bank_insert: vector of shape {v.shape}, bank dim {bank.dim}")
    norm = float(np.sqrt(np.dot(v.astype(np.float64), v.astype(np.float64))))
    if abs(norm - 1.0) > UNIT_TOL:
        raise DegenerateFeatureError(f"bank records must be unit-norm, got norm {norm:.6g}")
    slot = bank.cursor
    bank.vectors[slot] = v
    bank.video_ids[slot] = video_id
    bank.insert_steps[slot] = bank.total_inserts
    bank.total_inserts += 1
    bank.cursor = (slot + 1) % bank.capacity
    bank.count = min(bank.count + 1, bank.capacity)
    return FeatureRecord(v.copy(), int(video_id), int(bank.insert_steps[slot]))


def retrieve_similar(query, bank: MemoryBank, exclude_video_id: int) -> FeatureRecord:
    """Record with the highest dot product to ``query`` among other videos; oldest wins ties."""
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    n = bank.count
    eligible = bank.video_ids[:n] != exclude_video_id
    if not eligible.any():
        raise NoCandidateError(f"no bank record from a video other than {exclude_video_id}")
    dots = bank.vectors[:n].astype(np.float64) @ q
    dots[~eligible] = -np.inf
    best = dots.max()
    tied = np.flatnonzero(dots == best)
    i = tied[np.argmin(bank.insert_steps[tied])]
    return FeatureRecord(bank.vectors[i].copy(), int(bank.video_ids[i]), int(bank.insert_steps[i]))
