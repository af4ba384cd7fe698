"""TinyC3D encoder, projection heads, predictors and the speed classifier.

Parameters live in a flat ``name -> Tensor`` mapping. One :class:`ModelParams`
instance is shared by every encoding within a training step.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Graph, Tensor
from .errors import ConfigError, ShapeError

HEADS = ("appearance", "speed")
_HEAD_KEY = {"appearance": "a", "speed": "m"}


@dataclass
class EncoderConfig:
    """Shape of the 3-D conv encoder and its heads.

    Strides default to (1, 2, 2) in every stage: with 8-frame clips a
    temporal stride of 2 after the first stage leaves too few frames for a
    third 3-tap kernel under valid convolution.

    With ``weight_standardize`` every conv filter is centered and rescaled to
    norm sqrt(2) before use. Without it (and without batch norm) the
    positive-only consistency objective collapses: filters align to amplify
    the clip's mean intensity until every clip maps to one direction.
    """

    stage_channels: tuple[int, ...] = (8, 16, 32)
    kernels: tuple[tuple[int, int, int], ...] = ((3, 3, 3), (3, 3, 3), (3, 3, 3))
    strides: tuple[tuple[int, int, int], ...] = ((1, 2, 2), (1, 2, 2), (1, 2, 2))
    clip_shape: tuple[int, int, int] = (8, 32, 32)  # frames, height, width
    proj_dim: int = 256
    n_speeds: int = 2
    weight_standardize: bool = True

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.kernels = tuple(tuple(int(v) for v in k) for k in self.kernels)
        self.strides = tuple(tuple(int(v) for v in s) for s in self.strides)
        self.clip_shape = tuple(int(v) for v in self.clip_shape)

    @property
    def feature_dim(self) -> int:
        return self.stage_channels[-1]

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        """Spatio-temporal output size of every stage; raises if one collapses."""
        if not self.stage_channels:
            raise ConfigError("encoder needs at least one stage")
        if not (len(self.stage_channels) == len(self.kernels) == len(self.strides)):
            raise ConfigError("stage_channels, kernels and strides must have equal length")
        dims = self.clip_shape
        shapes = []
        for i, (k, s) in enumerate(zip(self.kernels, self.strides)):
            if min(s) < 1 or min(k) < 1:
                raise ConfigError(f"stage {i}: kernel and stride entries must be >= 1")
            if any(kk > d for kk, d in zip(k, dims)):
                raise ConfigError(f"stage {i}: kernel {k} exceeds input {dims}")
            dims = tuple((d - kk) // ss + 1 for d, kk, ss in zip(dims, k, s))
            shapes.append(dims)
        return shapes

    def to_dict(self) -> dict:
        return {k: (list(map(list, v)) if k in ("kernels", "strides") else (list(v) if isinstance(v, tuple) else v))
                for k, v in asdict(self).items()}


@dataclass
class ModelParams:
    config: EncoderConfig
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def count(self, prefix: str = "") -> int:
        return sum(t.size for n, t in self.tensors.items() if n.startswith(prefix))

    def arrays(self) -> dict[str, np.ndarray]:
        return {n: t.values.copy() for n, t in self.tensors.items()}

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.values.copy(), requires_grad=True, name=n)
                                         for n, t in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {n: Tensor(t.values, requires_grad=True, dtype=dtype, name=n)
                                         for n, t in self.tensors.items()})

    @classmethod
    def from_arrays(cls, config: EncoderConfig, arrays: dict[str, np.ndarray]) -> "ModelParams":
        expected = param_shapes(config)
        missing = set(expected) - set(arrays)
        if missing:
            raise ConfigError(f"checkpoint lacks parameters {sorted(missing)}")
        tensors = {}
        for name, shape in expected.items():
            arr = np.asarray(arrays[name])
            if tuple(arr.shape) != shape:
                raise ConfigError(f"parameter {name}: checkpoint shape {arr.shape} != config shape {shape}")
            tensors[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        return cls(config, tensors)


def param_shapes(config: EncoderConfig) -> dict[str, tuple[int, ...]]:
    config.stage_shapes()
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 3
    for i, (c_out, k) in enumerate(zip(config.stage_channels, config.kernels)):
        shapes[f"enc.conv{i}.weight"] = (c_out, c_in, *k)
        shapes[f"enc.conv{i}.bias"] = (c_out,)
        c_in = c_out
    D, P = config.feature_dim, config.proj_dim
    for key in ("a", "m"):
        shapes[f"proj_{key}.weight"] = (D, P)
        shapes[f"proj_{key}.bias"] = (P,)
    for key in ("a", "m"):
        shapes[f"pred_{key}.weight"] = (P, P)
        shapes[f"pred_{key}.bias"] = (P,)
    shapes["speed_cls.weight"] = (D, config.n_speeds)
    shapes["speed_cls.bias"] = (config.n_speeds,)
    return shapes


def _fan_in(shape: tuple[int, ...]) -> int:
    # conv kernels are (out, in, t, h, w); linear weights are (in, out)
    return math.prod(shape[1:]) if len(shape) == 5 else shape[0]


def init_bound(shape: tuple[int, ...]) -> float:
    """Half-width of the He-uniform range: std = sqrt(2 / fan_in)."""
    return math.sqrt(6.0 / _fan_in(shape))


def init_params(config: EncoderConfig, seed: int = 0, predictor_init: str = "random") -> ModelParams:
    if predictor_init not in ("random", "identity"):
        raise ConfigError(f"predictor_init must be 'random' or 'identity', got {predictor_init!r}")
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias"):
            values = np.zeros(shape, dtype=np.float32)
        elif name.startswith("pred_") and predictor_init == "identity":
            values = np.eye(shape[0], dtype=np.float32)
        else:
            bound = init_bound(shape)
            values = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        tensors[name] = Tensor(values, requires_grad=True, name=name)
    return ModelParams(config, tensors)


def standardized_kernel(g: Graph, kernel: Tensor) -> Tensor:
    """Zero-mean filters with norm sqrt(2), the He-init scale."""
    k = kernel.shape[0]
    fan = kernel.size // k
    center = Tensor(np.eye(fan) - 1.0 / fan, dtype=kernel.values.dtype)
    rows = g.matmul(g.reshape(kernel, (k, fan)), center)
    return g.reshape(g.scale(g.l2_normalize(rows), math.sqrt(2.0)), kernel.shape)


def encode(g: Graph, clips: Tensor, params: ModelParams) -> Tensor:
    """[N, 3, T, H, W] clips -> [N, D] features: (conv3d -> relu) per stage, then average pool."""
    cfg = params.config
    expect = (3, *cfg.clip_shape)
    if clips.values.ndim != 5 or tuple(clips.shape[1:]) != expect:
        raise ShapeError(f"encode: expected [N, {', '.join(map(str, expect))}], got {clips.shape}")
    h = clips
    for i, stride in enumerate(cfg.strides):
        kernel = params[f"enc.conv{i}.weight"]
        if cfg.weight_standardize:
            kernel = standardized_kernel(g, kernel)
        h = g.relu(g.conv3d(h, kernel, params[f"enc.conv{i}.bias"], stride))
    return g.global_avg_pool(h)


def project(g: Graph, x: Tensor, head: str, params: ModelParams) -> Tensor:
    key = _head_key(head)
    _check_width(x, params.config.feature_dim, "project")
    return g.l2_normalize(g.linear(x, params[f"proj_{key}.weight"], params[f"proj_{key}.bias"]))


def predict(g: Graph, v: Tensor, head: str, params: ModelParams) -> Tensor:
    key = _head_key(head)
    _check_width(v, params.config.proj_dim, "predict")
    return g.l2_normalize(g.linear(v, params[f"pred_{key}.weight"], params[f"pred_{key}.bias"]))


def speed_logits(g: Graph, x: Tensor, params: ModelParams) -> Tensor:
    _check_width(x, params.config.feature_dim, "speed_logits")
    return g.linear(x, params["speed_cls.weight"], params["speed_cls.bias"])


def _head_key(head: str) -> str:
    try:
        return _HEAD_KEY[head]
    except KeyError:
        raise ConfigError(f"head must be one of {HEADS}, got {head!r}") from None


def _check_width(x: Tensor, width: int, where: str) -> None:
    if x.values.ndim != 2 or x.shape[1] != width:
        raise ShapeError(f"{where}: expected [N, {width}], got {x.shape}")


def encoder_config_from_dict(d: dict) -> EncoderConfig:
    return EncoderConfig(**d)
