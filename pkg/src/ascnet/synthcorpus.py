"""Procedural video corpus, playback-speed clip sampling and clip augmentation.

Each video shows a static, class-specific textured background with a
class-specific polygon translating a fixed number of pixels per frame
(wrapping around the frame edges). Appearance class is visible in any single
frame; the only speed signal a clip carries is its frame sampling interval.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, RangeError

SPEEDS = (1, 2, 4, 8)
LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)  # Rec.601
MANIFEST = "manifest.json"


@dataclass(frozen=True)
class SyntheticVideo:
    video_id: int
    frames: np.ndarray  # [T, H, W, 3] float32 in [0, 1]
    appearance_class: int
    motion_speed: int
    seed: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class VideoClip:
    pixels: np.ndarray  # [n_frames, H, W, 3]
    video_id: int
    start: int
    speed: int

    def frame_indices(self) -> np.ndarray:
        return self.start + self.speed * np.arange(self.pixels.shape[0])


def check_speed(speed: int, speed_set=SPEEDS) -> int:
    if int(speed) != speed or speed not in speed_set:
        raise ConfigError(f"playback speed {speed!r} not in {tuple(speed_set)}")
    return int(speed)


# --------------------------------------------------------------------------
# generation


def _class_style(appearance_class: int) -> dict:
    # hue spacing and the polygon / texture parameters are fixed per class;
    # 8 classes give distinct (vertices, grid, levels) triples
    return {
        "hue": (appearance_class * 0.618034) % 1.0,
        "vertices": 3 + appearance_class % 4,
        "grid": 3 + 2 * ((appearance_class // 4) % 2),
        "levels": 2 + (appearance_class // 2) % 3,
        "rotation": appearance_class * 0.37,
    }


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - math.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i], dtype=np.float32)


def _value_noise(rng: np.random.Generator, grid: int, H: int, W: int) -> np.ndarray:
    lattice = rng.random((grid + 1, grid + 1))
    ys = np.linspace(0, grid, H, endpoint=False) + grid / (2 * H)
    xs = np.linspace(0, grid, W, endpoint=False) + grid / (2 * W)
    y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    a = lattice[np.ix_(y0, x0)]
    b = lattice[np.ix_(y0, x0 + 1)]
    c = lattice[np.ix_(y0 + 1, x0)]
    d = lattice[np.ix_(y0 + 1, x0 + 1)]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _polygon_mask(H: int, W: int, cy: int, cx: int, radius: float, vertices: int, rotation: float) -> np.ndarray:
    # wrapped offsets so the shape tiles across the frame border
    dy = (np.arange(H)[:, None] - cy + H // 2) % H - H // 2
    dx = (np.arange(W)[None, :] - cx + W // 2) % W - W // 2
    ang = np.arctan2(dy, dx) - rotation
    r = np.hypot(dy, dx)
    sector = 2 * np.pi / vertices
    local = np.mod(ang, sector) - sector / 2
    edge = radius * math.cos(sector / 2) / np.cos(local)
    return r <= edge


def generate_video(seed: int, video_id: int, appearance_class: int, motion_speed: int = 1,
                   T: int = 128, H: int = 32, W: int = 32, *, n_classes: int = 8,
                   clip_frames: int = 16, max_speed: int = 8) -> SyntheticVideo:
    if T < max_speed * clip_frames:
        raise ConfigError(f"T={T} too short for {clip_frames} frames at speed {max_speed}")
    if H < 32 or W < 32:
        raise ConfigError(f"frames must be at least 32x32, got {H}x{W}")
    if not 0 <= appearance_class < n_classes:
        raise ConfigError(f"appearance_class {appearance_class} outside [0, {n_classes})")
    if motion_speed < 0:
        raise ConfigError("motion_speed must be non-negative")

    style = _class_style(appearance_class)
    rng = np.random.default_rng(seed)
    hue = (style["hue"] + rng.uniform(-0.03, 0.03)) % 1.0

    noise = _value_noise(rng, style["grid"], H, W)
    levels = style["levels"]
    q = np.minimum((noise * levels).astype(int), levels - 1)
    palette = np.stack([_hsv_to_rgb(hue, 0.55, 0.35 + 0.5 * k / max(levels - 1, 1)) for k in range(levels)])
    background = palette[q]

    fg = _hsv_to_rgb((hue + 0.5) % 1.0, 0.8, 0.95)
    cy, cx = int(rng.integers(H)), int(rng.integers(W))
    direction = [(0, 1), (1, 0), (0, -1), (-1, 0)][int(rng.integers(4))]
    base = _polygon_mask(H, W, cy, cx, radius=min(H, W) * 0.22, vertices=style["vertices"],
                         rotation=style["rotation"])

    frames = np.empty((T, H, W, 3), dtype=np.float32)
    for t in range(T):
        shift = (direction[0] * motion_speed * t, direction[1] * motion_speed * t)
        mask = np.roll(base, shift, axis=(0, 1))
        frames[t] = np.where(mask[..., None], fg, background)
    return SyntheticVideo(video_id, frames, appearance_class, motion_speed, seed)


# --------------------------------------------------------------------------
# corpus persistence


@dataclass
class CorpusConfig:
    n_videos: int = 200
    n_classes: int = 8
    T: int = 128
    H: int = 32
    W: int = 32
    motion_speed: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.n_videos < 2:
            raise ConfigError("corpus needs at least 2 videos")
        if self.n_classes < 1:
            raise ConfigError("n_classes must be positive")


def video_seed(corpus_seed: int, video_id: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, video_id]).generate_state(1, np.uint64)[0])


def build_manifest(cfg: CorpusConfig) -> dict:
    cfg.validate()
    videos = [
        {
            "video_id": i,
            "appearance_class": i % cfg.n_classes,
            "motion_speed": cfg.motion_speed,
            "seed": video_seed(cfg.seed, i),
            "dims": [cfg.T, cfg.H, cfg.W, 3],
            "file": f"video_{i:05d}.f32",
        }
        for i in range(cfg.n_videos)
    ]
    return {"format": "ascnet-corpus", "version": 1, "n_classes": cfg.n_classes, "videos": videos}


def _from_entry(entry: dict, n_classes: int) -> SyntheticVideo:
    T, H, W, _ = entry["dims"]
    return generate_video(entry["seed"], entry["video_id"], entry["appearance_class"], entry["motion_speed"],
                          T, H, W, n_classes=n_classes, clip_frames=1, max_speed=1)


def generate_corpus(cfg: CorpusConfig) -> list[SyntheticVideo]:
    manifest = build_manifest(cfg)
    return [_from_entry(e, cfg.n_classes) for e in manifest["videos"]]


def write_corpus(cfg: CorpusConfig, out_dir: str | os.PathLike) -> Path:
    """Write manifest + one raw little-endian f32 blob per video.

    Existing files with identical content are left untouched.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = build_manifest(cfg)
    text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    path = out / MANIFEST
    if not path.exists() or path.read_text() != text:
        path.write_text(text)
    for entry in manifest["videos"]:
        blob = _from_entry(entry, cfg.n_classes).frames.astype("<f4").tobytes()
        target = out / entry["file"]
        if target.exists() and target.stat().st_size == len(blob) and target.read_bytes() == blob:
            continue
        target.write_bytes(blob)
    return path


def load_corpus(corpus_dir: str | os.PathLike) -> list[SyntheticVideo]:
    """Load videos listed in the manifest, regenerating any missing pixel file."""
    root = Path(corpus_dir)
    manifest = json.loads((root / MANIFEST).read_text())
    n_classes = manifest["n_classes"]
    videos = []
    for entry in manifest["videos"]:
        blob = root / entry["file"]
        dims = tuple(entry["dims"])
        if blob.exists():
            frames = np.fromfile(blob, dtype="<f4")
            if frames.size != math.prod(dims):
                raise ConfigError(f"{blob} has {frames.size} values, manifest expects {dims}")
            videos.append(SyntheticVideo(entry["video_id"], frames.reshape(dims).astype(np.float32),
                                         entry["appearance_class"], entry["motion_speed"], entry["seed"]))
        else:
            videos.append(_from_entry(entry, n_classes))
    return videos


# --------------------------------------------------------------------------
# clip sampling


def sample_clip(video: SyntheticVideo, start: int, speed: int, n_frames: int) -> VideoClip:
    if n_frames < 1 or speed < 1:
        raise RangeError(f"need n_frames >= 1 and speed >= 1, got {n_frames}, {speed}")
    last = start + (n_frames - 1) * speed
    if start < 0 or last >= video.n_frames:
        raise RangeError(f"frames {start}..{last} (step {speed}) outside video of {video.n_frames} frames")
    pixels = video.frames[start:last + 1:speed]
    return VideoClip(pixels, video.video_id, int(start), int(speed))


def clip_span(n_frames: int, speed: int) -> int:
    return (n_frames - 1) * speed + 1


def uniform_clip_starts(T: int, n_clips: int = 10, clip_span: int = 16) -> list[int]:
    if clip_span > T:
        raise RangeError(f"clip span {clip_span} exceeds video length {T}")
    if n_clips == 1:
        return [0]
    room = T - clip_span
    return [int(math.floor(i * room / (n_clips - 1) + 0.5)) for i in range(n_clips)]


# --------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    """Clip augmentation parameters.

    ``crop_scale_range`` is the area fraction of the random crop. No reference
    range is given for video pretraining; (0.4, 1.0) is a local choice.
    """

    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    jitter_prob: float = 0.8
    blur_sigma_range: tuple[float, float] = (0.1, 1.5)
    blur_prob: float = 0.5
    grayscale_prob: float = 0.2
    solarize_threshold: float = 0.5
    solarize_prob: float = 0.2
    crop_scale_range: tuple[float, float] = (0.4, 1.0)
    crop: bool = True
    jitter: bool = True
    blur: bool = True
    grayscale: bool = True
    solarize: bool = True

    def __post_init__(self):
        self.blur_sigma_range = tuple(self.blur_sigma_range)
        self.crop_scale_range = tuple(self.crop_scale_range)
        for name in ("brightness", "contrast", "saturation", "jitter_prob", "blur_prob",
                     "grayscale_prob", "solarize_threshold", "solarize_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        lo, hi = self.blur_sigma_range
        if not 0 <= lo <= hi:
            raise ConfigError(f"blur_sigma_range {self.blur_sigma_range} must be ordered and non-negative")
        lo, hi = self.crop_scale_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"crop_scale_range {self.crop_scale_range} must satisfy 0 < min <= max <= 1")

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(crop=False, jitter=False, blur=False, grayscale=False, solarize=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blur_sigma_range"] = list(self.blur_sigma_range)
        d["crop_scale_range"] = list(self.crop_scale_range)
        return d


def _resize_crop(pixels: np.ndarray, y0: int, x0: int, ch: int, cw: int, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of the crop box to (out_h, out_w); exact copy at scale 1."""
    ys = y0 + (np.arange(out_h) + 0.5) * (ch / out_h) - 0.5
    xs = x0 + (np.arange(out_w) + 0.5) * (cw / out_w) - 0.5
    ys = np.clip(ys, y0, y0 + ch - 1)
    xs = np.clip(xs, x0, x0 + cw - 1)
    ya = np.floor(ys).astype(int)
    xa = np.floor(xs).astype(int)
    yb = np.minimum(ya + 1, y0 + ch - 1)
    xb = np.minimum(xa + 1, x0 + cw - 1)
    fy = (ys - ya).astype(np.float32)[None, :, None, None]
    fx = (xs - xa).astype(np.float32)[None, None, :, None]
    top = pixels[:, ya][:, :, xa] * (1 - fx) + pixels[:, ya][:, :, xb] * fx
    bot = pixels[:, yb][:, :, xa] * (1 - fx) + pixels[:, yb][:, :, xb] * fx
    return (top * (1 - fy) + bot * fy).astype(np.float32)


def _gaussian_blur(pixels: np.ndarray, sigma: float) -> np.ndarray:
    radius = max(1, int(math.ceil(2 * sigma)))
    k = np.exp(-0.5 * (np.arange(-radius, radius + 1) / sigma) ** 2)
    k = (k / k.sum()).astype(np.float32)
    out = pixels
    for axis in (1, 2):
        pad = [(0, 0)] * 4
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="reflect")
        acc = np.zeros_like(out)
        n = out.shape[axis]
        for i, w in enumerate(k):
            acc += w * np.take(padded, np.arange(i, i + n), axis=axis)
        out = acc
    return out


def center_crop(clip: VideoClip, size: tuple[int, int]) -> VideoClip:
    h, w = size
    H, W = clip.pixels.shape[1:3]
    if h > H or w > W:
        raise RangeError(f"crop {size} larger than frame {(H, W)}")
    y0, x0 = (H - h) // 2, (W - w) // 2
    return VideoClip(clip.pixels[:, y0:y0 + h, x0:x0 + w], clip.video_id, clip.start, clip.speed)


def augment(clip: VideoClip, config: AugmentConfig, seed, size: tuple[int, int] | None = None) -> VideoClip:
    """Crop-resize, jitter, blur, grayscale, solarize; one draw per clip.

    All random draws are taken up front in a fixed order whether or not the
    transform is enabled, so toggling one transform never changes another's
    parameters.
    """
    rng = np.random.default_rng(seed)
    pixels = clip.pixels.astype(np.float32)
    n, H, W, _ = pixels.shape
    out_h, out_w = size if size is not None else (H, W)

    area = rng.uniform(*config.crop_scale_range) * H * W
    aspect = math.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3)))
    u_y, u_x = rng.random(2)
    jitter_on = rng.random() < config.jitter_prob
    b, c, s = (rng.uniform(1 - x, 1 + x) for x in (config.brightness, config.contrast, config.saturation))
    blur_on = rng.random() < config.blur_prob
    sigma = rng.uniform(*config.blur_sigma_range)
    gray_on = rng.random() < config.grayscale_prob
    sol_on = rng.random() < config.solarize_prob

    if config.crop:
        ch = int(np.clip(round(math.sqrt(area / aspect)), 1, H))
        cw = int(np.clip(round(math.sqrt(area * aspect)), 1, W))
        y0, x0 = int(u_y * (H - ch + 1)), int(u_x * (W - cw + 1))
    else:
        ch, cw, y0, x0 = H, W, 0, 0
    if (ch, cw, out_h, out_w) != (H, W, H, W):
        pixels = _resize_crop(pixels, y0, x0, ch, cw, out_h, out_w)
    else:
        pixels = pixels.copy()

    if config.jitter and jitter_on:
        pixels = np.clip(pixels * b, 0, 1)
        mean = float((pixels @ LUMA).mean())
        pixels = np.clip((pixels - mean) * c + mean, 0, 1)
        gray = (pixels @ LUMA)[..., None]
        pixels = np.clip(gray + (pixels - gray) * s, 0, 1)
    if config.blur and blur_on and sigma > 0:
        pixels = _gaussian_blur(pixels, sigma)
    if config.grayscale and gray_on:
        pixels = np.repeat((pixels @ LUMA)[..., None], 3, axis=-1)
    if config.solarize and sol_on:
        pixels = np.where(pixels >= config.solarize_threshold, 1 - pixels, pixels)
    pixels = np.clip(pixels, 0, 1).astype(np.float32)
    return VideoClip(pixels, clip.video_id, clip.start, clip.speed)


def clips_to_batch(clips) -> np.ndarray:
    """Stack clips as a [N, 3, T, H, W] float32 array."""
    return np.ascontiguousarray(np.stack([c.pixels for c in clips]).transpose(0, 4, 1, 2, 3), dtype=np.float32)
