"""Lip-motion video tensors: cropping, tempo perturbation, clip-level augmentation,
synthetic corpus rendering and the ``.vten`` container."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

VTEN_MAGIC = b"VTEN0001"
_MAX_DIM = 1 << 24


class VideoFormatError(ValueError):
    """Raised for malformed ``.vten`` files or manifests."""


@dataclass
class VideoTensor:
    """Frames [T,H,W,C] with pixels in [0, 1]."""

    frames: np.ndarray
    frame_rate: float = 25.0

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float32)
        if f.ndim != 4:
            raise ValueError(f"frames must be [T,H,W,C], got shape {f.shape}")
        if f.shape[0] < 1:
            raise ValueError("a video needs at least one frame")
        if f.shape[3] not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {f.shape[3]}")
        if not (np.all(f >= 0.0) and np.all(f <= 1.0)):
            raise ValueError("pixel values must lie in [0, 1]")
        self.frames = f

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def size(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]

    @property
    def channels(self) -> int:
        return self.frames.shape[3]

    def to_model_input(self) -> np.ndarray:
        """[C,T,H,W] layout expected by the frontend."""
        return np.ascontiguousarray(self.frames.transpose(3, 0, 1, 2))


def center_crop(video: VideoTensor, n: int) -> VideoTensor:
    """Keep the central n x n region; an odd margin puts the extra pixel bottom/right."""
    h, w = video.size
    if n < 1 or n > h or n > w:
        raise ValueError(f"crop size {n} does not fit a {h}x{w} frame")
    top, left = (h - n) // 2, (w - n) // 2
    return VideoTensor(video.frames[:, top : top + n, left : left + n, :].copy(), video.frame_rate)


def speed_perturb_indices(num_frames: int, rate: float) -> np.ndarray:
    """Nearest-neighbour source frame for each output frame: floor(j * rate), j < ceil(T / rate)."""
    if rate <= 0:
        raise ValueError(f"speed rate must be positive, got {rate}")
    r = Fraction(str(rate))
    out_len = math.ceil(num_frames / r)
    return np.array([math.floor(j * r) for j in range(out_len)], dtype=np.int64)


def speed_perturb(video: VideoTensor, rate: float) -> VideoTensor:
    idx = speed_perturb_indices(video.num_frames, rate)
    return VideoTensor(video.frames[idx].copy(), video.frame_rate)


@dataclass
class AugmentPolicy:
    rotation_max_deg: float = 10.0
    hflip_prob: float = 0.5
    brightness_range: tuple[float, float] = (0.7, 1.3)
    contrast_range: tuple[float, float] = (0.7, 1.3)
    rng_seed: int = 0

    def __post_init__(self):
        self.brightness_range = tuple(self.brightness_range)
        self.contrast_range = tuple(self.contrast_range)
        if self.rotation_max_deg < 0:
            raise ValueError("rotation_max_deg must be >= 0")
        if self.rng_seed < 0:
            raise ValueError("rng_seed must be >= 0")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError("hflip_prob must be in [0, 1]")
        for name, (lo, hi) in (("brightness_range", self.brightness_range), ("contrast_range", self.contrast_range)):
            if not lo <= 1.0 <= hi:
                raise ValueError(f"{name} must contain 1.0, got {(lo, hi)}")

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls(0.0, 0.0, (1.0, 1.0), (1.0, 1.0))


def hflip(video: VideoTensor) -> VideoTensor:
    return VideoTensor(video.frames[:, :, ::-1, :].copy(), video.frame_rate)


def rotate(video: VideoTensor, degrees: float) -> VideoTensor:
    """Counter-clockwise rotation about the frame center, bilinear with zero fill.

    Multiples of 90 degrees on square frames are exact index permutations.
    """
    frames = video.frames
    h, w = video.size
    quarter = degrees / 90.0
    if h == w and quarter == round(quarter):
        return VideoTensor(np.rot90(frames, k=int(round(quarter)) % 4, axes=(1, 2)).copy(), video.frame_rate)
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    # inverse map: output pixel -> source location (image rows grow downward)
    src_x = cos * dx - sin * dy + cx
    src_y = sin * dx + cos * dy + cy
    x0, y0 = np.floor(src_x).astype(np.int64), np.floor(src_y).astype(np.int64)
    fx, fy = src_x - x0, src_y - y0
    out = np.zeros(frames.shape, dtype=np.float64)
    for oy, ox, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        sy, sx = y0 + oy, x0 + ox
        ok = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
        vals = frames[:, np.clip(sy, 0, h - 1), np.clip(sx, 0, w - 1), :]
        out += vals * (wgt * ok)[None, :, :, None]
    return VideoTensor(np.clip(out, 0.0, 1.0), video.frame_rate)


def adjust_color(video: VideoTensor, brightness: float, contrast: float) -> VideoTensor:
    """Scale brightness, then stretch contrast about the clip mean; clamp to [0, 1]."""
    f = video.frames.astype(np.float64) * brightness
    mu = f.mean()
    f = (f - mu) * contrast + mu
    return VideoTensor(np.clip(f, 0.0, 1.0), video.frame_rate)


def augment(video: VideoTensor, policy: AugmentPolicy, rng: np.random.Generator) -> VideoTensor:
    """Clip-level random rotation, horizontal flip and colour jitter.

    One draw of each parameter is shared by every frame so motion stays coherent.
    """
    angle = rng.uniform(-policy.rotation_max_deg, policy.rotation_max_deg)
    flip = rng.random() < policy.hflip_prob
    brightness = rng.uniform(*policy.brightness_range)
    contrast = rng.uniform(*policy.contrast_range)
    out = video
    if angle != 0.0:
        out = rotate(out, angle)
    if flip:
        out = hflip(out)
    if brightness != 1.0 or contrast != 1.0:
        out = adjust_color(out, brightness, contrast)
    return VideoTensor(np.clip(out.frames, 0.0, 1.0), video.frame_rate)


def utterance_rng(seed: int, utterance_id: str, *extra: int) -> np.random.Generator:
    """Independent RNG stream derived from (seed, utterance id, extra counters)."""
    digest = hashlib.sha256(f"{seed}\x00{utterance_id}".encode("utf-8")).digest()
    return np.random.default_rng([int.from_bytes(digest[:8], "little"), *extra])


# ---------------------------------------------------------------- synthesis


def render_token(index: int, num_tokens: int, n: int) -> np.ndarray:
    """Noise-free n x n pattern for a token: a horizontal mouth bar whose row
    encodes the token index. Symmetric left-right, so flips keep it readable."""
    img = np.full((n, n), 0.2, dtype=np.float64)
    thick = max(1, n // 16)
    row = int(round((index + 1) * n / (num_tokens + 1))) - thick // 2
    margin = n // 8
    img[max(row, 0) : row + thick, margin : n - margin] = 0.9
    return img


def synth_generate(
    tokens: Sequence[str],
    vocab,
    n: int,
    frames_per_token: int,
    rng: np.random.Generator,
    noise: float = 0.05,
    channels: int = 1,
) -> tuple[VideoTensor, str]:
    """Render a token sequence as a noisy lip-like clip.

    Each token holds its pattern for ``frames_per_token`` frames; the first
    frame of each segment is drawn at reduced contrast so repeated tokens stay
    separable in time.
    """
    if frames_per_token < 2:
        raise ValueError("frames_per_token must be >= 2")
    content = vocab.content_tokens
    frames = []
    for tok in tokens:
        if tok not in content:
            raise KeyError(f"unknown token {tok!r}")
        pattern = render_token(content.index(tok), len(content), n)
        onset = 0.2 + 0.5 * (pattern - 0.2)
        frames.append(onset)
        frames.extend([pattern] * (frames_per_token - 1))
    if not frames:
        raise ValueError("cannot render an empty token sequence")
    clip = np.stack(frames)[..., None]
    clip = clip + rng.normal(0.0, noise, size=clip.shape)
    clip = np.repeat(np.clip(clip, 0.0, 1.0), channels, axis=-1)
    return VideoTensor(clip), "".join(tokens)


def sample_transcript(content: Sequence[str], rng: np.random.Generator, min_len: int, max_len: int) -> list[str]:
    """Random token string with no token immediately repeated."""
    if not 1 <= min_len <= max_len:
        raise ValueError("need 1 <= min_len <= max_len")
    if len(content) < 2 and max_len > 1:
        raise ValueError("need at least 2 content tokens to avoid immediate repeats")
    length = int(rng.integers(min_len, max_len + 1))
    out = [content[int(rng.integers(len(content)))]]
    while len(out) < length:
        # draw from the other len-1 tokens by skipping over the previous one
        k = int(rng.integers(len(content) - 1))
        out.append(content[k + (k >= content.index(out[-1]))])
    return out


def synth_corpus(
    vocab, prefix: str, count: int, seed: int, n: int, frames_per_token: int,
    min_tokens: int = 3, max_tokens: int = 6, noise: float = 0.05,
):
    """Yield ``(utterance_id, video, transcript)``; every utterance draws from
    its own stream keyed by (seed, id), so subsets regenerate identically."""
    for i in range(count):
        uid = f"{prefix}_{i:04d}"
        rng = utterance_rng(seed, uid)
        tokens = sample_transcript(vocab.content_tokens, rng, min_tokens, max_tokens)
        video, text = synth_generate(tokens, vocab, n, frames_per_token, rng, noise)
        yield uid, video, text


# ---------------------------------------------------------------- .vten I/O


def encode_vten(array: np.ndarray) -> bytes:
    arr = np.asarray(array, dtype="<f4", order="C")
    header = VTEN_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_vten(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 12 or buf[:8] != VTEN_MAGIC:
        raise VideoFormatError(f"{source}: bad magic")
    (rank,) = struct.unpack_from("<I", buf, 8)
    if rank > 8:
        raise VideoFormatError(f"{source}: rank {rank} too large")
    if len(buf) < 12 + 4 * rank:
        raise VideoFormatError(f"{source}: truncated header")
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    count = 1
    for d in dims:
        if d > _MAX_DIM:
            raise VideoFormatError(f"{source}: dimension overflow ({d})")
        count *= d
    start = 12 + 4 * rank
    if len(buf) - start < 4 * count:
        raise VideoFormatError(f"{source}: truncated payload ({len(buf) - start} bytes for {count} values)")
    if len(buf) - start > 4 * count:
        raise VideoFormatError(f"{source}: trailing bytes after payload")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=start).reshape(dims).astype(np.float32)


def save_vten(path, video: "VideoTensor | np.ndarray") -> None:
    arr = video.frames if isinstance(video, VideoTensor) else video
    Path(path).write_bytes(encode_vten(arr))


def load_vten(path) -> VideoTensor:
    return VideoTensor(decode_vten(Path(path).read_bytes(), str(path)))


# ---------------------------------------------------------------- manifests


@dataclass
class ManifestEntry:
    utterance_id: str
    vten_path: str
    transcript: str

    def resolve(self, base: Path) -> Path:
        p = Path(self.vten_path)
        return p if p.is_absolute() else base / p


@dataclass
class Manifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    base_dir: Path = Path(".")

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def load_video(self, entry: ManifestEntry) -> VideoTensor:
        return load_vten(entry.resolve(self.base_dir))

    def transcripts(self) -> dict[str, str]:
        return {e.utterance_id: e.transcript for e in self.entries}


def read_manifest(path) -> Manifest:
    path = Path(path)
    entries = []
    seen = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise VideoFormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
        if parts[0] in seen:
            raise VideoFormatError(f"{path}:{lineno}: duplicate utterance id {parts[0]!r}")
        seen.add(parts[0])
        entries.append(ManifestEntry(*parts))
    return Manifest(entries, path.parent)


def format_manifest(entries: Sequence[ManifestEntry]) -> str:
    return "".join(f"{e.utterance_id}\t{e.vten_path}\t{e.transcript}\n" for e in entries)
