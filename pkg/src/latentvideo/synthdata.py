"""Deterministic identity-by-motion synthetic clips plus container/export IO.

Each clip shows one anti-aliased shape (the identity: square, disk or
triangle with a color and size) moving along one pattern (the motion:
bounces, diagonal or circular orbit) over a 0.1 gray background. The
matrix builder renders every (identity, motion) cell except the held-out
ones, whose ground truth stays renderable on demand for evaluation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .serialization import FormatError, Reader, f32_block, u32

MAGIC = b"NAVS"
VERSION = 1

BACKGROUND = 0.1
SUPERSAMPLE = 4

SHAPES = ("square", "disk", "triangle")
PATTERNS = ("horizontal-bounce", "vertical-bounce", "diagonal", "circular")

# bright, mutually distinguishable fills (luminance well above the background)
PALETTE = (
    (0.90, 0.20, 0.20),
    (0.20, 0.45, 0.95),
    (0.95, 0.85, 0.20),
    (0.20, 0.85, 0.30),
    (0.90, 0.30, 0.90),
    (0.30, 0.90, 0.90),
    (0.95, 0.60, 0.15),
    (0.90, 0.90, 0.90),
    (0.60, 0.30, 0.90),
)


@dataclass(frozen=True)
class Identity:
    name: str
    shape: str
    color: tuple[float, float, float]
    size: float

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}, expected one of {SHAPES}")
        if self.size <= 0:
            raise ValueError(f"size must be positive, got {self.size}")


@dataclass(frozen=True)
class Motion:
    name: str
    pattern: str
    speed: float
    phase: float = 0.0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ValueError(f"unknown pattern {self.pattern!r}, expected one of {PATTERNS}")
        if self.speed < 0:
            raise ValueError(f"speed must be >= 0, got {self.speed}")


@dataclass(frozen=True)
class SceneSpec:
    identity: Identity
    motion: Motion


def _reflect(u: float, lo: float, hi: float) -> float:
    span = hi - lo
    if span <= 0:
        return lo
    p = (u - lo) % (2 * span)
    return lo + (p if p <= span else 2 * span - p)


def motion_path(motion: Motion, frames: int, height: int, width: int, size: float) -> np.ndarray:
    """Shape-center (x, y) per frame; bounces keep the shape fully inside."""
    m = size / 2 + 1.0  # half extent plus a one-pixel safety ring
    if size + 2 > min(height, width):
        raise ValueError(f"shape of size {size} exits a {height}x{width} frame")
    out = np.zeros((frames, 2))
    for t in range(frames):
        u = m + motion.phase + motion.speed * t
        if motion.pattern == "horizontal-bounce":
            out[t] = (_reflect(u, m, width - m), height / 2)
        elif motion.pattern == "vertical-bounce":
            out[t] = (width / 2, _reflect(u, m, height - m))
        elif motion.pattern == "diagonal":
            out[t] = (_reflect(u, m, width - m), _reflect(u, m, height - m))
        else:  # circular orbit around the frame center
            r = min(height, width) / 2 - m
            theta = (motion.phase + motion.speed * t) / max(r, 1e-9)
            out[t] = (width / 2 + r * np.cos(theta), height / 2 + r * np.sin(theta))
    return out


def _coverage(shape: str, cx: float, cy: float, size: float, height: int, width: int) -> np.ndarray:
    s = SUPERSAMPLE
    xs = (np.arange(width * s) + 0.5) / s
    ys = (np.arange(height * s) + 0.5) / s
    x, y = np.meshgrid(xs, ys)
    half = size / 2
    if shape == "square":
        inside = (np.abs(x - cx) <= half) & (np.abs(y - cy) <= half)
    elif shape == "disk":
        inside = (x - cx) ** 2 + (y - cy) ** 2 <= half**2
    else:  # triangle: apex up, base down, inscribed in the size box
        apex = cy - half
        inside = (y >= apex) & (y <= cy + half) & (np.abs(x - cx) <= (y - apex) / 2)
    fine = inside.astype(np.float32)
    return fine.reshape(height, s, width, s).mean(axis=(1, 3))


def render_video(spec: SceneSpec, frames: int, height: int, width: int) -> np.ndarray:
    """Anti-aliased clip (frames, 3, H, W) in [0, 1] over the gray background."""
    if frames < 1:
        raise ValueError(f"frames must be >= 1, got {frames}")
    path = motion_path(spec.motion, frames, height, width, spec.identity.size)
    color = np.asarray(spec.identity.color, dtype=np.float32)
    clip = np.empty((frames, 3, height, width), dtype=np.float32)
    for t, (cx, cy) in enumerate(path):
        cov = _coverage(spec.identity.shape, cx, cy, spec.identity.size, height, width)
        clip[t] = BACKGROUND + cov[None, :, :] * (color[:, None, None] - BACKGROUND)
    return np.clip(clip, 0.0, 1.0)


def default_identities(count: int, seed: int = 0) -> list[Identity]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(PALETTE))
    out = []
    for i in range(count):
        color = PALETTE[order[i % len(PALETTE)]]
        out.append(Identity(f"id{i}", SHAPES[i % len(SHAPES)], tuple(color), 5.0 + 2 * ((i // 3) % 2)))
    return out


def default_motions(count: int) -> list[Motion]:
    out = []
    for j in range(count):
        out.append(Motion(f"mo{j}", PATTERNS[j % len(PATTERNS)], speed=1.0 + j // len(PATTERNS), phase=float(j)))
    return out


@dataclass
class ManifestEntry:
    video_id: str
    identity: Identity
    motion: Motion
    held_out: bool


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    frames: int
    channels: int
    height: int
    width: int
    seed: int
    synthetic: bool = True

    def train_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if not e.held_out]

    def held_out_entries(self) -> list[ManifestEntry]:
        return [e for e in self.entries if e.held_out]

    def render_entry(self, entry: ManifestEntry) -> np.ndarray:
        return render_video(SceneSpec(entry.identity, entry.motion), self.frames, self.height, self.width)

    def to_json(self) -> dict:
        return {
            "format": "latentvideo-dataset",
            "version": 1,
            "synthetic": self.synthetic,
            "seed": self.seed,
            "geometry": {
                "frames": self.frames,
                "channels": self.channels,
                "height": self.height,
                "width": self.width,
            },
            "entries": [
                {
                    "video_id": e.video_id,
                    "identity": asdict(e.identity),
                    "motion": asdict(e.motion),
                    "held_out": e.held_out,
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        geo = obj["geometry"]
        entries = [
            ManifestEntry(
                video_id=e["video_id"],
                identity=Identity(
                    e["identity"]["name"],
                    e["identity"]["shape"],
                    tuple(e["identity"]["color"]),
                    e["identity"]["size"],
                ),
                motion=Motion(
                    e["motion"]["name"],
                    e["motion"]["pattern"],
                    e["motion"]["speed"],
                    e["motion"]["phase"],
                ),
                held_out=bool(e["held_out"]),
            )
            for e in obj["entries"]
        ]
        return cls(
            entries=entries,
            frames=geo["frames"],
            channels=geo["channels"],
            height=geo["height"],
            width=geo["width"],
            seed=obj.get("seed", 0),
            synthetic=bool(obj.get("synthetic", False)),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_matrix_dataset(
    identities,
    motions,
    holdout: Iterable[tuple[int, int]] = (),
    frames: int = 8,
    height: int = 16,
    width: int = 16,
    seed: int = 0,
) -> tuple[DatasetManifest, np.ndarray]:
    """Render the identity-by-motion grid minus the held-out cells.

    ``identities``/``motions`` may be counts (specs generated from the seed)
    or explicit spec lists. Held-out cells are recorded in the manifest but
    not rendered into the returned training clips.
    """
    if isinstance(identities, int):
        identities = default_identities(identities, seed)
    if isinstance(motions, int):
        motions = default_motions(motions)
    identities = list(identities)
    motions = list(motions)
    holdout = {(int(i), int(j)) for i, j in holdout}
    for i, j in holdout:
        if not (0 <= i < len(identities) and 0 <= j < len(motions)):
            raise ValueError(f"holdout cell {(i, j)} outside the {len(identities)}x{len(motions)} grid")
    for i in range(len(identities)):
        if all((i, j) in holdout for j in range(len(motions))):
            raise ValueError(f"holdout covers every motion of identity {identities[i].name!r}")
    for j in range(len(motions)):
        if all((i, j) in holdout for i in range(len(identities))):
            raise ValueError(f"holdout covers every identity of motion {motions[j].name!r}")

    entries = []
    clips = []
    for i, ident in enumerate(identities):
        for j, mot in enumerate(motions):
            held = (i, j) in holdout
            entries.append(ManifestEntry(f"{ident.name}__{mot.name}", ident, mot, held))
            if not held:
                clips.append(render_video(SceneSpec(ident, mot), frames, height, width))
    manifest = DatasetManifest(
        entries=entries, frames=frames, channels=3, height=height, width=width, seed=seed
    )
    return manifest, np.stack(clips)


# ---------------------------------------------------------------------------
# NAVS clip container


def clips_bytes(clips: np.ndarray, geometry: tuple[int, int, int, int] | None = None) -> bytes:
    clips = np.asarray(clips, dtype=np.float32)
    if clips.size == 0:
        l, c, h, w = geometry if geometry is not None else (0, 0, 0, 0)
        n = 0
    else:
        if clips.ndim != 5:
            raise ValueError(f"expected clips of shape (N,L,C,H,W), got {clips.shape}")
        n, l, c, h, w = clips.shape
    header = MAGIC + u32(VERSION) + u32(n) + u32(l) + u32(c) + u32(h) + u32(w)
    return header + (f32_block(clips) if n else b"")


def write_navs(clips: np.ndarray, path, geometry=None) -> None:
    Path(path).write_bytes(clips_bytes(clips, geometry))


def read_navs(path) -> np.ndarray:
    r = Reader(Path(path).read_bytes(), name=str(path))
    r.magic(MAGIC)
    r.version(VERSION)
    n = r.u32("clip count")
    l, c, h, w = (r.u32(k) for k in ("frames", "channels", "height", "width"))
    count = n * l * c * h * w
    flat = r.f32(count, "clip payload")
    r.expect_end()
    return flat.reshape(n, l, c, h, w) if n else np.zeros((0, l, c, h, w), np.float32)


# ---------------------------------------------------------------------------
# image export


def _quantize(frame: np.ndarray) -> np.ndarray:
    arr = np.asarray(frame, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected a (C,H,W) frame with 1 or 3 channels, got {arr.shape}")
    q = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    return np.moveaxis(q, 0, -1)


def _to_image(frame: np.ndarray) -> Image.Image:
    q = _quantize(frame)
    if q.shape[-1] == 1:
        return Image.fromarray(q[..., 0], mode="L")
    return Image.fromarray(q, mode="RGB")


def export_png(frame: np.ndarray, path) -> None:
    """8-bit PNG; values quantized by round(v*255) with round-half-to-even."""
    _to_image(frame).save(Path(path), format="PNG")


def export_gif(clip: np.ndarray, path, fps: float = 4.0) -> None:
    clip = np.asarray(clip)
    if clip.ndim != 4 or clip.shape[0] < 1:
        raise ValueError(f"expected a (L,C,H,W) clip, got {clip.shape}")
    images = [_to_image(f) for f in clip]
    duration = max(int(round(1000.0 / fps)), 1)
    images[0].save(
        Path(path),
        format="GIF",
        save_all=True,
        append_images=images[1:],
        duration=duration,
        loop=0,
    )
