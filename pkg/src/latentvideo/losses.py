"""Training losses: pyramid reconstruction, random-frame, and triplet terms.

The image distance is an L1 over Laplacian pyramid bands, level j weighted
by 2^(2j) and normalized by the band's pixel count so the weights carry
across resolutions. The triplet hinge acts directly on transient columns:
codes of temporally close frames (within ``window``) must sit closer than
codes of distant frames by the squared-distance margin.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LossConfig:
    lambda_static: float = 0.1
    lambda_triplet: float = 0.05
    margin: float = 0.5
    levels: int = 3
    window: int = 2
    triplets: int = 8

    def __post_init__(self):
        if self.lambda_static < 0 or self.lambda_triplet < 0:
            raise ValueError("loss weights must be >= 0")
        if self.margin <= 0:
            raise ValueError(f"margin must be > 0, got {self.margin}")
        if self.levels < 1:
            raise ValueError(f"levels must be >= 1, got {self.levels}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if self.triplets < 1:
            raise ValueError(f"triplets must be >= 1, got {self.triplets}")


def _as_image(x) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
    if t.ndim not in (3, 4):
        raise ad.ShapeError(f"expected (C,H,W) or (N,C,H,W) frames, got {t.shape}")
    return t


def _check_levels(t: Tensor, levels: int):
    h, w = t.shape[-2], t.shape[-1]
    step = 2 ** (levels - 1)
    if h % step or w % step:
        raise ad.ShapeError(f"extents {h}x{w} not divisible by 2^{levels - 1}")


def laplacian_pyramid(frame, levels: int) -> list[Tensor]:
    """Band-pass decomposition; the last band is the coarsest Gaussian level.

    ``collapse_pyramid`` inverts it exactly: each residual band stores what
    the blur-decimate-upsample round trip lost.
    """
    t = _as_image(frame)
    _check_levels(t, levels)
    bands = []
    current = t
    for _ in range(levels - 1):
        down = ad.downsample2(current)
        bands.append(ad.sub(current, ad.upsample2(down)))
        current = down
    bands.append(current)
    return bands


def collapse_pyramid(bands: Sequence[Tensor]) -> Tensor:
    out = bands[-1]
    for band in reversed(bands[:-1]):
        out = ad.add(ad.upsample2(out), band)
    return out


def _band_terms(x: Tensor, y: Tensor, levels: int, frame_count: int) -> Tensor:
    """Sum over levels of 2^(2j) * L1(band difference) / band pixels per frame."""
    bx = laplacian_pyramid(x, levels)
    by = laplacian_pyramid(y, levels)
    total = None
    for j, (a, b) in enumerate(zip(bx, by), start=1):
        numel = int(np.prod(a.shape[-3:], dtype=np.int64))
        term = ad.scale(ad.l1(ad.sub(a, b)), (4.0**j) / (numel * frame_count))
        total = term if total is None else ad.add(total, term)
    return total


def lap1_loss(x, y, levels: int) -> Tensor:
    """Level-weighted pyramid L1 between two frames; zero iff the frames match."""
    tx, ty = _as_image(x), _as_image(y)
    if tx.shape != ty.shape:
        raise ad.ShapeError(f"lap1_loss: shapes {tx.shape} and {ty.shape} differ")
    return _band_terms(tx, ty, levels, frame_count=1)


def reconstruction_loss(video, generated, levels: int) -> Tensor:
    """Mean over frames of the pyramid loss, evaluated batched."""
    tv, tg = _as_image(video), _as_image(generated)
    if tv.shape != tg.shape:
        raise ad.ShapeError(f"reconstruction_loss: shapes {tv.shape} vs {tg.shape}")
    if tv.ndim != 4:
        raise ad.ShapeError(f"reconstruction_loss: expected (L,C,H,W), got {tv.shape}")
    return _band_terms(tv, tg, levels, frame_count=tv.shape[0])


def static_loss(video, generated, k: int, levels: int) -> Tensor:
    """Pyramid loss on the single (1-based) frame k; the trainer resamples k."""
    tv, tg = _as_image(video), _as_image(generated)
    if tv.shape != tg.shape:
        raise ad.ShapeError(f"static_loss: shapes {tv.shape} vs {tg.shape}")
    if not 1 <= k <= tv.shape[0]:
        raise ValueError(f"frame index {k} out of range 1..{tv.shape[0]}")
    return _band_terms(ad.take(tv, k - 1, axis=0), ad.take(tg, k - 1, axis=0), levels, 1)


def valid_anchors(frames: int, window: int) -> list[int]:
    """1-based anchors that have both a positive within and a negative beyond the window."""
    out = []
    for a in range(1, frames + 1):
        has_pos = any(0 < abs(a - p) <= window for p in range(1, frames + 1))
        has_neg = any(abs(a - n) > window for n in range(1, frames + 1))
        if has_pos and has_neg:
            out.append(a)
    return out


def sample_triplets(frames: int, window: int, count: int, seed) -> list[tuple[int, int, int]]:
    """Uniform (anchor, positive, negative) frame triples, reproducible from seed."""
    if not 1 <= window < frames:
        raise ValueError(f"window must satisfy 1 <= w < L, got w={window} L={frames}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    anchors = valid_anchors(frames, window)
    if not anchors:
        raise ValueError(
            f"no frame has a negative farther than {window} frames in a {frames}-frame video"
        )
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    triples = []
    for _ in range(count):
        a = int(anchors[rng.integers(len(anchors))])
        pos = [p for p in range(1, frames + 1) if 0 < abs(a - p) <= window]
        neg = [n for n in range(1, frames + 1) if abs(a - n) > window]
        triples.append((a, int(pos[rng.integers(len(pos))]), int(neg[rng.integers(len(neg))])))
    return triples


def triplet_loss(z_t, triples: Sequence[tuple[int, int, int]], margin: float) -> Tensor:
    """Mean hinge max(||za-zp||^2 + margin - ||za-zn||^2, 0) over the triples."""
    t = z_t if isinstance(z_t, Tensor) else Tensor(np.asarray(z_t, dtype=np.float32))
    if t.ndim != 2:
        raise ad.ShapeError(f"transient matrix must be 2-D, got {t.shape}")
    frames = t.shape[1]
    m = Tensor(np.asarray(margin, dtype=np.float32))
    total = None
    for a, p, n in triples:
        if not all(1 <= i <= frames for i in (a, p, n)):
            raise ValueError(f"triple {(a, p, n)} out of range 1..{frames}")
        za = ad.take(t, a - 1, axis=1)
        d_ap = ad.sq_l2(ad.sub(za, ad.take(t, p - 1, axis=1)))
        d_an = ad.sq_l2(ad.sub(za, ad.take(t, n - 1, axis=1)))
        hinge = ad.relu(ad.add(ad.sub(d_ap, d_an), m))
        total = hinge if total is None else ad.add(total, hinge)
    return ad.scale(total, 1.0 / len(triples))


def total_loss(video, generated, z_t, k: int, triples, cfg: LossConfig):
    """Weighted sum of the three terms plus a per-term breakdown for logging.

    The triplet term touches only the transient columns, so generator
    weights and the static code never receive gradient from it; passing
    ``triples=None`` omits the term entirely (generator-only stages).
    """
    rec = reconstruction_loss(video, generated, cfg.levels)
    stat = static_loss(video, generated, k, cfg.levels)
    total = ad.add(rec, ad.scale(stat, cfg.lambda_static))
    trip_val = 0.0
    if triples is not None:
        trip = triplet_loss(z_t, triples, cfg.margin)
        total = ad.add(total, ad.scale(trip, cfg.lambda_triplet))
        trip_val = trip.item()
    breakdown = {
        "rec": rec.item(),
        "static": stat.item(),
        "triplet": trip_val,
        "total": total.item(),
    }
    return total, breakdown
