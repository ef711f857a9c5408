"""Motion and frame consistency scoring.

The motion score compares the averaged consecutive frame-feature
difference of two video sets in log scale; features come from a
fixed-seed random two-layer convolutional map so the score needs no
pretrained weights (the extractor is pluggable: anything exposing
``features(frames) -> (N, F)`` works). The frame score is the mean SSIM
of every frame against its video's first frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import _conv_forward

MCS_EPS = 1e-12
MCS_FLOOR = -12.0

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class FeatureExtractor:
    """Random 3->16->32 channel stride-2 conv stack with ReLU, flattened.

    Weights are fixed at construction and fully determined by the seed.
    """

    def __init__(self, seed: int = 0, channels: int = 3):
        self.seed = int(seed)
        rng = np.random.default_rng(self.seed)

        def he(out_ch, in_ch):
            std = np.sqrt(2.0 / (in_ch * 9))
            return rng.normal(0.0, std, (out_ch, in_ch, 3, 3)).astype(np.float32)

        self.w1 = he(16, channels)
        self.w2 = he(32, 16)

    def features(self, frames: np.ndarray) -> np.ndarray:
        """Flattened activations for a batch of (N, C, H, W) frames."""
        x = np.asarray(frames, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        x = np.maximum(_conv_forward(x, self.w1, stride=2, padding=1), 0.0)
        x = np.maximum(_conv_forward(x, self.w2, stride=2, padding=1), 0.0)
        return x.reshape(x.shape[0], -1)


def motion_summary(videos: Sequence[np.ndarray], extractor: FeatureExtractor) -> np.ndarray:
    """Mean consecutive frame-feature difference over all (video, step) pairs."""
    if len(videos) == 0:
        raise ValueError("need at least one video")
    diffs = []
    for v in videos:
        v = np.asarray(v)
        if v.ndim != 4 or v.shape[0] < 2:
            raise ValueError(f"each video needs >= 2 frames of shape (C,H,W), got {v.shape}")
        feats = extractor.features(v).astype(np.float64)
        diffs.append(np.diff(feats, axis=0))
    return np.concatenate(diffs, axis=0).mean(axis=0)


def mcs(real_videos, gen_videos, extractor: FeatureExtractor) -> float:
    """log10 squared distance between the two motion summaries (floored at -12)."""
    f = motion_summary(real_videos, extractor)
    f_hat = motion_summary(gen_videos, extractor)
    d2 = float(np.sum((f - f_hat) ** 2))
    if d2 <= MCS_EPS:
        return MCS_FLOOR
    return float(np.log10(d2))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return (w / w.sum()).astype(np.float64)


_WINDOW = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)


def _local_mean(x: np.ndarray) -> np.ndarray:
    # valid-mode windowed sums via sliding windows (frames here are tiny)
    win = np.lib.stride_tricks.sliding_window_view(x, (SSIM_WINDOW, SSIM_WINDOW))
    return np.tensordot(win, _WINDOW, axes=((2, 3), (0, 1)))


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Windowed SSIM (7x7 Gaussian, sigma 1.5, dynamic range 1), channel-averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError(f"expected matching (C,H,W) frames, got {a.shape} vs {b.shape}")
    if a.shape[1] < SSIM_WINDOW or a.shape[2] < SSIM_WINDOW:
        raise ValueError(f"frame {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    values = []
    for c in range(a.shape[0]):
        mu_a = _local_mean(a[c])
        mu_b = _local_mean(b[c])
        var_a = _local_mean(a[c] * a[c]) - mu_a * mu_a
        var_b = _local_mean(b[c] * b[c]) - mu_b * mu_b
        cov = _local_mean(a[c] * b[c]) - mu_a * mu_b
        num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
        den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
        values.append(np.mean(num / den))
    return float(np.mean(values))


def ssim_trace(video: np.ndarray) -> list[float]:
    """SSIM of frames 2..L against frame 1."""
    video = np.asarray(video)
    if video.ndim != 4 or video.shape[0] < 2:
        raise ValueError(f"need a (L>=2, C, H, W) video, got {video.shape}")
    first = video[0]
    return [ssim(first, video[i]) for i in range(1, video.shape[0])]


def fcs(videos: Sequence[np.ndarray]) -> float:
    """Mean over videos of the mean first-frame SSIM trace."""
    if len(videos) == 0:
        raise ValueError("need at least one video")
    return float(np.mean([np.mean(ssim_trace(v)) for v in videos]))


@dataclass
class MetricsReport:
    mcs: float
    fcs: float
    n_real: int
    n_gen: int
    extractor_seed: int
    ssim_traces: list[list[float]] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "mcs": self.mcs,
            "fcs": self.fcs,
            "n_real": self.n_real,
            "n_gen": self.n_gen,
            "extractor_seed": self.extractor_seed,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


def evaluate(real_videos, gen_videos, extractor: FeatureExtractor) -> MetricsReport:
    """Full report: motion score of gen vs real, frame score and traces of gen."""
    traces = [ssim_trace(v) for v in gen_videos]
    return MetricsReport(
        mcs=mcs(real_videos, gen_videos, extractor),
        fcs=float(np.mean([np.mean(t) for t in traces])),
        n_real=len(real_videos),
        n_gen=len(gen_videos),
        extractor_seed=extractor.seed,
        ssim_traces=traces,
    )
