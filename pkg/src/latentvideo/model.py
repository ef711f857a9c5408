"""Frame generator and recurrent transient-code network.

The generator projects a code of size ``d_s + d_t`` to a coarse feature
map and upsamples it through three stride-2 transposed convolutions
(kernel 4, padding 1), halving channels at each step; the output tanh is
rescaled to [0, 1]. The transient path is a single-layer GRU over the
columns of the transient matrix, followed by a linear head back to
``d_t`` so the generator input width does not depend on the hidden size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

WEIGHT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    d_s: int = 8
    d_t: int = 12
    frames: int = 8
    channels: int = 3
    height: int = 16
    width: int = 16
    base_ch: int = 16
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.d_s < 1 or self.d_t < 1:
            raise ValueError(f"latent dims must be >= 1, got ({self.d_s}, {self.d_t})")
        if self.frames < 2:
            raise ValueError(f"need at least 2 frames, got {self.frames}")
        if self.height % 8 or self.width % 8:
            raise ValueError(f"frame extents must be divisible by 8, got {self.height}x{self.width}")
        if self.channels < 1 or self.base_ch < 1 or self.hidden < 1:
            raise ValueError("channels, base_ch and hidden must be >= 1")

    @property
    def code_dim(self) -> int:
        return self.d_s + self.d_t

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass
class GeneratorParams:
    coarse_hw: tuple[int, int]  # spatial extent of the projected map (H/8, W/8)
    proj_w: np.ndarray  # (4*base_ch*(H/8)*(W/8), D)
    proj_b: np.ndarray
    up1_w: np.ndarray  # (4b, 2b, 4, 4)
    up1_b: np.ndarray
    up2_w: np.ndarray  # (2b, b, 4, 4)
    up2_b: np.ndarray
    up3_w: np.ndarray  # (b, C, 4, 4)
    up3_b: np.ndarray

    def named(self, prefix: str = "gen") -> Iterator[tuple[str, np.ndarray]]:
        for field in ("proj_w", "proj_b", "up1_w", "up1_b", "up2_w", "up2_b", "up3_w", "up3_b"):
            yield f"{prefix}.{field}", getattr(self, field)

    @property
    def code_dim(self) -> int:
        return self.proj_w.shape[1]


@dataclass
class RnnParams:
    w_z: np.ndarray  # update gate, (hidden, d_t)
    u_z: np.ndarray
    b_z: np.ndarray
    w_r: np.ndarray  # reset gate
    u_r: np.ndarray
    b_r: np.ndarray
    w_c: np.ndarray  # candidate
    u_c: np.ndarray
    b_c: np.ndarray
    out_w: np.ndarray  # head back to d_t, (d_t, hidden)
    out_b: np.ndarray

    def named(self, prefix: str = "rnn") -> Iterator[tuple[str, np.ndarray]]:
        for field in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_c", "u_c", "b_c", "out_w", "out_b"):
            yield f"{prefix}.{field}", getattr(self, field)

    @property
    def d_t(self) -> int:
        return self.w_z.shape[1]

    @property
    def hidden(self) -> int:
        return self.w_z.shape[0]


def init_params(config: ModelConfig) -> tuple[GeneratorParams, RnnParams]:
    """Gaussian(0, 0.02) weights, zero biases, reproducible from config.seed."""
    rng = np.random.default_rng(config.seed)
    f32 = np.float32

    def w(*shape):
        return rng.normal(0.0, WEIGHT_STD, shape).astype(f32)

    def b(n):
        return np.zeros(n, dtype=f32)

    b4, b2, b1 = config.base_ch * 4, config.base_ch * 2, config.base_ch
    h0, w0 = config.height // 8, config.width // 8
    gen = GeneratorParams(
        coarse_hw=(h0, w0),
        proj_w=w(b4 * h0 * w0, config.code_dim),
        proj_b=b(b4 * h0 * w0),
        up1_w=w(b4, b2, 4, 4),
        up1_b=b(b2),
        up2_w=w(b2, b1, 4, 4),
        up2_b=b(b1),
        up3_w=w(b1, config.channels, 4, 4),
        up3_b=b(config.channels),
    )
    h = config.hidden
    rnn = RnnParams(
        w_z=w(h, config.d_t), u_z=w(h, h), b_z=b(h),
        w_r=w(h, config.d_t), u_r=w(h, h), b_r=b(h),
        w_c=w(h, config.d_t), u_c=w(h, h), b_c=b(h),
        out_w=w(config.d_t, h), out_b=b(config.d_t),
    )
    return gen, rnn


def param_count(config: ModelConfig) -> int:
    gen, rnn = init_params(config)
    return sum(a.size for _, a in gen.named()) + sum(a.size for _, a in rnn.named())


def as_leaves(gen: GeneratorParams, rnn: RnnParams) -> dict[str, Tensor]:
    """Wrap every parameter array as a named leaf tensor for one graph build."""
    leaves = {name: Tensor(a) for name, a in gen.named()}
    leaves.update({name: Tensor(a) for name, a in rnn.named()})
    return leaves


def _gru_step(p: Mapping[str, Tensor], x: Tensor, h: Tensor) -> Tensor:
    z = ad.sigmoid(ad.add(ad.add(ad.matmul(p["rnn.w_z"], x), ad.matmul(p["rnn.u_z"], h)), p["rnn.b_z"]))
    r = ad.sigmoid(ad.add(ad.add(ad.matmul(p["rnn.w_r"], x), ad.matmul(p["rnn.u_r"], h)), p["rnn.b_r"]))
    c = ad.tanh(ad.add(ad.add(ad.matmul(p["rnn.w_c"], x), ad.matmul(p["rnn.u_c"], ad.mul(r, h))), p["rnn.b_c"]))
    one = Tensor(np.ones(z.shape, dtype=np.float32))
    return ad.add(ad.mul(ad.sub(one, z), c), ad.mul(z, h))


def transient_codes(leaves: Mapping[str, Tensor], z_t: Tensor) -> list[Tensor]:
    """Per-frame generator inputs from the transient matrix (columns in frame order)."""
    if z_t.ndim != 2:
        raise ad.ShapeError(f"transient matrix must be 2-D, got {z_t.shape}")
    hidden = leaves["rnn.u_z"].shape[0]
    h = Tensor(np.zeros(hidden, dtype=np.float32))
    codes = []
    for i in range(z_t.shape[1]):
        h = _gru_step(leaves, ad.take(z_t, i, axis=1), h)
        codes.append(ad.add(ad.matmul(leaves["rnn.out_w"], h), leaves["rnn.out_b"]))
    return codes


def decode_frames(
    leaves: Mapping[str, Tensor], z_s: Tensor, codes: list[Tensor], coarse_hw: tuple[int, int]
) -> Tensor:
    """Generator forward for a whole clip; returns frames (L, C, H, W) in [0, 1]."""
    d = leaves["gen.proj_w"].shape[1]
    if z_s.ndim != 1 or codes[0].ndim != 1 or z_s.shape[0] + codes[0].shape[0] != d:
        raise ad.ShapeError(
            f"code dims {z_s.shape}+{codes[0].shape} do not concatenate to generator input ({d},)"
        )
    rows = [ad.concat([z_s, c]) for c in codes]
    zmat = ad.stack(rows, axis=0)
    u = ad.tanh(ad.bias_add(ad.matmul(zmat, ad.transpose(leaves["gen.proj_w"])), leaves["gen.proj_b"]))
    b4 = leaves["gen.up1_w"].shape[0]
    x = ad.reshape(u, (len(rows), b4, coarse_hw[0], coarse_hw[1]))
    x = ad.tanh(ad.bias_add(ad.conv_transpose2d(x, leaves["gen.up1_w"], 2, 1), leaves["gen.up1_b"]))
    x = ad.tanh(ad.bias_add(ad.conv_transpose2d(x, leaves["gen.up2_w"], 2, 1), leaves["gen.up2_b"]))
    x = ad.bias_add(ad.conv_transpose2d(x, leaves["gen.up3_w"], 2, 1), leaves["gen.up3_b"])
    half = Tensor(np.full(x.shape, 0.5, dtype=np.float32))
    return ad.add(ad.scale(ad.tanh(x), 0.5), half)


def gru_sequence(rnn: RnnParams, z_t: np.ndarray) -> np.ndarray:
    """Map a d_t x L transient matrix to the d_t x L generator-input codes."""
    z_t = np.asarray(z_t, dtype=np.float32)
    if z_t.ndim != 2 or z_t.shape[0] != rnn.d_t:
        raise ad.ShapeError(f"expected ({rnn.d_t}, L) transient matrix, got {z_t.shape}")
    leaves = {name: Tensor(a) for name, a in rnn.named()}
    codes = transient_codes(leaves, Tensor(z_t))
    return np.stack([c.data for c in codes], axis=1)


def generate_frame(gen: GeneratorParams, z_s: np.ndarray, r_i: np.ndarray) -> np.ndarray:
    """One frame from a static vector and one transient code."""
    z_s = np.asarray(z_s, dtype=np.float32)
    r_i = np.asarray(r_i, dtype=np.float32)
    leaves = {name: Tensor(a) for name, a in gen.named()}
    out = decode_frames(leaves, Tensor(z_s), [Tensor(r_i)], gen.coarse_hw)
    return out.data[0]


def generate_video(gen: GeneratorParams, rnn: RnnParams, code) -> np.ndarray:
    """Decode a latent code (``.z_s`` vector, ``.z_t`` matrix) to (L, C, H, W) frames."""
    r = gru_sequence(rnn, code.z_t)
    leaves = {name: Tensor(a) for name, a in gen.named()}
    codes = [Tensor(np.ascontiguousarray(r[:, i])) for i in range(r.shape[1])]
    z_s = Tensor(np.asarray(code.z_s, dtype=np.float32))
    return decode_frames(leaves, z_s, codes, gen.coarse_hw).data
