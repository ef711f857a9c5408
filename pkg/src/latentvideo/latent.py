"""The latent dictionary: creation, constraints, composition, persistence.

A video's code is one static vector ``z_s`` (size ``d_s``) plus a
transient matrix ``z_t`` (``d_t`` by number of frames). Entries live in a
named dictionary whose sharing scheme maps each training video to one
static and one transient entry. Every entry is kept on the unit ball,
vector-wise: ``z_s`` and each column of ``z_t`` have norm at most 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .serialization import FormatError, Reader, f32_block, json_block, u32

MAGIC = b"NVLD"
VERSION = 1

SHARING_MODES = ("per-video", "per-class", "global")


class UnknownEntryError(KeyError):
    """A requested dictionary entry name does not exist."""


@dataclass(frozen=True)
class SharingScheme:
    static: str = "per-video"
    transient: str = "per-class"

    def __post_init__(self):
        for part in (self.static, self.transient):
            if part not in SHARING_MODES:
                raise ValueError(f"unknown sharing mode {part!r}, expected one of {SHARING_MODES}")

    @staticmethod
    def _key(mode: str, part: str, video_id: str, class_name: str) -> str:
        if mode == "per-video":
            return video_id
        if mode == "per-class":
            return class_name
        return part  # global: one shared entry

    def static_key(self, video_id: str, class_name: str) -> str:
        return self._key(self.static, "static", video_id, class_name)

    def transient_key(self, video_id: str, class_name: str) -> str:
        return self._key(self.transient, "transient", video_id, class_name)


@dataclass
class LatentCode:
    z_s: np.ndarray  # (d_s,)
    z_t: np.ndarray  # (d_t, L)


@dataclass
class LatentDictionary:
    d_s: int
    d_t: int
    frames: int
    scheme: SharingScheme
    static: dict[str, np.ndarray] = field(default_factory=dict)
    transient: dict[str, np.ndarray] = field(default_factory=dict)

    def compose(self, static_name: str, transient_name: str) -> LatentCode:
        """Pair a named static vector with a named transient matrix."""
        if static_name not in self.static:
            raise UnknownEntryError(f"unknown static entry {static_name!r}")
        if transient_name not in self.transient:
            raise UnknownEntryError(f"unknown transient entry {transient_name!r}")
        return LatentCode(self.static[static_name], self.transient[transient_name])


# Norms within one float32 ulp of 1 are left alone: dividing by 1 + O(1e-8)
# cannot change any stored value, and skipping it makes projection exactly
# idempotent. The ball constraint therefore holds to float32 resolution.
_BALL_SLACK = 1.0 + 1e-7


def project_unit_ball(v: np.ndarray) -> np.ndarray:
    """Rescale a vector by max(1, ||v||); in-ball vectors pass through unchanged."""
    out = np.asarray(v, dtype=np.float32)
    if out.ndim != 1:
        raise ValueError(f"expected a vector, got shape {out.shape}")
    n = float(np.linalg.norm(out.astype(np.float64)))
    if n > _BALL_SLACK:
        out = (out / n).astype(np.float32)
    return out


def project_columns(m: np.ndarray) -> np.ndarray:
    """Unit-ball projection applied to every column of a matrix."""
    out = np.asarray(m, dtype=np.float32)
    if out.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {out.shape}")
    norms = np.linalg.norm(out.astype(np.float64), axis=0)
    if np.any(norms > _BALL_SLACK):
        out = (out / np.maximum(1.0, norms)).astype(np.float32)
    return out


def init_latents(
    seed,
    dims: tuple[int, int, int],
    assignments: Sequence[tuple[str, str, str]],
    scheme: SharingScheme,
) -> LatentDictionary:
    """Fresh Gaussian dictionary for (video_id, static_class, transient_class) rows.

    Entries are drawn with per-part std 1/sqrt(dim), so a fresh vector has
    unit expected squared norm, then projected onto the unit ball.
    """
    d_s, d_t, frames = dims
    if d_s < 1 or d_t < 1 or frames < 1:
        raise ValueError(f"dims must be positive, got {dims}")
    if not assignments:
        raise ValueError("need at least one video assignment")
    seen = set()
    static_keys: list[str] = []
    transient_keys: list[str] = []
    for video_id, static_class, transient_class in assignments:
        if video_id in seen:
            raise ValueError(f"duplicate video id {video_id!r}")
        seen.add(video_id)
        sk = scheme.static_key(video_id, static_class)
        tk = scheme.transient_key(video_id, transient_class)
        if sk not in static_keys:
            static_keys.append(sk)
        if tk not in transient_keys:
            transient_keys.append(tk)

    rng = np.random.default_rng(seed)
    out = LatentDictionary(d_s=d_s, d_t=d_t, frames=frames, scheme=scheme)
    for key in static_keys:
        vec = rng.normal(0.0, 1.0 / np.sqrt(d_s), d_s).astype(np.float32)
        out.static[key] = project_unit_ball(vec)
    for key in transient_keys:
        mat = rng.normal(0.0, 1.0 / np.sqrt(d_t), (d_t, frames)).astype(np.float32)
        out.transient[key] = project_columns(mat)
    return out


# ---------------------------------------------------------------------------
# low-rank projection
#
# Best rank-r approximation via the top eigenvectors of the smaller Gram
# matrix; the symmetric eigenproblem is solved with cyclic Jacobi sweeps
# (off-diagonal Frobenius mass below 1e-10). Matrices here are tiny, so
# the quadratic convergence of Jacobi settles in a handful of sweeps.


def _jacobi_eigh(a: np.ndarray, tol: float = 1e-10, max_sweeps: int = 60):
    a = np.array(a, dtype=np.float64)
    n = a.shape[0]
    v = np.eye(n)
    for _ in range(max_sweeps):
        off = np.sqrt(max(np.sum(np.square(a)) - np.sum(np.square(np.diag(a))), 0.0))
        if off < tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) < tol / (n * n):
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p, rot_q = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * rot_p - s * rot_q
                a[:, q] = s * rot_p + c * rot_q
                rot_p, rot_q = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * rot_p - s * rot_q
                a[q, :] = s * rot_p + c * rot_q
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    evals = np.diag(a).copy()
    order = np.argsort(evals)[::-1]
    return evals[order], v[:, order]


def low_rank_project(z_t: np.ndarray, rank: int) -> np.ndarray:
    """Best Frobenius rank-``rank`` approximation of a transient matrix."""
    m = np.asarray(z_t, dtype=np.float32)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {m.shape}")
    d, l = m.shape
    if not 1 <= rank <= min(d, l):
        raise ValueError(f"rank must be in [1, {min(d, l)}], got {rank}")
    if rank == min(d, l):
        return m.copy()
    m64 = m.astype(np.float64)
    if d <= l:
        _, vecs = _jacobi_eigh(m64 @ m64.T)
        u = vecs[:, :rank]
        out = u @ (u.T @ m64)
    else:
        _, vecs = _jacobi_eigh(m64.T @ m64)
        v = vecs[:, :rank]
        out = (m64 @ v) @ v.T
    return out.astype(np.float32)


def interpolate_transient(z_a: np.ndarray, z_b: np.ndarray, k: int) -> list[np.ndarray]:
    """k points along the segment from z_a to z_b: z_a + (n/k)(z_b - z_a), n=1..k."""
    z_a = np.asarray(z_a, dtype=np.float32)
    z_b = np.asarray(z_b, dtype=np.float32)
    if z_a.shape != z_b.shape:
        raise ValueError(f"endpoint shapes differ: {z_a.shape} vs {z_b.shape}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    delta = z_b - z_a
    return [(z_a + (n / k) * delta).astype(np.float32) for n in range(1, k + 1)]


def compose(dictionary: LatentDictionary, static_name: str, transient_name: str) -> LatentCode:
    return dictionary.compose(static_name, transient_name)


# ---------------------------------------------------------------------------
# persistence (NVLD container)


def dictionary_bytes(d: LatentDictionary) -> bytes:
    manifest = {
        "d_s": d.d_s,
        "d_t": d.d_t,
        "l": d.frames,
        "scheme": {"static": d.scheme.static, "transient": d.scheme.transient},
        "static_names": list(d.static),
        "transient_names": list(d.transient),
    }
    parts = [MAGIC, u32(VERSION), json_block(manifest)]
    for name in manifest["static_names"]:
        parts.append(f32_block(d.static[name]))
    for name in manifest["transient_names"]:
        # column-major by frame: one frame's code after another
        parts.append(f32_block(d.transient[name].T))
    return b"".join(parts)


def save_dictionary(d: LatentDictionary, path) -> None:
    Path(path).write_bytes(dictionary_bytes(d))


def read_dictionary(r: Reader) -> LatentDictionary:
    r.magic(MAGIC)
    r.version(VERSION)
    manifest = r.json("dictionary manifest")
    try:
        d_s, d_t, frames = int(manifest["d_s"]), int(manifest["d_t"]), int(manifest["l"])
        scheme = SharingScheme(manifest["scheme"]["static"], manifest["scheme"]["transient"])
        static_names = list(manifest["static_names"])
        transient_names = list(manifest["transient_names"])
    except (KeyError, TypeError, ValueError) as e:
        r.fail(f"invalid dictionary manifest ({e})")
    out = LatentDictionary(d_s=d_s, d_t=d_t, frames=frames, scheme=scheme)
    for name in static_names:
        out.static[name] = r.f32(d_s, f"static entry {name!r}")
    for name in transient_names:
        flat = r.f32(d_t * frames, f"transient entry {name!r}")
        out.transient[name] = np.ascontiguousarray(flat.reshape(frames, d_t).T)
    return out


def load_dictionary(path) -> LatentDictionary:
    r = Reader(Path(path).read_bytes(), name=str(path))
    out = read_dictionary(r)
    r.expect_end()
    return out
