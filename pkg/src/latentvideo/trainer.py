"""Two-stage alternating optimization of generator, recurrent net and latents.

Every epoch walks the videos in a seed-shuffled order. Stage 1 updates
only the generator weights (Adam) on the reconstruction + random-frame
objective; stage 2 jointly updates the video's latent entries
(momentum SGD, followed by unit-ball and optional low-rank projection)
and the recurrent weights (Adam) on the full objective including the
triplet term. Warm-up epochs run stage 1 alone. Everything is a pure
function of (seed, data, config): checkpoints capture the whole state,
including the RNG, so a resumed run is bit-identical to an uninterrupted
one.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import losses as losses_mod
from . import model as model_mod
from .autodiff import Tensor
from .latent import (
    LatentDictionary,
    SharingScheme,
    dictionary_bytes,
    init_latents,
    low_rank_project,
    project_columns,
    project_unit_ball,
    read_dictionary,
)
from .losses import LossConfig
from .model import GeneratorParams, ModelConfig, RnnParams
from .serialization import FormatError, Reader, f32_block, json_block, u32, u64_block

MAGIC = b"NVCK"
VERSION = 1

_U64 = (1 << 64) - 1


class TrainingDiverged(RuntimeError):
    """Loss or gradients went non-finite; carries the last good checkpoint."""

    def __init__(self, message: str, last_good: "Checkpoint | None" = None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    warmup_epochs: int = 5
    stage1_steps: int = 1
    stage2_steps: int = 1
    lr_gen: float = 1e-2
    lr_rnn: float = 1e-2
    lr_latent: float = 0.1
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    momentum: float = 0.9
    loss: LossConfig = field(default_factory=LossConfig)
    rank: int | None = None
    seed: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.warmup_epochs < 0:
            raise ValueError(f"warmup_epochs must be >= 0, got {self.warmup_epochs}")
        if self.stage1_steps < 1 or self.stage2_steps < 1:
            raise ValueError("per-stage step counts must be >= 1")
        for name in ("lr_gen", "lr_rnn", "lr_latent"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0 (0 freezes the group)")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.rank is not None and self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


@dataclass
class TrainingVideo:
    video_id: str
    static_class: str
    transient_class: str
    frames: np.ndarray  # (L, C, H, W) in [0, 1]


def training_set_from_manifest(manifest, clips: np.ndarray) -> list[TrainingVideo]:
    """Pair non-held-out manifest entries with their clips, in file order."""
    entries = manifest.train_entries()
    if len(entries) != len(clips):
        raise ValueError(f"{len(entries)} training entries but {len(clips)} clips")
    return [
        TrainingVideo(e.video_id, e.identity.name, e.motion.name, np.asarray(c, np.float32))
        for e, c in zip(entries, clips)
    ]


def _check_finite(arr: np.ndarray, what: str):
    if not np.all(np.isfinite(arr)):
        raise TrainingDiverged(f"non-finite {what}")


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[np.ndarray, AdamState]:
    """Standard bias-corrected Adam update; rejects non-finite gradients."""
    if param.shape != grad.shape:
        raise ad.ShapeError(f"adam_step: param {param.shape} vs grad {grad.shape}")
    _check_finite(grad, "gradient in adam_step")
    t = state.t + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * np.square(grad)
    m_hat = m / (1 - beta1**t)
    v_hat = v / (1 - beta2**t)
    new_param = (param - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(np.float32)
    return new_param, AdamState(m=m, v=v, t=t)


def sgd_momentum_step(
    latent: np.ndarray,
    grad: np.ndarray,
    velocity: np.ndarray,
    lr: float,
    momentum: float = 0.9,
) -> tuple[np.ndarray, np.ndarray]:
    """v <- mu*v + g; x <- x - lr*v; then unit-ball projection (per column for matrices)."""
    if latent.shape != grad.shape:
        raise ad.ShapeError(f"sgd_momentum_step: latent {latent.shape} vs grad {grad.shape}")
    _check_finite(grad, "gradient in sgd_momentum_step")
    velocity = (momentum * velocity + grad).astype(np.float32)
    updated = (latent - lr * velocity).astype(np.float32)
    projected = project_unit_ball(updated) if updated.ndim == 1 else project_columns(updated)
    return projected, velocity


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    gen: GeneratorParams
    rnn: RnnParams
    dictionary: LatentDictionary
    adam: dict[str, AdamState]
    vel_static: dict[str, np.ndarray]
    vel_transient: dict[str, np.ndarray]
    epoch: int
    rng_state: dict
    history: list[tuple[float, float, float, float]]


class Trainer:
    """Mutable training state; ``run`` drives the epoch loop."""

    def __init__(
        self,
        dataset: Sequence[TrainingVideo],
        model_config: ModelConfig,
        cfg: TrainConfig,
        scheme: SharingScheme = SharingScheme(),
        start: Checkpoint | None = None,
    ):
        if not dataset:
            raise ValueError("dataset is empty")
        for video in dataset:
            if video.frames.shape != (model_config.frames,) + model_config.frame_shape:
                raise ValueError(
                    f"clip {video.video_id!r} has shape {video.frames.shape}, expected "
                    f"{(model_config.frames,) + model_config.frame_shape}"
                )
        if cfg.rank is not None and cfg.rank > min(model_config.d_t, model_config.frames):
            raise ValueError(f"rank {cfg.rank} exceeds min(d_t, frames)")
        self.dataset = list(dataset)
        self.model_config = model_config
        self.cfg = cfg
        if start is None:
            self.gen, self.rnn = model_mod.init_params(model_config)
            seq = np.random.SeedSequence(cfg.seed)
            latent_seed, loop_seed = seq.spawn(2)
            assignments = [(v.video_id, v.static_class, v.transient_class) for v in dataset]
            dims = (model_config.d_s, model_config.d_t, model_config.frames)
            self.dictionary = init_latents(latent_seed, dims, assignments, scheme)
            self.rng = np.random.default_rng(loop_seed)
            self.adam = {
                name: AdamState(np.zeros_like(a), np.zeros_like(a))
                for name, a in list(self.gen.named()) + list(self.rnn.named())
            }
            self.vel_static = {k: np.zeros_like(v) for k, v in self.dictionary.static.items()}
            self.vel_transient = {k: np.zeros_like(v) for k, v in self.dictionary.transient.items()}
            self.epoch = 0
            self.history: list[tuple[float, float, float, float]] = []
        else:
            if start.model_config != model_config:
                raise ValueError("checkpoint model config does not match")
            self.gen = dataclasses.replace(start.gen)
            self.rnn = dataclasses.replace(start.rnn)
            self.dictionary = dataclasses.replace(
                start.dictionary,
                static=dict(start.dictionary.static),
                transient=dict(start.dictionary.transient),
            )
            self.adam = dict(start.adam)
            self.vel_static = dict(start.vel_static)
            self.vel_transient = dict(start.vel_transient)
            self.rng = np.random.default_rng()
            self.rng.bit_generator.state = start.rng_state
            self.epoch = start.epoch
            self.history = list(start.history)
        # resolve each video's dictionary keys once
        self._keys = [
            (
                self.dictionary.scheme.static_key(v.video_id, v.static_class),
                self.dictionary.scheme.transient_key(v.video_id, v.transient_class),
            )
            for v in self.dataset
        ]

    # -- single optimization steps ------------------------------------------

    def _build_graph(self, video: TrainingVideo, sk: str, tk: str):
        leaves = model_mod.as_leaves(self.gen, self.rnn)
        z_s = Tensor(self.dictionary.static[sk])
        z_t = Tensor(self.dictionary.transient[tk])
        codes = model_mod.transient_codes(leaves, z_t)
        generated = model_mod.decode_frames(leaves, z_s, codes, self.gen.coarse_hw)
        return leaves, z_s, z_t, generated

    def _stage1_step(self, video: TrainingVideo, sk: str, tk: str) -> dict:
        """Generator-only update on the reconstruction + random-frame objective."""
        cfg = self.cfg
        k = int(self.rng.integers(1, video.frames.shape[0] + 1))
        leaves, _, z_t, generated = self._build_graph(video, sk, tk)
        loss, breakdown = losses_mod.total_loss(video.frames, generated, z_t, k, None, cfg.loss)
        if not np.isfinite(breakdown["total"]):
            raise TrainingDiverged(f"non-finite loss on {video.video_id!r} (stage 1)")
        gen_names = [name for name, _ in self.gen.named()]
        grads = ad.gradient(loss, {n: leaves[n] for n in gen_names})
        for name in gen_names:
            new, self.adam[name] = adam_step(
                getattr(self.gen, name.split(".")[1]),
                grads[name].data,
                self.adam[name],
                cfg.lr_gen,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            )
            setattr(self.gen, name.split(".")[1], new)
        return breakdown

    def _stage2_step(self, video: TrainingVideo, sk: str, tk: str) -> dict:
        """Joint latent + recurrent update on the full objective."""
        cfg = self.cfg
        frames = video.frames.shape[0]
        k = int(self.rng.integers(1, frames + 1))
        # clips too short to contain a frame beyond the window get no triplet term
        triples = None
        if frames - 1 > cfg.loss.window:
            triples = losses_mod.sample_triplets(frames, cfg.loss.window, cfg.loss.triplets, self.rng)
        leaves, z_s, z_t, generated = self._build_graph(video, sk, tk)
        loss, breakdown = losses_mod.total_loss(video.frames, generated, z_t, k, triples, cfg.loss)
        if not np.isfinite(breakdown["total"]):
            raise TrainingDiverged(f"non-finite loss on {video.video_id!r} (stage 2)")
        rnn_names = [name for name, _ in self.rnn.named()]
        params = {n: leaves[n] for n in rnn_names}
        params["z_s"] = z_s
        params["z_t"] = z_t
        grads = ad.gradient(loss, params)
        for name in rnn_names:
            new, self.adam[name] = adam_step(
                getattr(self.rnn, name.split(".")[1]),
                grads[name].data,
                self.adam[name],
                cfg.lr_rnn,
                cfg.adam_beta1,
                cfg.adam_beta2,
                cfg.adam_eps,
            )
            setattr(self.rnn, name.split(".")[1], new)
        new_s, self.vel_static[sk] = sgd_momentum_step(
            self.dictionary.static[sk], grads["z_s"].data, self.vel_static[sk],
            cfg.lr_latent, cfg.momentum,
        )
        self.dictionary.static[sk] = new_s
        new_t, self.vel_transient[tk] = sgd_momentum_step(
            self.dictionary.transient[tk], grads["z_t"].data, self.vel_transient[tk],
            cfg.lr_latent, cfg.momentum,
        )
        if cfg.rank is not None:
            # column rescaling cannot raise rank, so re-projecting onto the
            # ball keeps both constraints exact
            new_t = project_columns(low_rank_project(new_t, cfg.rank))
        self.dictionary.transient[tk] = new_t
        return breakdown

    # -- epoch loop -----------------------------------------------------------

    def train_epoch(self, warmup: bool) -> dict:
        order = self.rng.permutation(len(self.dataset))
        tallies: list[dict] = []
        for idx in order:
            video = self.dataset[int(idx)]
            sk, tk = self._keys[int(idx)]
            for _ in range(self.cfg.stage1_steps):
                bd1 = self._stage1_step(video, sk, tk)
            if not warmup:
                for _ in range(self.cfg.stage2_steps):
                    bd1 = self._stage2_step(video, sk, tk)
            tallies.append(bd1)
        return {key: float(np.mean([t[key] for t in tallies])) for key in tallies[0]}

    def snapshot(self) -> Checkpoint:
        return Checkpoint(
            model_config=self.model_config,
            train_config=self.cfg,
            gen=dataclasses.replace(self.gen),
            rnn=dataclasses.replace(self.rnn),
            dictionary=dataclasses.replace(
                self.dictionary,
                static=dict(self.dictionary.static),
                transient=dict(self.dictionary.transient),
            ),
            adam=dict(self.adam),
            vel_static=dict(self.vel_static),
            vel_transient=dict(self.vel_transient),
            epoch=self.epoch,
            rng_state=self.rng.bit_generator.state,
            history=list(self.history),
        )

    def run(self, checkpoint_dir=None) -> Checkpoint:
        cfg = self.cfg
        total = cfg.warmup_epochs + cfg.epochs
        last_good = self.snapshot() if self.epoch else None
        while self.epoch < total:
            try:
                stats = self.train_epoch(warmup=self.epoch < cfg.warmup_epochs)
            except TrainingDiverged as e:
                raise TrainingDiverged(str(e), last_good=last_good) from None
            self.history.append((stats["rec"], stats["static"], stats["triplet"], stats["total"]))
            self.epoch += 1
            last_good = self.snapshot()
            if (
                checkpoint_dir is not None
                and cfg.checkpoint_every
                and self.epoch % cfg.checkpoint_every == 0
                and self.epoch < total
            ):
                save_checkpoint(last_good, Path(checkpoint_dir) / f"epoch{self.epoch:05d}.nvck")
        return last_good if last_good is not None else self.snapshot()


def fit(
    dataset: Sequence[TrainingVideo],
    model_config: ModelConfig,
    cfg: TrainConfig,
    scheme: SharingScheme = SharingScheme(),
    start: Checkpoint | None = None,
    checkpoint_dir=None,
) -> Checkpoint:
    """Train for cfg.warmup_epochs + cfg.epochs epochs (continuing from ``start``)."""
    return Trainer(dataset, model_config, cfg, scheme=scheme, start=start).run(checkpoint_dir)


# ---------------------------------------------------------------------------
# checkpoint persistence (NVCK container)


def _rng_words(state: dict) -> list[int]:
    if state.get("bit_generator") != "PCG64":
        raise ValueError(f"unsupported bit generator {state.get('bit_generator')!r}")
    s, inc = state["state"]["state"], state["state"]["inc"]
    return [
        s & _U64,
        (s >> 64) & _U64,
        inc & _U64,
        (inc >> 64) & _U64,
        int(state["has_uint32"]) & _U64,
        int(state["uinteger"]) & _U64,
    ]


def _rng_state_from_words(words) -> dict:
    return {
        "bit_generator": "PCG64",
        "state": {"state": words[0] | (words[1] << 64), "inc": words[2] | (words[3] << 64)},
        "has_uint32": int(words[4]),
        "uinteger": int(words[5]),
    }


def _named_tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = list(ckpt.gen.named()) + list(ckpt.rnn.named())
    for name, _ in list(ckpt.gen.named()) + list(ckpt.rnn.named()):
        out.append((f"adam.m.{name}", ckpt.adam[name].m))
        out.append((f"adam.v.{name}", ckpt.adam[name].v))
    for key, v in ckpt.vel_static.items():
        out.append((f"vel.static.{key}", v))
    for key, v in ckpt.vel_transient.items():
        out.append((f"vel.transient.{key}", v))
    return out


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    tensors = _named_tensors(ckpt)
    train_cfg = dataclasses.asdict(ckpt.train_config)
    manifest = {
        "model_config": dataclasses.asdict(ckpt.model_config),
        "train_config": train_cfg,
        "epoch": ckpt.epoch,
        "adam_t": {name: st.t for name, st in ckpt.adam.items()},
        "tensors": [[name, list(a.shape)] for name, a in tensors],
        "history_rows": len(ckpt.history),
        "rng_words": 6,
    }
    parts = [MAGIC, u32(VERSION), dictionary_bytes(ckpt.dictionary), json_block(manifest)]
    parts.extend(f32_block(a) for _, a in tensors)
    parts.append(f32_block(np.asarray(ckpt.history, dtype=np.float32).reshape(-1)))
    parts.append(u64_block(_rng_words(ckpt.rng_state)))
    return b"".join(parts)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    r = Reader(Path(path).read_bytes(), name=str(path))
    r.magic(MAGIC)
    r.version(VERSION)
    dictionary = read_dictionary(r)
    manifest = r.json("checkpoint manifest")
    try:
        model_config = ModelConfig(**manifest["model_config"])
        tc = dict(manifest["train_config"])
        tc["loss"] = LossConfig(**tc["loss"])
        train_config = TrainConfig(**tc)
        epoch = int(manifest["epoch"])
        tensor_specs = [(str(n), tuple(s)) for n, s in manifest["tensors"]]
        adam_t = {str(k): int(v) for k, v in manifest["adam_t"].items()}
        history_rows = int(manifest["history_rows"])
    except (KeyError, TypeError, ValueError) as e:
        r.fail(f"invalid checkpoint manifest ({e})")

    arrays = {}
    for name, shape in tensor_specs:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arrays[name] = r.f32(count, f"tensor {name!r}").reshape(shape)
    history_flat = r.f32(history_rows * 4, "loss history")
    history = [tuple(float(x) for x in row) for row in history_flat.reshape(-1, 4)]
    rng_state = _rng_state_from_words(r.u64s(6, "rng state"))
    r.expect_end()

    ref_gen, ref_rnn = model_mod.init_params(model_config)
    try:
        gen_arrays = {n: arrays[n] for n, _ in ref_gen.named()}
        rnn_arrays = {n: arrays[n] for n, _ in ref_rnn.named()}
    except KeyError as e:
        raise FormatError(f"{path}: missing tensor {e} for the declared model config")
    for ref in (ref_gen, ref_rnn):
        for name, a in ref.named():
            if arrays[name].shape != a.shape:
                raise FormatError(
                    f"{path}: tensor {name!r} has shape {arrays[name].shape}, "
                    f"model config implies {a.shape}"
                )
    gen = GeneratorParams(
        coarse_hw=(model_config.height // 8, model_config.width // 8),
        **{n.split(".")[1]: gen_arrays[n] for n in gen_arrays},
    )
    rnn = RnnParams(**{n.split(".")[1]: rnn_arrays[n] for n in rnn_arrays})
    adam = {}
    for name, _ in list(gen.named()) + list(rnn.named()):
        adam[name] = AdamState(m=arrays[f"adam.m.{name}"], v=arrays[f"adam.v.{name}"], t=adam_t[name])
    vel_static = {
        name[len("vel.static."):]: arr for name, arr in arrays.items() if name.startswith("vel.static.")
    }
    vel_transient = {
        name[len("vel.transient."):]: arr
        for name, arr in arrays.items()
        if name.startswith("vel.transient.")
    }
    return Checkpoint(
        model_config=model_config,
        train_config=train_config,
        gen=gen,
        rnn=rnn,
        dictionary=dictionary,
        adam=adam,
        vel_static=vel_static,
        vel_transient=vel_transient,
        epoch=epoch,
        rng_state=rng_state,
        history=history,
    )
