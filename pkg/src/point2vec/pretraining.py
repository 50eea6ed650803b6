"""Masked latent prediction with an EMA teacher.

Two student modes share everything except how masked tokens are handled:

* ``point2vec``: the student encoder only sees visible tokens; a shallow
  decoder receives the student output plus a learned mask embedding at the
  masked slots and predicts the teacher targets.
* ``data2vec_pc``: masked tokens are replaced by the mask embedding and
  position embeddings are added to every token, so the student sees where
  the masked patches are.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np

from .backbone import EncoderConfig, TransformerEncoder
from .config import ModelConfig, PretrainConfig
from .data import augment_points
from .embedding import MiniPointNet, PositionalEncoder
from .geometry import squared_distances, tokenize
from .numerics import (
    AdamW,
    LrSchedule,
    Module,
    Parameter,
    Tensor,
    broadcast_to,
    concat,
    gather,
    lr_at,
    no_grad,
    trunc_normal,
    where,
)
from .numerics import functional as F
from .numerics.errors import NumericError, ParameterError, ShapeError

MODES = ("point2vec", "data2vec_pc")


# -- masking ----------------------------------------------------------------------
@dataclass
class MaskLayout:
    mask: np.ndarray  # (..., n) bool, True = masked
    strategy: str
    ratio: float
    seed: int | None = None

    @property
    def num_masked(self) -> int:
        return int(self.mask.reshape(-1, self.mask.shape[-1])[0].sum())

    @property
    def num_tokens(self) -> int:
        return self.mask.shape[-1]

    def masked_indices(self) -> np.ndarray:
        """(B, m) ascending masked token indices."""
        m = np.atleast_2d(self.mask)
        return np.stack([np.flatnonzero(row) for row in m])

    def visible_indices(self) -> np.ndarray:
        m = np.atleast_2d(self.mask)
        return np.stack([np.flatnonzero(~row) for row in m])


def mask_count(n: int, ratio: float) -> int:
    """round-half-up(ratio * n), clamped to [1, n - 1]."""
    return int(min(max(math.floor(ratio * n + 0.5), 1), n - 1))


def generate_mask(centers: np.ndarray, strategy: str, ratio: float, rng: np.random.Generator,
                  seed: int | None = None) -> MaskLayout:
    """Mask (n,) or batched (B, n) tokens by ``random`` or ``block`` strategy."""
    centers = np.asarray(centers)
    single = centers.ndim == 2
    batch = centers[None] if single else centers
    n = batch.shape[1]
    if n < 2:
        raise ParameterError(f"masking needs at least 2 tokens, got {n}")
    if strategy not in ("random", "block"):
        raise ParameterError(f"unknown mask strategy {strategy!r}")
    m = mask_count(n, ratio)
    mask = np.zeros((batch.shape[0], n), dtype=bool)
    for b in range(batch.shape[0]):
        if strategy == "random":
            mask[b, rng.choice(n, size=m, replace=False)] = True
        else:
            s = int(rng.integers(n))
            d = squared_distances(batch[b, s:s + 1], batch[b])[0]
            order = np.argsort(d, kind="stable")
            order = order[order != s]
            mask[b, s] = True
            mask[b, order[: m - 1]] = True
    return MaskLayout(mask[0] if single else mask, strategy, ratio, seed)


UNCOVERED, VISIBLE_ONLY, MASKED_ONLY, BOTH = 0, 1, 2, 3


@dataclass
class MaskCoverage:
    """Per-point tag: which kinds of patches (visible, masked) contain the point."""

    tags: np.ndarray  # (B, N) in {UNCOVERED, VISIBLE_ONLY, MASKED_ONLY, BOTH}

    def counts(self) -> dict[str, np.ndarray]:
        names = {"uncovered": UNCOVERED, "visible_only": VISIBLE_ONLY, "masked_only": MASKED_ONLY, "both": BOTH}
        return {k: (self.tags == v).sum(axis=-1) for k, v in names.items()}

    def fractions(self) -> dict[str, np.ndarray]:
        n = self.tags.shape[-1]
        return {k: c / n for k, c in self.counts().items()}


def mask_coverage(group_indices: np.ndarray, mask: np.ndarray, num_points: int) -> MaskCoverage:
    """Classify every input point by the masked / visible patches it belongs to.

    ``group_indices`` is (B, n, k) (or unbatched (n, k)), ``mask`` (B, n).
    """
    groups = np.asarray(group_indices)
    mask = np.asarray(mask, dtype=bool)
    if groups.ndim == 2:
        groups, mask = groups[None], mask[None]
    batch = groups.shape[0]
    in_masked = np.zeros((batch, num_points), dtype=bool)
    in_visible = np.zeros((batch, num_points), dtype=bool)
    for b in range(batch):
        in_masked[b, groups[b][mask[b]].ravel()] = True
        in_visible[b, groups[b][~mask[b]].ravel()] = True
    tags = in_visible.astype(np.int64) + 2 * in_masked.astype(np.int64)
    return MaskCoverage(tags)


# -- models -----------------------------------------------------------------------
def encoder_config(model: ModelConfig, depth: int | None = None, drop_path: float = 0.0) -> EncoderConfig:
    return EncoderConfig(depth=depth or model.depth, dim=model.dim, heads=model.heads, mlp_ratio=model.mlp_ratio,
                         drop_path=drop_path, qkv_bias=model.qkv_bias)


class PointEncoder(Module):
    """Patch embedding + position embedding + Transformer encoder (the part fine-tuning keeps)."""

    def __init__(self, model: ModelConfig, rng: np.random.Generator, drop_path: float = 0.0):
        self.patch_embed = MiniPointNet(rng, model.embed_first, model.embed_second)
        self.pos_encoder = PositionalEncoder(rng, model.dim, model.pos_hidden)
        self.encoder = TransformerEncoder(encoder_config(model, drop_path=drop_path), rng)

    def embed(self, patches, centers) -> tuple[Tensor, Tensor]:
        return self.patch_embed(patches), self.pos_encoder(centers)

    def __call__(self, patches, centers, training: bool = False, rng=None) -> list[Tensor]:
        tokens, pos = self.embed(patches, centers)
        return self.encoder(tokens, pos, training, rng)


class PretrainModel(Module):
    """Student encoder, mask embedding and (point2vec mode) decoder."""

    def __init__(self, model: ModelConfig, mode: str, rng: np.random.Generator, decoder_depth: int | None = 4,
                 drop_path: float = 0.0):
        if mode not in MODES:
            raise ParameterError(f"mode must be one of {MODES}, got {mode!r}")
        if mode == "point2vec" and not decoder_depth:
            raise ParameterError("point2vec mode needs a decoder (decoder_depth >= 1)")
        if mode == "data2vec_pc" and decoder_depth:
            raise ParameterError("data2vec_pc mode has no decoder")
        self.mode = mode
        self.student = PointEncoder(model, rng, drop_path)
        self.mask_embedding = Parameter(trunc_normal(rng, (model.dim,)))
        self.decoder = (TransformerEncoder(encoder_config(model, depth=decoder_depth), rng)
                        if mode == "point2vec" else None)


@dataclass
class TeacherState:
    """EMA copy of the student encoder; never receives gradients."""

    model: PointEncoder
    tau_start: float = 0.9998
    tau_end: float = 0.99999
    tau_warmup_steps: int = 0

    @classmethod
    def from_student(cls, student: PointEncoder, **schedule) -> "TeacherState":
        twin = copy.deepcopy(student)
        for p in twin.parameters():
            p.requires_grad = False
            p.grad = None
        return cls(twin, **schedule)

    def tau(self, step: int) -> float:
        return ema_decay_at(step, self.tau_start, self.tau_end, self.tau_warmup_steps)


def ema_decay_at(step: int, tau_start: float, tau_end: float, warmup_steps: int) -> float:
    """Linear ramp from ``tau_start`` at step 0 to ``tau_end`` at ``warmup_steps``, then flat."""
    if step < 0:
        raise ParameterError(f"step must be >= 0, got {step}")
    if step >= warmup_steps:
        return tau_end
    return tau_start + (tau_end - tau_start) * (step / warmup_steps)


def ema_update(teacher: Module, student: Module, tau: float) -> None:
    """teacher <- tau * teacher + (1 - tau) * student, computed in float64 per parameter."""
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise ShapeError("teacher and student parameter names differ")
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise ShapeError(f"EMA shape mismatch for {name!r}: {tp.shape} vs {sp.shape}")
        mixed = tau * tp.data.astype(np.float64) + (1.0 - tau) * sp.data.astype(np.float64)
        tp.data = mixed.astype(tp.dtype)


# -- forward pieces -----------------------------------------------------------------
def build_targets(patch_emb: Tensor, pos: Tensor, teacher: TeacherState | TransformerEncoder, k_layers: int,
                  eps: float = 1e-5) -> np.ndarray:
    """LN -> average -> LN over the teacher's last ``k_layers`` block outputs (all tokens)."""
    encoder = teacher.model.encoder if isinstance(teacher, TeacherState) else teacher
    depth = len(encoder.blocks)
    if not 1 <= k_layers <= depth:
        raise ParameterError(f"target layers K must lie in [1, {depth}], got {k_layers}")
    with no_grad():
        states = encoder(patch_emb.detach(), pos.detach(), training=False)
        normed = [F.layer_norm(s, eps) for s in states[-k_layers:]]
        avg = normed[0]
        for t in normed[1:]:
            avg = avg + t
        avg = avg / float(k_layers)
        return F.layer_norm(avg, eps).data


def student_forward(patch_emb: Tensor, pos: Tensor, layout: MaskLayout, mode: str, model: PretrainModel,
                    training: bool = False, rng=None) -> list[Tensor]:
    """Student block outputs.

    point2vec: only visible tokens (in original order), output length n - m.
    data2vec_pc: masked tokens replaced by the mask embedding, all n tokens.
    """
    if mode != model.mode:
        raise ParameterError(f"student mode {mode!r} does not match model mode {model.mode!r}")
    mask = np.atleast_2d(layout.mask)
    if mask.shape != patch_emb.shape[:2]:
        raise ShapeError(f"mask layout {mask.shape} does not match tokens {patch_emb.shape[:2]}")
    encoder = model.student.encoder
    if mode == "point2vec":
        vis = layout.visible_indices()
        return encoder(gather(patch_emb, vis), gather(pos, vis), training, rng)
    tokens = where(mask[..., None], model.mask_embedding, patch_emb)
    return encoder(tokens, pos, training, rng)


def decoder_forward(student_tokens: Tensor, pos: Tensor, layout: MaskLayout, mask_embedding: Tensor,
                    decoder: TransformerEncoder | None, training: bool = False, rng=None) -> Tensor:
    """Scatter student outputs back to their slots, fill masked slots, run the decoder."""
    if decoder is None:
        raise ParameterError("decoder_forward is only defined in point2vec mode")
    mask = np.atleast_2d(layout.mask)
    n_masked = int(mask[0].sum())
    if n_masked < 1:
        raise ParameterError("decoder needs at least one masked token")
    vis, msk = layout.visible_indices(), layout.masked_indices()
    batch, _, dim = student_tokens.shape
    fill = broadcast_to(mask_embedding, (batch, n_masked, dim))
    stacked = concat([student_tokens, fill], axis=1)
    slot_of = np.argsort(np.concatenate([vis, msk], axis=1), axis=1, kind="stable")
    full = gather(stacked, slot_of)
    return decoder(full, pos, training, rng)[-1]


def predict(model: PretrainModel, patch_emb: Tensor, pos: Tensor, layout: MaskLayout, training: bool = False,
            rng=None) -> Tensor:
    """Predictions for all n slots (only masked slots enter the loss)."""
    outs = student_forward(patch_emb, pos, layout, model.mode, model, training, rng)
    if model.mode == "point2vec":
        return decoder_forward(outs[-1], pos, layout, model.mask_embedding, model.decoder, training, rng)
    return outs[-1]


def masked_loss(predictions: Tensor, targets: np.ndarray, layout: MaskLayout, beta: float) -> Tensor:
    """Smooth L1 over the masked slots only."""
    msk = layout.masked_indices()
    bidx = np.arange(msk.shape[0])[:, None]
    return F.smooth_l1(gather(predictions, msk), targets[bidx, msk], beta)


# -- training step ----------------------------------------------------------------------
@dataclass
class StepResult:
    loss: float
    lr: float
    tau: float


class Pretrainer:
    """Owns the student, teacher, optimizer and RNG for one pretraining run."""

    def __init__(self, model_cfg: ModelConfig, cfg: PretrainConfig, steps_per_epoch: int, seed: int = 0,
                 num_centers: int = 64, group_size: int = 32, dtype=np.float32):
        self.model_cfg = model_cfg
        self.cfg = cfg
        self.steps_per_epoch = steps_per_epoch
        self.num_centers = num_centers
        self.group_size = group_size
        init_rng = np.random.default_rng([seed, 0])
        self.model = PretrainModel(model_cfg, cfg.mode, init_rng, cfg.decoder_depth, cfg.drop_path)
        if dtype != np.float32:
            self.model.to(dtype)
        if cfg.target_layers > model_cfg.depth:
            raise ParameterError(f"target_layers {cfg.target_layers} exceeds encoder depth {model_cfg.depth}")
        self.teacher = TeacherState.from_student(self.model.student, tau_start=cfg.tau_start, tau_end=cfg.tau_end,
                                                 tau_warmup_steps=cfg.tau_warmup_epochs * steps_per_epoch)
        self.optimizer = AdamW(dict(self.model.named_parameters()), weight_decay=cfg.weight_decay)
        total = max(cfg.epochs * steps_per_epoch, 1)
        self.schedule = LrSchedule(cfg.lr, min(cfg.warmup_epochs * steps_per_epoch, total), total, cfg.min_lr)
        self.rng = np.random.default_rng([seed, 1])
        self.step = 0

    def tokenize(self, points: np.ndarray):
        return tokenize(points, self.num_centers, self.group_size, rng=self.rng)

    def train_step(self, points: np.ndarray | None = None, patches=None) -> StepResult:
        """One optimization step on a (B, N, 3) batch, or on pre-tokenized patches."""
        if patches is None:
            if points is None or len(points) == 0:
                raise ParameterError("pretrain step needs a nonempty batch")
            patches = self.tokenize(np.asarray(points, dtype=np.float32))
        layout = generate_mask(patches.centers, self.cfg.mask_strategy, self.cfg.mask_ratio, self.rng)
        dtype = self.model.mask_embedding.dtype
        self.model.train()
        tokens, pos = self.model.student.embed(patches.patches.astype(dtype), patches.centers.astype(dtype))
        targets = build_targets(tokens, pos, self.teacher, self.cfg.target_layers)
        preds = predict(self.model, tokens, pos, layout, training=True, rng=self.rng)
        loss = masked_loss(preds, targets, layout, self.cfg.beta)
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss at step {self.step}")
        loss.backward()
        lr = lr_at(self.schedule, min(self.step + 1, self.schedule.total_steps))
        try:
            self.optimizer.step(lr)
        except NumericError as exc:
            raise NumericError(f"step {self.step}: {exc}") from None
        tau = self.teacher.tau(self.step)
        ema_update(self.teacher.model, self.model.student, tau)
        self.step += 1
        return StepResult(float(loss.data), lr, tau)

    def train_epoch(self, points: np.ndarray, log=None) -> list[StepResult]:
        """Shuffle, augment and step through one pass over ``points`` (S, N, 3).

        ``log`` (if given) is called with (step, epoch, StepResult) after each step.
        """
        order = self.rng.permutation(len(points))
        bs = self.cfg.batch_size
        results = []
        epoch = self.step // self.steps_per_epoch
        for lo in range(0, len(order), bs):
            batch = np.stack([augment_points(p, self.cfg.augment, self.rng) for p in points[order[lo:lo + bs]]])
            res = self.train_step(batch)
            results.append(res)
            if log is not None:
                log(self.step - 1, epoch, res)
        return results


def pretrain_step(trainer: Pretrainer, points: np.ndarray) -> float:
    return trainer.train_step(points).loss

