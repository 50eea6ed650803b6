"""Task heads, fine-tuning loops and evaluation utilities.

Classification pools the encoder output (mean and max over tokens) into a
small MLP. Part segmentation averages a few block outputs, upsamples them to
every input point by inverse-distance interpolation and classifies each point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import AugmentationSpec, FinetuneConfig, PartSegConfig
from .data import augment_points
from .geometry import feature_propagation, tokenize
from .numerics import (
    AdamW,
    LrSchedule,
    Module,
    Tensor,
    broadcast_to,
    concat,
    lr_at,
    no_grad,
)
from .numerics import functional as F
from .numerics.errors import NumericError, ParameterError, ShapeError
from .numerics.nn import LayerNorm, Linear
from .pretraining import PointEncoder


class MlpStack(Module):
    """Linear -> LayerNorm -> GELU -> dropout for each hidden width, then a plain output layer."""

    def __init__(self, in_dim: int, hidden: tuple[int, ...], out_dim: int, rng: np.random.Generator,
                 dropout: float = 0.5):
        dims = (in_dim,) + tuple(hidden)
        self.hidden = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.norms = [LayerNorm(b) for b in dims[1:]]
        self.out = Linear(dims[-1], out_dim, rng)
        self.dropout = dropout

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        for fc, norm in zip(self.hidden, self.norms):
            x = F.dropout(F.gelu(norm(fc(x))), self.dropout, training, rng)
        return self.out(x)


class ClassificationHead(Module):
    def __init__(self, dim: int, num_classes: int, rng: np.random.Generator, hidden=(256, 256), dropout: float = 0.5):
        if num_classes < 1:
            raise ParameterError(f"num_classes must be >= 1, got {num_classes}")
        self.in_dim = 2 * dim
        self.num_classes = num_classes
        self.mlp = MlpStack(2 * dim, tuple(hidden), num_classes, rng, dropout)

    def __call__(self, pooled: Tensor, training: bool = False, rng=None) -> Tensor:
        if pooled.shape[-1] != self.in_dim:
            raise ShapeError(f"classification head expects width {self.in_dim}, got {pooled.shape[-1]}")
        return self.mlp(pooled, training, rng)


def pool_tokens(tokens: Tensor) -> Tensor:
    """(…, n, E) -> (…, 2E): mean over tokens followed by max over tokens."""
    return concat([tokens.mean(axis=-2), tokens.max(axis=-2)], axis=-1)


def classify_forward(layer_outputs, head: ClassificationHead, norm: LayerNorm | None = None,
                     training: bool = False, rng=None) -> Tensor:
    """Logits from the final block output (optionally through the encoder's final norm)."""
    tokens = layer_outputs[-1] if isinstance(layer_outputs, (list, tuple)) else layer_outputs
    if norm is not None:
        tokens = norm(tokens)
    return head(pool_tokens(tokens), training, rng)


def label_smoothing_loss(logits: Tensor, labels, eps: float = 0.2) -> Tensor:
    """Cross-entropy against 1 - eps on the true class and eps / (C - 1) on the others."""
    return F.cross_entropy(logits, np.asarray(labels), eps)


# -- part segmentation ---------------------------------------------------------------
class PartSegHead(Module):
    """Feature propagation MLP, global vector assembly and the per-point classifier."""

    def __init__(self, dim: int, num_object_classes: int, num_parts: int, rng: np.random.Generator,
                 hidden=(512, 256), dropout: float = 0.5, k_interp: int = 3):
        self.dim = dim
        self.num_object_classes = num_object_classes
        self.k_interp = k_interp
        # shared MLP applied after inverse-distance upsampling; the point's own
        # coordinates are appended as the skip feature
        self.prop = Linear(dim + 3, dim, rng)
        self.prop_norm = LayerNorm(dim)
        self.classifier = MlpStack(dim + 2 * dim + num_object_classes, tuple(hidden), num_parts, rng, dropout)


def check_feature_layers(feature_layers, depth: int) -> None:
    missing = [i for i in feature_layers if not 1 <= i <= depth]
    if missing or not feature_layers:
        raise ParameterError(f"feature layers {list(feature_layers)} do not exist in an encoder of depth {depth}")


def average_layers(layer_outputs, feature_layers=(4, 8, 12)) -> Tensor:
    """Mean of the selected block outputs; layer numbers count from 1."""
    check_feature_layers(feature_layers, len(layer_outputs))
    acc = layer_outputs[feature_layers[0] - 1]
    for i in feature_layers[1:]:
        acc = acc + layer_outputs[i - 1]
    return acc / float(len(feature_layers))


def partseg_forward(layer_outputs, centers: np.ndarray, points: np.ndarray, object_onehot: np.ndarray,
                    head: PartSegHead, feature_layers=(4, 8, 12), training: bool = False, rng=None) -> Tensor:
    """Per-point part logits (…, N, num_parts).

    ``centers`` (…, n, 3) are the token positions, ``points`` (…, N, 3) the
    points to label and ``object_onehot`` (…, C_obj) the object category.
    """
    tokens = average_layers(layer_outputs, feature_layers)
    dtype = tokens.dtype
    glob = pool_tokens(tokens)
    onehot = Tensor(np.asarray(object_onehot, dtype=dtype))
    if onehot.shape[-1] != head.num_object_classes:
        raise ShapeError(f"one-hot width {onehot.shape[-1]} != {head.num_object_classes} object classes")
    glob = concat([glob, onehot], axis=-1)
    local = feature_propagation(points, centers, tokens, head.k_interp)
    xyz = Tensor(np.asarray(points, dtype=dtype))
    local = F.gelu(head.prop_norm(head.prop(concat([local, xyz], axis=-1))))
    n_points = local.shape[-2]
    g = glob.reshape(*glob.shape[:-1], 1, glob.shape[-1])
    g = broadcast_to(g, (*glob.shape[:-1], n_points, glob.shape[-1]))
    return head.classifier(concat([local, g], axis=-1), training, rng)


def part_ious(pred: np.ndarray, label: np.ndarray, parts) -> np.ndarray:
    """IoU of every part of one object; a part absent from both gets IoU 1."""
    out = np.empty(len(parts))
    for j, p in enumerate(parts):
        inter = np.count_nonzero((pred == p) & (label == p))
        union = np.count_nonzero((pred == p) | (label == p))
        out[j] = 1.0 if union == 0 else inter / union
    return out


def miou_scores(preds, labels, categories, category_parts: dict[int, list[int]]) -> dict[str, float]:
    """``mIoU_I``: mean over instances of their mean part IoU.

    ``mIoU_C``: mean over object categories of the mean instance IoU inside
    that category.
    """
    per_cat: dict[int, list[float]] = {}
    for pred, label, cat in zip(preds, labels, categories):
        iou = float(part_ious(np.asarray(pred), np.asarray(label), category_parts[int(cat)]).mean())
        per_cat.setdefault(int(cat), []).append(iou)
    all_ious = [v for vals in per_cat.values() for v in vals]
    if not all_ious:
        raise ParameterError("mIoU needs at least one instance")
    return {
        "mIoU_I": float(np.mean(all_ious)),
        "mIoU_C": float(np.mean([np.mean(v) for v in per_cat.values()])),
    }


# -- few-shot episodes ---------------------------------------------------------------------
@dataclass
class FewShotEpisode:
    way: int
    shot: int
    classes: np.ndarray  # (m,) dataset class ids, episode label i <-> classes[i]
    support: np.ndarray  # dataset indices, (m * shot,)
    support_labels: np.ndarray  # episode labels
    query: np.ndarray
    query_labels: np.ndarray


def sample_fewshot_episode(labels, way: int, shot: int, rng: np.random.Generator, query: int = 20,
                           class_names=None) -> FewShotEpisode:
    """Pick ``way`` classes, then ``shot`` support and ``query`` query instances per class."""
    labels = np.asarray(getattr(labels, "labels", labels))
    classes = np.unique(labels)
    if way < 1 or shot < 1 or query < 1:
        raise ParameterError(f"way, shot and query must be >= 1, got {way}, {shot}, {query}")
    if len(classes) < way:
        raise ParameterError(f"{way}-way episode needs {way} classes, dataset has {len(classes)}")
    chosen = rng.choice(classes, size=way, replace=False)
    sup, sup_y, qry, qry_y = [], [], [], []
    for ep_label, c in enumerate(chosen):
        members = np.flatnonzero(labels == c)
        if len(members) < shot + query:
            name = class_names[int(c)] if class_names is not None else int(c)
            raise ParameterError(f"class {name!r} has {len(members)} instances, episode needs {shot + query}")
        picked = rng.choice(members, size=shot + query, replace=False)
        sup.append(picked[:shot])
        qry.append(picked[shot:])
        sup_y.append(np.full(shot, ep_label))
        qry_y.append(np.full(query, ep_label))
    return FewShotEpisode(way, shot, chosen, np.concatenate(sup), np.concatenate(sup_y),
                          np.concatenate(qry), np.concatenate(qry_y))


# -- metrics -------------------------------------------------------------------------------
@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (C, C): row = true label, column = prediction

    @property
    def row_normalized(self) -> np.ndarray:
        """Rows sum to 1 (diagonal = recall); empty rows stay zero."""
        s = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, s, out=np.zeros(self.counts.shape), where=s > 0)

    @property
    def column_normalized(self) -> np.ndarray:
        """Columns sum to 1 (diagonal = precision); empty columns stay zero."""
        s = self.counts.sum(axis=0, keepdims=True)
        return np.divide(self.counts, s, out=np.zeros(self.counts.shape), where=s > 0)

    @property
    def accuracy(self) -> float:
        total = self.counts.sum()
        return float(np.trace(self.counts) / total) if total else 0.0


def confusion_matrix(predictions, labels, num_classes: int) -> ConfusionMatrix:
    predictions = np.asarray(predictions, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if predictions.shape != labels.shape:
        raise ShapeError(f"predictions {predictions.shape} and labels {labels.shape} differ")
    for name, arr in (("prediction", predictions), ("label", labels)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ParameterError(f"{name} out of range [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (labels, predictions), 1)
    return ConfusionMatrix(counts)


def classification_report(predictions, labels, num_classes: int, class_names=None) -> dict:
    cm = confusion_matrix(predictions, labels, num_classes)
    names = list(class_names) if class_names else [str(i) for i in range(num_classes)]
    return {
        "overall_accuracy": cm.accuracy,
        "per_class_recall": dict(zip(names, np.diag(cm.row_normalized).tolist())),
        "per_class_precision": dict(zip(names, np.diag(cm.column_normalized).tolist())),
        "confusion": cm.counts.tolist(),
    }


def pca_rgb(features, rank_tol: float = 1e-10):
    """Project token features to RGB with a PCA fitted jointly over all inputs.

    ``features`` is one (n, E) array or a list of them; the result has the
    same structure with (n, 3) colors in [0, 1]. Components are min-max
    scaled over the whole set. When the centered features span fewer than
    three directions, the missing channels are filled with 0.5.
    """
    single = isinstance(features, np.ndarray)
    parts = [np.asarray(features, dtype=np.float64)] if single else [np.asarray(f, dtype=np.float64) for f in features]
    sizes = [len(p) for p in parts]
    x = np.concatenate(parts, axis=0)
    if x.ndim != 2 or len(x) < 3:
        raise ParameterError(f"pca_rgb needs at least 3 tokens of shape (n, E), got {x.shape}")
    x = x - x.mean(axis=0)
    cov = x.T @ x / len(x)
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    colors = np.full((len(x), 3), 0.5)
    top = vals[0] if len(vals) else 0.0
    for c in range(min(3, len(vals))):
        if vals[c] <= rank_tol * max(top, 1e-300) or vals[c] <= 0:
            continue
        v = vecs[:, c]
        v = v if v[np.argmax(np.abs(v))] > 0 else -v  # deterministic sign
        proj = x @ v
        lo, hi = proj.min(), proj.max()
        colors[:, c] = 0.5 if hi == lo else (proj - lo) / (hi - lo)
    out = np.split(colors, np.cumsum(sizes)[:-1])
    return out[0] if single else out


# -- fine-tuning ---------------------------------------------------------------------------
def set_drop_path(encoder: PointEncoder, rate: float) -> None:
    """Linearly increasing stochastic depth 0 .. ``rate`` across the blocks."""
    blocks = encoder.encoder.blocks
    for block, r in zip(blocks, np.linspace(0.0, rate, len(blocks))):
        block.drop_path = float(r)


@dataclass
class EpochLog:
    epoch: int
    loss: float
    lr: float
    frozen: bool
    test_accuracy: float | None = None
    extra: dict = field(default_factory=dict)


def _augment_batch(points: np.ndarray, spec: AugmentationSpec, rng: np.random.Generator) -> np.ndarray:
    return np.stack([augment_points(p, spec, rng) for p in points])


def _eval_points(points: np.ndarray, spec: AugmentationSpec) -> np.ndarray:
    """Deterministic test-time view: only centering / unit-sphere rescale."""
    if not spec.unit_sphere:
        return points
    plain = AugmentationSpec(unit_sphere=True, gravity_axis=spec.gravity_axis)
    rng = np.random.default_rng(0)  # unused by a scale-free spec
    return np.stack([augment_points(p, plain, rng) for p in points])


class ClassificationModel(Module):
    def __init__(self, encoder: PointEncoder, num_classes: int, rng: np.random.Generator, hidden=(256, 256),
                 dropout: float = 0.5):
        self.encoder = encoder
        self.head = ClassificationHead(encoder.encoder.cfg.dim, num_classes, rng, hidden, dropout)

    def __call__(self, patches, centers, training: bool = False, rng=None) -> Tensor:
        outs = self.encoder(patches, centers, training, rng)
        return classify_forward(outs, self.head, self.encoder.encoder.norm, training, rng)


def _frozen_names(model: Module) -> set[str]:
    """Encoder parameters held fixed during the freeze window (the final norm feeds the head and stays trainable)."""
    return {name for name, _ in model.named_parameters()
            if name.startswith("encoder.") and not name.startswith("encoder.encoder.norm.")}


def predict_classes(model: ClassificationModel, points: np.ndarray, num_centers: int, group_size: int,
                    spec: AugmentationSpec, batch_size: int = 64) -> np.ndarray:
    """Class predictions; tokenization starts FPS at point 0 so the result is deterministic."""
    model.eval()
    dtype = model.head.mlp.out.weight.dtype
    view = _eval_points(points, spec)
    preds = []
    with no_grad():
        for lo in range(0, len(view), batch_size):
            ps = tokenize(view[lo:lo + batch_size], num_centers, group_size, start=0)
            logits = model(ps.patches.astype(dtype), ps.centers.astype(dtype))
            preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


class _Finetuner:
    def __init__(self, model: Module, lr: float, weight_decay: float, warmup_epochs: int, epochs: int,
                 min_lr: float, steps_per_epoch: int, freeze_epochs: int, seed: int):
        self.model = model
        self.optimizer = AdamW(dict(model.named_parameters()), weight_decay=weight_decay)
        total = max(epochs * steps_per_epoch, 1)
        self.schedule = LrSchedule(lr, min(warmup_epochs * steps_per_epoch, total), total, min_lr)
        self.freeze_epochs = freeze_epochs
        self.frozen = _frozen_names(model)
        self.trainable_when_frozen = [n for n in self.optimizer.params if n not in self.frozen]
        self.steps_per_epoch = steps_per_epoch
        self.rng = np.random.default_rng([seed, 2])
        self.step = 0
        self.epoch = 0

    def _update(self, loss: Tensor) -> float:
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss at fine-tune step {self.step}")
        loss.backward()
        lr = lr_at(self.schedule, min(self.step + 1, self.schedule.total_steps))
        frozen = self.epoch < self.freeze_epochs
        self.optimizer.step(lr, self.trainable_when_frozen if frozen else None)
        self.step += 1
        return lr


class ClassificationTrainer(_Finetuner):
    """Fine-tunes an encoder plus a fresh head.

    A pretrained encoder uses ``cfg.lr`` and is frozen for the first
    ``cfg.freeze_epochs`` epochs; a from-scratch encoder uses
    ``cfg.scratch_lr`` and is never frozen.
    """

    def __init__(self, encoder: PointEncoder, num_classes: int, cfg: FinetuneConfig, steps_per_epoch: int,
                 pretrained: bool, seed: int = 0, num_centers: int = 64, group_size: int = 32):
        head_rng = np.random.default_rng([seed, 3])
        set_drop_path(encoder, cfg.drop_path)
        model = ClassificationModel(encoder, num_classes, head_rng, cfg.head_dims, cfg.head_dropout)
        super().__init__(model, cfg.lr if pretrained else cfg.scratch_lr, cfg.weight_decay, cfg.warmup_epochs,
                         cfg.epochs, cfg.min_lr, steps_per_epoch, cfg.freeze_epochs if pretrained else 0, seed)
        self.cfg = cfg
        self.num_classes = num_classes
        self.num_centers = num_centers
        self.group_size = group_size

    @property
    def dtype(self):
        return self.model.head.mlp.out.weight.dtype

    def train_epoch(self, points: np.ndarray, labels: np.ndarray) -> EpochLog:
        order = self.rng.permutation(len(points))
        bs = self.cfg.batch_size
        losses, lr = [], 0.0
        self.model.train()
        for lo in range(0, len(order), bs):
            idx = order[lo:lo + bs]
            batch = _augment_batch(points[idx], self.cfg.augment, self.rng)
            ps = tokenize(batch, self.num_centers, self.group_size, rng=self.rng)
            logits = self.model(ps.patches.astype(self.dtype), ps.centers.astype(self.dtype), True, self.rng)
            loss = label_smoothing_loss(logits, labels[idx], self.cfg.label_smoothing)
            lr = self._update(loss)
            losses.append(float(loss.data))
        log = EpochLog(self.epoch, float(np.mean(losses)), lr, self.epoch < self.freeze_epochs)
        self.epoch += 1
        return log

    def predict(self, points: np.ndarray, batch_size: int = 64) -> np.ndarray:
        return predict_classes(self.model, points, self.num_centers, self.group_size, self.cfg.augment, batch_size)

    def accuracy(self, points: np.ndarray, labels: np.ndarray) -> float:
        return float(np.mean(self.predict(points) == np.asarray(labels)))


class PartSegModel(Module):
    def __init__(self, encoder: PointEncoder, num_object_classes: int, num_parts: int, rng: np.random.Generator,
                 cfg: PartSegConfig):
        self.encoder = encoder
        self.head = PartSegHead(encoder.encoder.cfg.dim, num_object_classes, num_parts, rng, cfg.head_dims,
                                cfg.head_dropout, cfg.interp_k)
        self.feature_layers = tuple(cfg.feature_layers)
        check_feature_layers(self.feature_layers, len(encoder.encoder.blocks))

    def __call__(self, points, patches, centers, onehot, training: bool = False, rng=None) -> Tensor:
        outs = self.encoder(patches, centers, training, rng)
        return partseg_forward(outs, centers, points, onehot, self.head, self.feature_layers, training, rng)


class PartSegTrainer(_Finetuner):
    def __init__(self, encoder: PointEncoder, num_object_classes: int, category_parts: dict[int, list[int]],
                 cfg: PartSegConfig, steps_per_epoch: int, pretrained: bool, seed: int = 0):
        head_rng = np.random.default_rng([seed, 3])
        set_drop_path(encoder, cfg.drop_path)
        num_parts = 1 + max(p for parts in category_parts.values() for p in parts)
        model = PartSegModel(encoder, num_object_classes, num_parts, head_rng, cfg)
        super().__init__(model, cfg.lr, cfg.weight_decay, cfg.warmup_epochs, cfg.epochs, cfg.min_lr,
                         steps_per_epoch, cfg.freeze_epochs if pretrained else 0, seed)
        self.cfg = cfg
        self.num_object_classes = num_object_classes
        self.num_parts = num_parts
        self.category_parts = {int(k): list(v) for k, v in category_parts.items()}

    @property
    def dtype(self):
        return self.model.head.prop.weight.dtype

    def _inputs(self, points: np.ndarray, categories: np.ndarray, rng=None, start=None):
        ps = tokenize(points, self.cfg.num_centers, self.cfg.group_size, rng=rng, start=start)
        onehot = np.eye(self.num_object_classes, dtype=self.dtype)[np.asarray(categories)]
        return (points.astype(self.dtype), ps.patches.astype(self.dtype), ps.centers.astype(self.dtype), onehot)

    def train_epoch(self, points: np.ndarray, parts: np.ndarray, categories: np.ndarray) -> EpochLog:
        order = self.rng.permutation(len(points))
        bs = self.cfg.batch_size
        losses, lr = [], 0.0
        self.model.train()
        for lo in range(0, len(order), bs):
            idx = order[lo:lo + bs]
            batch = _augment_batch(points[idx], self.cfg.augment, self.rng)
            logits = self.model(*self._inputs(batch, categories[idx], rng=self.rng), True, self.rng)
            loss = F.cross_entropy(logits, parts[idx])
            lr = self._update(loss)
            losses.append(float(loss.data))
        log = EpochLog(self.epoch, float(np.mean(losses)), lr, self.epoch < self.freeze_epochs)
        self.epoch += 1
        return log

    def predict(self, points: np.ndarray, categories: np.ndarray, batch_size: int = 16) -> np.ndarray:
        """Per-point part ids, restricted to the parts of each object's category."""
        self.model.eval()
        view = _eval_points(points, self.cfg.augment)
        out = []
        with no_grad():
            for lo in range(0, len(view), batch_size):
                cats = np.asarray(categories[lo:lo + batch_size])
                logits = self.model(*self._inputs(view[lo:lo + batch_size], cats, start=0)).data
                allowed = np.full((len(cats), 1, self.num_parts), -np.inf, dtype=logits.dtype)
                for row, c in enumerate(cats):
                    allowed[row, 0, self.category_parts[int(c)]] = 0.0
                out.append(np.argmax(logits + allowed, axis=-1))
        return np.concatenate(out)

    def evaluate(self, points: np.ndarray, parts: np.ndarray, categories: np.ndarray) -> dict[str, float]:
        preds = self.predict(points, categories)
        scores = miou_scores(preds, parts, categories, self.category_parts)
        scores["accuracy"] = float(np.mean(preds == parts))
        return scores


def run_fewshot_episode(make_encoder, points: np.ndarray, episode: FewShotEpisode, cfg: FinetuneConfig,
                        pretrained: bool, seed: int, num_centers: int, group_size: int) -> float:
    """Fine-tune a fresh copy of the encoder on the support set; return query accuracy."""
    encoder = make_encoder()
    steps = -(-len(episode.support) // cfg.batch_size)
    trainer = ClassificationTrainer(encoder, episode.way, cfg, steps, pretrained, seed, num_centers, group_size)
    for _ in range(cfg.epochs):
        trainer.train_epoch(points[episode.support], episode.support_labels)
    return trainer.accuracy(points[episode.query], episode.query_labels)
