"""Training objectives.

Three terms drive training:

- classification: weighted per-pixel cross entropy over valid pixels
- reconstruction: per-level mean squared error between encoder activations
  and their auxiliary reconstructions, normalized by C*H*W at each level
- consistency: per sentence box, the mean squared deviation of decoder
  features from the box mean, averaged over boxes

The consistency term is differentiated by the autodiff engine directly;
`consistency_grad_exact` (the full gradient expression) and
`consistency_grad_approx` (its simplified per-pixel form) are standalone
kernels kept for verification, and the approximate form also backs an
optional fused fast path. The two expressions agree identically: the sum
of deviations from a mean telescopes to zero, which collapses the exact
expression to the simplified one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractViolation, InputError
from .geometry import Box

WEIGHT_CLIP = (0.1, 10.0)


@dataclass
class ClassWeights:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 1 or self.values.size == 0:
            raise ContractViolation("class weights must be a nonempty vector")
        if not np.all(self.values > 0):
            raise ContractViolation("class weights must be positive")

    @staticmethod
    def uniform(num_classes: int) -> "ClassWeights":
        return ClassWeights(np.ones(num_classes, dtype=np.float32))


@dataclass
class LossWeights:
    """Mixing weights and knobs for the combined objective."""
    lambda_cls: float = 1.0
    lambda_rec: float = 1.0
    lambda_cons: float = 1.0
    rec_aggregate: str = "mean"     # "mean" | "sum" over levels
    consistency_stage: int = 0      # decoder resolution level receiving the term
    fused_consistency: bool = False


@dataclass
class LossReport:
    l_cls: float
    l_rec_levels: list
    l_rec: float
    l_cons: float
    total_value: float
    total: Tensor = field(repr=False, default=None)

    def to_record(self) -> dict:
        return {
            "l_cls": self.l_cls,
            "l_rec_levels": [round(v, 8) for v in self.l_rec_levels],
            "l_rec": self.l_rec,
            "l_cons": self.l_cons,
            "total": self.total_value,
        }


# ---------------------------------------------------------------------------
# individual terms
# ---------------------------------------------------------------------------

def classification_loss(logits: Tensor, labels: np.ndarray, weights: ClassWeights,
                        valid: np.ndarray | None = None) -> Tensor:
    """Mean over valid pixels of weight[label] * (-log softmax[label])."""
    if weights.values.shape[0] != logits.data.shape[0]:
        raise ContractViolation(
            f"{weights.values.shape[0]} class weights for {logits.data.shape[0]} classes"
        )
    return ad.softmax_cross_entropy(logits, labels, weights.values, valid)


def reconstruction_loss(target: Tensor, reconstruction: Tensor) -> Tensor:
    """Mean squared error, normalized by the full element count C*H*W."""
    if target.data.shape != reconstruction.data.shape:
        raise ContractViolation(
            f"reconstruction shape {reconstruction.shape} != target {target.shape}"
        )
    diff = ad.sub(target, reconstruction)
    return ad.mean_all(ad.mul(diff, diff))


def _box_loss(features: Tensor, box: Box) -> Tensor:
    region = ad.crop(features, box)
    centered = ad.sub(region, ad.spatial_mean(region))
    return ad.scale(ad.sum_all(ad.mul(centered, centered)), 1.0 / box.area)


def consistency_loss(features: Tensor, boxes: list, fused: bool = False
                     ) -> tuple[Tensor, bool]:
    """Mean over boxes of the intra-box deviation-from-mean energy.

    Returns (loss, had_boxes); an empty box list yields a zero loss with
    had_boxes False so callers can drop the term from their logs.
    """
    if not boxes:
        return Tensor(np.zeros(())), False
    _, h, w = features.data.shape
    for box in boxes:
        if not box.within(w, h):
            raise ContractViolation(f"box {box.as_tuple()} outside {h}x{w} features")
    if fused:
        return _fused_consistency(features, boxes), True
    total = _box_loss(features, boxes[0])
    for box in boxes[1:]:
        total = ad.add(total, _box_loss(features, box))
    return ad.scale(total, 1.0 / len(boxes)), True


def _fused_consistency(features: Tensor, boxes: list) -> Tensor:
    """Single-op consistency loss using the simplified per-pixel gradient."""
    data = features.data
    value = 0.0
    for box in boxes:
        region = data[:, box.y0:box.y1, box.x0:box.x1].astype(np.float64)
        centered = region - region.mean(axis=(1, 2), keepdims=True)
        value += float((centered ** 2).sum()) / box.area
    out = Tensor(np.asarray(value / len(boxes), dtype=np.float32))

    def build():
        def backward(g):
            grad = np.zeros_like(data)
            for box in boxes:
                grad[:, box.y0:box.y1, box.x0:box.x1] += \
                    consistency_grad_approx(data, box)[:, box.y0:box.y1, box.x0:box.x1]
            return (grad * (g.reshape(()) / len(boxes)),)
        return backward

    return ad._maybe_record(out, (features,), build)


def consistency_grad_exact(features: np.ndarray, box: Box) -> np.ndarray:
    """Full per-pixel gradient of one box's consistency term.

    2/(H^2 W^2) * [(p_ij - pbar)(HW - 1) + sum_{uv != ij} (pbar - p_uv)],
    transcribed term by term; zero outside the box.
    """
    _, h, w = features.shape
    if not box.within(w, h):
        raise ContractViolation(f"box {box.as_tuple()} outside {h}x{w} features")
    region = features[:, box.y0:box.y1, box.x0:box.x1].astype(np.float64)
    area = box.area
    mean = region.mean(axis=(1, 2), keepdims=True)
    first = (region - mean) * (area - 1)
    # the sum over (u,v) != (i,j) is the total sum minus the own term
    total = (mean - region).sum(axis=(1, 2), keepdims=True)
    second = total - (mean - region)
    grad = np.zeros(features.shape, dtype=np.float64)
    grad[:, box.y0:box.y1, box.x0:box.x1] = 2.0 / (area * area) * (first + second)
    return grad.astype(np.float32)


def consistency_grad_approx(features: np.ndarray, box: Box) -> np.ndarray:
    """Simplified per-pixel gradient: 2/(HW) * (p_ij - pbar); zero outside."""
    _, h, w = features.shape
    if not box.within(w, h):
        raise ContractViolation(f"box {box.as_tuple()} outside {h}x{w} features")
    region = features[:, box.y0:box.y1, box.x0:box.x1].astype(np.float64)
    mean = region.mean(axis=(1, 2), keepdims=True)
    grad = np.zeros(features.shape, dtype=np.float64)
    grad[:, box.y0:box.y1, box.x0:box.x1] = 2.0 / box.area * (region - mean)
    return grad.astype(np.float32)


def compute_class_weights(masks, num_classes: int, ignore_label: int = 255
                          ) -> ClassWeights:
    """Inverse pixel-frequency weights, mean-normalized over present classes.

    Classes with no pixels anywhere get the upper clip bound, the largest
    weight the normalization can produce.
    """
    counts = np.zeros(num_classes, dtype=np.int64)
    any_mask = False
    for mask in masks:
        any_mask = True
        mask = np.asarray(mask)
        flat = mask[mask != ignore_label]
        if flat.size and (flat.min() < 0 or flat.max() >= num_classes):
            raise InputError(
                f"mask labels outside [0, {num_classes}): "
                f"[{flat.min()}, {flat.max()}]"
            )
        counts += np.bincount(flat.astype(np.int64), minlength=num_classes)
    if not any_mask or counts.sum() == 0:
        raise InputError("no labeled pixels to derive class weights from")

    present = counts > 0
    total = counts.sum()
    raw = np.zeros(num_classes, dtype=np.float64)
    raw[present] = total / counts[present]
    raw /= raw[present].mean()
    raw[~present] = WEIGHT_CLIP[1]
    return ClassWeights(np.clip(raw, *WEIGHT_CLIP).astype(np.float32))


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------

def total_loss(arts, labels: np.ndarray | None, valid: np.ndarray | None,
               class_weights: ClassWeights | None, boxes: list,
               weights: LossWeights, supervised: bool = True) -> LossReport:
    """Combine the three terms per the mixing weights.

    Unsupervised steps (real documents) pass supervised=False and may give
    labels=None; only reconstruction and consistency contribute then.
    """
    if arts.reconstructions is None:
        raise ContractViolation("total_loss needs train-mode artifacts")

    terms = []

    if supervised:
        if labels is None or class_weights is None:
            raise ContractViolation("supervised loss requires labels and class weights")
        l_cls_t = classification_loss(arts.logits, labels, class_weights, valid)
        terms.append(ad.scale(l_cls_t, weights.lambda_cls))
        l_cls = l_cls_t.item()
    else:
        l_cls = 0.0

    levels = []
    rec_total_t = None
    for target, recon in zip(arts.activations, arts.reconstructions):
        term = reconstruction_loss(target, recon)
        levels.append(term.item())
        rec_total_t = term if rec_total_t is None else ad.add(rec_total_t, term)
    if weights.rec_aggregate == "mean":
        rec_total_t = ad.scale(rec_total_t, 1.0 / len(levels))
    elif weights.rec_aggregate != "sum":
        raise ContractViolation(f"unknown rec_aggregate {weights.rec_aggregate!r}")
    terms.append(ad.scale(rec_total_t, weights.lambda_rec))
    l_rec = rec_total_t.item()

    stage = weights.consistency_stage
    if not 0 <= stage < len(arts.decoder_features):
        raise ContractViolation(f"consistency stage {stage} out of range")
    features = arts.decoder_features[stage]
    stage_boxes = boxes if stage == 0 else [b.downscaled(2 ** stage) for b in boxes]
    l_cons_t, had_boxes = consistency_loss(features, stage_boxes,
                                           fused=weights.fused_consistency)
    if had_boxes:
        terms.append(ad.scale(l_cons_t, weights.lambda_cons))
    l_cons = l_cons_t.item()

    total = terms[0]
    for term in terms[1:]:
        total = ad.add(total, term)

    return LossReport(
        l_cls=l_cls,
        l_rec_levels=levels,
        l_rec=l_rec,
        l_cons=l_cons,
        total_value=total.item(),
        total=total,
    )
