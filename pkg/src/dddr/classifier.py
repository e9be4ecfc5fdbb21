"""Classifier model, projection head, training losses, and the EWC penalty.

The classifier is a small MLP: flattened pixels through two relu layers
into a 64-d feature space, then a linear head over every class the whole
experiment will ever see (the head is never grown). Losses are graph
functions over parameter leaves so one implementation serves training,
gradient checks, and evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamSet, params_checksum
from .rng import stream
from .tensor import (
    Tensor,
    affine,
    constant,
    evaluate_with_gradients,
    l2_normalize,
    log_softmax,
    matmul,
    mul,
    relu,
    softmax,
    square,
    tmean,
    transpose,
    tsum,
)


class AllAnchorsSkipped(Exception):
    """Every sample in the batch has a unique label; the contrastive loss is undefined."""


@dataclass(frozen=True)
class LossWeights:
    """Weights of the three auxiliary terms in the training objective."""

    w1: float = 1.0   # contrastive term
    w2: float = 0.5   # replayed-history cross-entropy
    w3: float = 10.0  # distillation term

    def __post_init__(self) -> None:
        if min(self.w1, self.w2, self.w3) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class ClassifierDims:
    input_dim: int
    n_classes: int
    hidden: int = 128
    feature_dim: int = 64
    proj_hidden: int = 64
    proj_dim: int = 32


@dataclass(frozen=True)
class Snapshot:
    """Frozen copy of a classifier taken at the end of a task."""

    params: ParamSet
    task_index: int
    checksum: str


def make_snapshot(params: ParamSet, task_index: int) -> Snapshot:
    frozen = params.copy()
    return Snapshot(params=frozen, task_index=task_index, checksum=params_checksum(frozen))


def _he(rng: np.random.Generator, fan_in: int, shape: tuple) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape).astype(np.float32)


def init_classifier(dims: ClassifierDims, seed: int, include_projection: bool = True) -> ParamSet:
    rng = stream(seed, "classifier-init")
    values = {
        "fe.w1": _he(rng, dims.input_dim, (dims.input_dim, dims.hidden)),
        "fe.b1": np.zeros(dims.hidden, dtype=np.float32),
        "fe.w2": _he(rng, dims.hidden, (dims.hidden, dims.feature_dim)),
        "fe.b2": np.zeros(dims.feature_dim, dtype=np.float32),
        "head.w": rng.normal(0.0, np.sqrt(1.0 / dims.feature_dim), (dims.feature_dim, dims.n_classes)).astype(
            np.float32
        ),
        "head.b": np.zeros(dims.n_classes, dtype=np.float32),
    }
    if include_projection:
        values.update(
            {
                "proj.w1": _he(rng, dims.feature_dim, (dims.feature_dim, dims.proj_hidden)),
                "proj.b1": np.zeros(dims.proj_hidden, dtype=np.float32),
                "proj.w2": _he(rng, dims.proj_hidden, (dims.proj_hidden, dims.proj_dim)),
                "proj.b2": np.zeros(dims.proj_dim, dtype=np.float32),
            }
        )
    return ParamSet(values)


CLASSIFIER_NAMES = ("fe.w1", "fe.b1", "fe.w2", "fe.b2", "head.w", "head.b")


def _leaves(params) -> dict:
    if isinstance(params, dict):
        return params
    return {name: constant(params[name]) for name in params}


def _flatten_images(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    return x.reshape(x.shape[0], -1)


def features(params, x) -> Tensor:
    p = _leaves(params)
    h = relu(affine(_wrap_input(x), p["fe.w1"], p["fe.b1"]))
    return relu(affine(h, p["fe.w2"], p["fe.b2"]))


def logits(params, x) -> Tensor:
    p = _leaves(params)
    return affine(features(p, x), p["head.w"], p["head.b"])


def project(params, feats: Tensor) -> Tensor:
    p = _leaves(params)
    h = relu(affine(feats, p["proj.w1"], p["proj.b1"]))
    return l2_normalize(affine(h, p["proj.w2"], p["proj.b2"]))


def _wrap_input(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return constant(_flatten_images(np.asarray(x)))


def predict(params: ParamSet, images: np.ndarray) -> np.ndarray:
    """Argmax class per image (ties resolve to the lowest index)."""
    out = logits(params, images)
    return np.argmax(out.data, axis=-1)


def _check_labels(y: np.ndarray, n_classes: int, where: str) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        bad = sorted(set(int(v) for v in y[(y < 0) | (y >= n_classes)]))
        raise ValueError(f"{where}: labels {bad} outside class range [0, {n_classes})")
    return y


def loss_ce(params, x: np.ndarray, y: np.ndarray) -> Tensor:
    """Mean cross-entropy of full-softmax logits against integer labels."""
    p = _leaves(params)
    n_classes = p["head.b"].data.shape[-1]
    y = _check_labels(y, n_classes, "loss_ce")
    if y.size == 0:
        return constant(0.0)
    lp = log_softmax(logits(p, x))
    onehot = np.zeros((y.size, n_classes), dtype=np.float32)
    onehot[np.arange(y.size), y] = 1.0
    return mul(tmean(tsum(mul(lp, onehot), axis=-1)), -1.0)


def loss_pce(params, x: np.ndarray, y: np.ndarray) -> Tensor:
    """Cross-entropy on replayed history; an empty batch contributes zero."""
    if y is None or np.asarray(y).size == 0:
        return constant(0.0)
    return loss_ce(params, x, y)


def supcon_masks(y: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """Positive-pair weights and diagonal mask for a label vector.

    Returns (weights, diag_penalty, n_anchors) where weights[i, j] is the
    contribution of pair (i, j) to the loss mean and diag_penalty is added
    to the similarity matrix to exclude self-pairs from the softmax.
    """
    y = np.asarray(y, dtype=np.int64)
    b = y.size
    same = (y[:, None] == y[None, :]).astype(np.float32)
    np.fill_diagonal(same, 0.0)
    n_pos = same.sum(axis=1)
    anchors = n_pos > 0
    n_anchors = int(anchors.sum())
    if n_anchors == 0:
        raise AllAnchorsSkipped("no sample in the batch has a same-label partner")
    weights = np.zeros_like(same)
    weights[anchors] = same[anchors] / n_pos[anchors, None] / n_anchors
    diag_penalty = np.zeros((b, b), dtype=np.float32)
    np.fill_diagonal(diag_penalty, -1.0e4)
    return weights, diag_penalty, n_anchors


def loss_scl(params, x: np.ndarray, y: np.ndarray, tau: float = 0.07) -> Tensor:
    """Supervised contrastive loss over l2-normalized projected features.

    Mean over anchors of the mean over their positives of
    -log(exp(s_ip / tau) / sum_{j != i} exp(s_ij / tau)), with
    s_ij the dot product of projected features.
    """
    y = np.asarray(y, dtype=np.int64)
    if y.size < 2:
        raise ValueError("loss_scl: need a batch of at least 2 samples")
    if tau <= 0:
        raise ValueError("loss_scl: temperature must be positive")
    weights, diag_penalty, _ = supcon_masks(y)
    p = _leaves(params)
    z = project(p, features(p, x))
    sims = mul(matmul(z, transpose(z)), 1.0 / tau)
    masked = sims + constant(diag_penalty)
    logp = log_softmax(masked)
    return mul(tsum(mul(logp, constant(weights))), -1.0)


def loss_kd(
    params,
    teacher: ParamSet,
    x: np.ndarray,
    temperature: float = 1.0,
    direction: str = "teacher_ref",
) -> Tensor:
    """KL divergence between the frozen previous-task model and the current one.

    teacher_ref (default) treats the previous model as the reference
    distribution, KL(teacher || student); student_ref uses the opposite
    order. Gradients flow only into the current parameters.
    """
    x = np.asarray(x)
    if x.size == 0:
        return constant(0.0)
    if temperature <= 0:
        raise ValueError("loss_kd: temperature must be positive")
    t_logits = logits(teacher, x).data / np.float32(temperature)
    t_shift = t_logits - t_logits.max(axis=-1, keepdims=True)
    t_prob = np.exp(t_shift) / np.exp(t_shift).sum(axis=-1, keepdims=True)
    p = _leaves(params)
    s_lp = log_softmax(mul(logits(p, x), 1.0 / temperature))
    if direction == "teacher_ref":
        t_entropy = float(np.mean((t_prob * np.log(np.maximum(t_prob, 1e-30))).sum(axis=-1)))
        cross = tmean(tsum(mul(s_lp, constant(t_prob)), axis=-1))
        return constant(t_entropy) - cross
    if direction == "student_ref":
        s_p = softmax(mul(logits(p, x), 1.0 / temperature))
        t_lp = np.log(np.maximum(t_prob, 1e-30)).astype(np.float32)
        inner = tsum(mul(s_p, s_lp - constant(t_lp)), axis=-1)
        return tmean(inner)
    raise ValueError(f"loss_kd: unknown direction {direction!r}")


def total_objective(terms, weights: LossWeights):
    """base + w1 * contrastive + w2 * history + w3 * distillation.

    Accepts plain floats or graph Tensors; `terms` is the 4-tuple
    (ce, scl, pce, kd).
    """
    ce, scl, pce, kd = terms
    if isinstance(ce, Tensor) or isinstance(scl, Tensor) or isinstance(pce, Tensor) or isinstance(kd, Tensor):
        out = ce
        out = out + mul(scl, weights.w1) if isinstance(scl, Tensor) else out + weights.w1 * scl
        out = out + mul(pce, weights.w2) if isinstance(pce, Tensor) else out + weights.w2 * pce
        out = out + mul(kd, weights.w3) if isinstance(kd, Tensor) else out + weights.w3 * kd
        return out
    return float(ce) + weights.w1 * float(scl) + weights.w2 * float(pce) + weights.w3 * float(kd)


def ewc_penalty(params, anchor: ParamSet, fisher: ParamSet, lam: float) -> Tensor:
    """lam/2 * sum_i F_i (theta_i - anchor_i)^2 over shared parameter names."""
    if lam < 0:
        raise ValueError("ewc_penalty: lambda must be >= 0")
    p = _leaves(params)
    total = constant(0.0)
    for name in anchor:
        if name not in p:
            continue
        diff = p[name] - constant(anchor[name])
        total = total + tsum(mul(constant(fisher[name]), square(diff)))
    return mul(total, 0.5 * lam)


def fisher_estimate(params: ParamSet, images: np.ndarray, labels: np.ndarray, n_samples: int | None = None) -> ParamSet:
    """Diagonal empirical Fisher: mean squared gradient of the observed-label log-likelihood."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("fisher_estimate: need at least one sample")
    count = labels.size if n_samples is None else min(n_samples, labels.size)
    flat = _flatten_images(images)
    acc = {name: np.zeros(params[name].shape, dtype=np.float64) for name in params}
    for i in range(count):
        def nll(leaves, xi=flat[i : i + 1], yi=labels[i : i + 1]):
            return loss_ce(leaves, xi, yi)

        _, grads = evaluate_with_gradients(nll, params)
        for name in params:
            acc[name] += grads[name].astype(np.float64) ** 2
    return ParamSet({name: (acc[name] / count).astype(np.float32) for name in params})
