"""Region attention head: self/relation attention, region biased loss, fusion baselines.

Feature batches are arrays of shape (B, n, d) where n = k + 1 and index 0 is
the uncropped duplicate I_0. A single sample may be passed as (n, d). An
optional boolean mask of shape (B, n) marks which regions exist (landmark
cropping yields a variable k); masked regions never enter a sum, max or
gradient.
"""

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.numerics import (
    DimensionError,
    Parameter,
    affine,
    affine_backward,
    random_parameter,
    sigmoid,
    sigmoid_grad,
    softmax,
    softmax_cross_entropy,
)

EPS = 1e-12
VARIANTS = ("ran", "self_attention", "average", "concat", "score_fusion", "single_region")


@dataclass
class SelfAttentionParams:
    q0: Parameter


@dataclass
class RelationAttentionParams:
    q1: Parameter


@dataclass
class ClassifierParams:
    W: Parameter
    b: Parameter

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W.shape[1]

    def logits(self, x: np.ndarray) -> np.ndarray:
        return affine(x, self.W.value, self.b.value)

    def backward(self, x: np.ndarray, grad_logits: np.ndarray) -> np.ndarray:
        grad_x, gW, gb = affine_backward(x, self.W.value, grad_logits)
        self.W.accumulate(gW)
        self.b.accumulate(gb)
        return grad_x


@dataclass
class AttentionState:
    """mu (.., n), nu (.., n), Fm (.., d), Pran (.., 2d)."""

    mu: np.ndarray
    Fm: np.ndarray
    nu: Optional[np.ndarray] = None
    Pran: Optional[np.ndarray] = None

    def combined(self) -> np.ndarray:
        return self.mu if self.nu is None else self.mu * self.nu


# ---------------------------------------------------------------------------
# Shape helpers
# ---------------------------------------------------------------------------

def _batched(features, mask=None) -> Tuple[np.ndarray, np.ndarray, bool]:
    F = np.asarray(features, dtype=np.float64)
    single = F.ndim == 2
    if single:
        F = F[None]
    if F.ndim != 3 or F.shape[1] == 0:
        raise DimensionError(f"features must be (n, d) or (B, n, d) with n >= 1, got {np.shape(features)}")
    if mask is None:
        mask = np.ones(F.shape[:2], dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if single and mask.ndim == 1:
            mask = mask[None]
        if mask.shape != F.shape[:2]:
            raise DimensionError(f"mask shape {mask.shape} does not match features {F.shape[:2]}")
    return F, mask, single


def _unbatch(single: bool, *arrays):
    if not single:
        return arrays
    return tuple(None if a is None else a[0] for a in arrays)


def aggregate(weights: np.ndarray, vectors: np.ndarray) -> np.ndarray:
    """sum_i w_i v_i / max(sum_i w_i, EPS) over the region axis."""
    weights = np.asarray(weights, dtype=np.float64)
    vectors = np.asarray(vectors, dtype=np.float64)
    total = np.maximum(weights.sum(axis=-1), EPS)
    return np.einsum("...n,...nk->...k", weights, vectors) / total[..., None]


def concat_with_global(F: np.ndarray, Fm: np.ndarray) -> np.ndarray:
    """[F_i : F_m] for every region, region feature first."""
    return np.concatenate([F, np.broadcast_to(Fm[..., None, :], F.shape)], axis=-1)


# ---------------------------------------------------------------------------
# Attention stages
# ---------------------------------------------------------------------------

def self_attention(features, q0, mask=None) -> Tuple[np.ndarray, np.ndarray]:
    """mu_i = sigmoid(F_i . q0); F_m = sum mu_i F_i / sum mu_i."""
    F, mask, single = _batched(features, mask)
    q0 = np.asarray(getattr(q0, "value", q0), dtype=np.float64)
    if q0.shape != (F.shape[-1],):
        raise DimensionError(f"q0 has shape {q0.shape}, features have dim {F.shape[-1]}")
    mu = sigmoid(F @ q0)
    Fm = aggregate(mu * mask, F)
    return _unbatch(single, mu, Fm)


def relation_attention(features, Fm, mu, q1, mask=None) -> Tuple[np.ndarray, np.ndarray]:
    """nu_i = sigmoid([F_i : F_m] . q1); P_RAN = sum mu_i nu_i [F_i : F_m] / sum mu_i nu_i."""
    F, mask, single = _batched(features, mask)
    Fm = np.asarray(Fm, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if single:
        Fm, mu = Fm[None], mu[None]
    q1 = np.asarray(getattr(q1, "value", q1), dtype=np.float64)
    d = F.shape[-1]
    if Fm.shape != (F.shape[0], d) or mu.shape != F.shape[:2]:
        raise DimensionError(f"Fm {Fm.shape} / mu {mu.shape} do not match features {F.shape}")
    if q1.shape != (2 * d,):
        raise DimensionError(f"q1 has shape {q1.shape}, expected ({2 * d},)")
    C = concat_with_global(F, Fm)
    nu = sigmoid(C @ q1)
    Pran = aggregate(mu * nu * mask, C)
    return _unbatch(single, nu, Pran)


def _aggregate_backward(weights, vectors, result, grad_result):
    """Gradients of aggregate() w.r.t. its weights and vectors."""
    total = weights.sum(axis=-1)
    clamped = total < EPS
    denom = np.maximum(total, EPS)
    grad_vectors = (weights / denom[:, None])[..., None] * grad_result[:, None, :]
    dot_v = np.einsum("bnk,bk->bn", vectors, grad_result)
    dot_r = np.einsum("bk,bk->b", result, grad_result) * ~clamped
    grad_weights = (dot_v - dot_r[:, None]) / denom[:, None]
    return grad_weights, grad_vectors


def attention_backward(F, mask, q0, q1, state: AttentionState, grad_pran=None, grad_fm=None,
                       grad_mu=None) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """Backpropagate through relation then self attention.

    All arrays batched. Returns (grad_F, grad_q0, grad_q1); grad_q1 is None
    when the relation stage was not run.
    """
    mu = state.mu
    grad_F = np.zeros_like(F)
    grad_fm = np.zeros_like(state.Fm) if grad_fm is None else grad_fm.copy()
    grad_mu = np.zeros_like(mu) if grad_mu is None else grad_mu.copy()
    grad_q1 = None
    if grad_pran is not None:
        d = F.shape[-1]
        C = concat_with_global(F, state.Fm)
        nu = state.nu
        weights = mu * nu * mask
        grad_w, grad_C = _aggregate_backward(weights, C, state.Pran, grad_pran)
        grad_w = grad_w * mask
        grad_mu += grad_w * nu
        grad_t = grad_w * mu * sigmoid_grad(nu)
        grad_q1 = np.einsum("bn,bnk->k", grad_t, C)
        grad_C += grad_t[..., None] * q1
        grad_F += grad_C[..., :d]
        grad_fm += grad_C[..., d:].sum(axis=1)
    weights = mu * mask
    grad_w, grad_vec = _aggregate_backward(weights, F, state.Fm, grad_fm)
    grad_F += grad_vec
    grad_mu += grad_w * mask
    grad_s = grad_mu * sigmoid_grad(mu)
    grad_q0 = np.einsum("bn,bnd->d", grad_s, F)
    grad_F += grad_s[..., None] * q0
    return grad_F, grad_q0, grad_q1


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def _rb_parts(mu: np.ndarray, alpha: float, mask: np.ndarray):
    crops = np.where(mask[:, 1:], mu[:, 1:], -np.inf)
    # np.argmax keeps the lowest index on ties
    arg = np.argmax(crops, axis=1)
    has_crop = mask[:, 1:].any(axis=1)
    mu_max = np.where(has_crop, crops[np.arange(len(mu)), arg], mu[:, 0])
    slack = alpha - (mu_max - mu[:, 0])
    active = (slack > 0.0) & has_crop
    return np.where(active, slack, 0.0), active, arg + 1


def rb_loss(mu, alpha: float, mask=None):
    """max(0, alpha - (mu_max - mu_0)), mu_max over crops 1..k only."""
    mu = np.asarray(mu, dtype=np.float64)
    single = mu.ndim == 1
    if single:
        mu = mu[None]
    if mu.shape[1] < 2:
        raise ValueError("rb_loss needs mu for the duplicate face and at least one crop")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    mask = np.ones(mu.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(mu.shape)
    loss, _, _ = _rb_parts(mu, alpha, mask)
    return float(loss[0]) if single else loss


def rb_loss_grad(mu: np.ndarray, alpha: float, mask: Optional[np.ndarray] = None) -> np.ndarray:
    """Per-sample (sub)gradient of rb_loss w.r.t. mu; zero at the kink and when inactive."""
    mu = np.asarray(mu, dtype=np.float64)
    single = mu.ndim == 1
    if single:
        mu = mu[None]
    mask = np.ones(mu.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(mu.shape)
    _, active, arg = _rb_parts(mu, alpha, mask)
    grad = np.zeros_like(mu)
    rows = np.nonzero(active)[0]
    grad[rows, arg[rows]] = -1.0
    grad[rows, 0] = 1.0
    return grad[0] if single else grad


def total_loss(logits, label, mu, alpha: float, lambda_rb: float = 1.0, mask=None) -> float:
    """Mean over the batch of CE(logits, label) + lambda_rb * rb_loss(mu, alpha)."""
    logits = np.asarray(logits, dtype=np.float64)
    ce, _ = softmax_cross_entropy(logits, label)
    rb = rb_loss(mu, alpha, mask)
    return float(np.mean(np.asarray(ce) + lambda_rb * np.asarray(rb)))


# ---------------------------------------------------------------------------
# Forward composition
# ---------------------------------------------------------------------------

def forward(features, self_params: SelfAttentionParams, relation_params: RelationAttentionParams,
            classifier: ClassifierParams, mask=None) -> Tuple[AttentionState, np.ndarray]:
    """self_attention -> relation_attention -> classifier on P_RAN."""
    F, mask, single = _batched(features, mask)
    mu, Fm = self_attention(F, self_params.q0, mask)
    nu, Pran = relation_attention(F, Fm, mu, relation_params.q1, mask)
    logits = classifier.logits(Pran)
    if single:
        return AttentionState(mu[0], Fm[0], nu[0], Pran[0]), logits[0]
    return AttentionState(mu, Fm, nu, Pran), logits


# ---------------------------------------------------------------------------
# Fusion baselines
# ---------------------------------------------------------------------------

def baseline_average_pool(features, mask=None) -> np.ndarray:
    """Unweighted mean over regions."""
    if isinstance(features, (list, tuple)) and len(features) == 0:
        raise ValueError("average pooling needs at least one feature")
    F, mask, single = _batched(features, mask)
    pooled = aggregate(mask.astype(np.float64), F)
    return pooled[0] if single else pooled


def baseline_concat(features, num_regions: Optional[int] = None) -> np.ndarray:
    """Order-preserving concatenation; every sample must have the same region count."""
    if isinstance(features, (list, tuple)):
        if not features:
            raise ValueError("concatenation needs at least one feature")
        if isinstance(features[0], (list, tuple)) or np.ndim(features[0]) == 2:
            counts = {len(sample) for sample in features}
            if len(counts) != 1:
                raise DimensionError(f"ragged region counts {sorted(counts)}; concatenation needs a fixed k")
    F = np.asarray(features, dtype=np.float64)
    if F.ndim == 2:
        F = F[None]
        single = True
    else:
        single = False
    if num_regions is not None and F.shape[1] != num_regions:
        raise DimensionError(f"expected {num_regions} regions, got {F.shape[1]}")
    out = F.reshape(F.shape[0], -1)
    return out[0] if single else out


def baseline_score_fusion(per_region_logits, mask=None) -> np.ndarray:
    """Mean of per-region softmax probabilities; prediction is its argmax."""
    if isinstance(per_region_logits, (list, tuple)):
        if not per_region_logits:
            raise ValueError("score fusion needs at least one logit vector")
        sizes = {np.shape(v)[-1] for v in per_region_logits}
        if len(sizes) != 1:
            raise DimensionError(f"ragged class counts {sorted(sizes)}")
    L, mask, single = _batched(per_region_logits, mask)
    probs = aggregate(mask.astype(np.float64), softmax(L))
    return probs[0] if single else probs


# ---------------------------------------------------------------------------
# Trainable models sharing one interface
# ---------------------------------------------------------------------------

@dataclass
class StepResult:
    ce: float
    rb: float
    probs: np.ndarray
    grad_features: np.ndarray

    @property
    def total(self) -> float:
        return self.ce + self.rb


def _init_classifier(rng: np.random.Generator, num_classes: int, input_dim: int) -> ClassifierParams:
    return ClassifierParams(
        W=random_parameter(rng, "classifier.W", (num_classes, input_dim)),
        b=Parameter("classifier.b", np.zeros(num_classes)),
    )


class RegionModel:
    """Base class: a head mapping region features (B, n, d) to class scores.

    Plain classifiers implement _inputs/_inputs_backward; the loss, the
    backward pass and prediction are shared.
    """

    variant = "base"
    has_attention = False

    def __init__(self, feature_dim: int, num_classes: int, num_regions: int, seed: int = 0):
        if num_classes < 2:
            raise ValueError("need at least 2 classes")
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.num_regions = num_regions
        self.rng = np.random.default_rng([seed, 2])
        self.classifier = _init_classifier(self.rng, num_classes, self._classifier_input_dim())

    def _classifier_input_dim(self) -> int:
        return self.feature_dim

    def parameters(self) -> List[Parameter]:
        return [self.classifier.W, self.classifier.b]

    def attention(self, features, mask=None) -> Optional[AttentionState]:
        return None

    def _check(self, features, mask):
        F, mask, _ = _batched(features, mask)
        if F.shape[-1] != self.feature_dim:
            raise DimensionError(f"features have dim {F.shape[-1]}, model expects {self.feature_dim}")
        return F, mask

    def _inputs(self, F: np.ndarray, mask: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _inputs_backward(self, F: np.ndarray, mask: np.ndarray, grad_x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict_proba(self, features, mask=None) -> np.ndarray:
        F, mask = self._check(features, mask)
        return softmax(self.classifier.logits(self._inputs(F, mask)))

    def loss(self, features, labels, mask=None, alpha: float = 0.02, lambda_rb: float = 1.0) -> float:
        """Forward-only batch-mean loss; touches no gradient."""
        F, mask = self._check(features, mask)
        ce, _ = softmax_cross_entropy(self.classifier.logits(self._inputs(F, mask)), np.asarray(labels))
        return float(np.mean(ce))

    def loss_and_backward(self, features, labels, mask=None, alpha: float = 0.02,
                          lambda_rb: float = 1.0) -> StepResult:
        """Batch-mean loss; accumulates head gradients and returns d loss / d features."""
        F, mask = self._check(features, mask)
        x = self._inputs(F, mask)
        logits = self.classifier.logits(x)
        ce, grad_logits = softmax_cross_entropy(logits, np.asarray(labels))
        grad_x = self.classifier.backward(x, grad_logits / F.shape[0])
        return StepResult(float(ce.mean()), 0.0, softmax(logits), self._inputs_backward(F, mask, grad_x))


class RANModel(RegionModel):
    """Full RAN, or with relation=False the F_m-only self-attention ablation."""

    has_attention = True

    def __init__(self, feature_dim: int, num_classes: int, num_regions: int, seed: int = 0,
                 relation: bool = True):
        self.relation = relation
        self.variant = "ran" if relation else "self_attention"
        super().__init__(feature_dim, num_classes, num_regions, seed)
        scale = 0.1 / np.sqrt(feature_dim)
        self.self_params = SelfAttentionParams(random_parameter(self.rng, "q0", (feature_dim,), scale))
        self.relation_params = RelationAttentionParams(random_parameter(self.rng, "q1", (2 * feature_dim,), scale))

    def _classifier_input_dim(self) -> int:
        return 2 * self.feature_dim if self.relation else self.feature_dim

    def parameters(self) -> List[Parameter]:
        params = [self.self_params.q0]
        if self.relation:
            params.append(self.relation_params.q1)
        return params + super().parameters()

    def attention(self, features, mask=None) -> AttentionState:
        F, mask = self._check(features, mask)
        mu, Fm = self_attention(F, self.self_params.q0, mask)
        if not self.relation:
            return AttentionState(mu, Fm)
        nu, Pran = relation_attention(F, Fm, mu, self.relation_params.q1, mask)
        return AttentionState(mu, Fm, nu, Pran)

    def _representation(self, state: AttentionState) -> np.ndarray:
        return state.Pran if self.relation else state.Fm

    def logits(self, features, mask=None) -> Tuple[AttentionState, np.ndarray]:
        state = self.attention(features, mask)
        return state, self.classifier.logits(self._representation(state))

    def predict_proba(self, features, mask=None) -> np.ndarray:
        _, logits = self.logits(features, mask)
        return softmax(logits)

    def _uses_rb(self, F: np.ndarray, lambda_rb: float) -> bool:
        return F.shape[1] >= 2 and lambda_rb != 0.0

    def loss(self, features, labels, mask=None, alpha: float = 0.02, lambda_rb: float = 1.0) -> float:
        F, mask = self._check(features, mask)
        state, logits = self.logits(F, mask)
        if self._uses_rb(F, lambda_rb):
            return total_loss(logits, np.asarray(labels), state.mu, alpha, lambda_rb, mask)
        ce, _ = softmax_cross_entropy(logits, np.asarray(labels))
        return float(np.mean(ce))

    def loss_and_backward(self, features, labels, mask=None, alpha: float = 0.02,
                          lambda_rb: float = 1.0) -> StepResult:
        F, mask = self._check(features, mask)
        labels = np.asarray(labels)
        batch = F.shape[0]
        state, logits = self.logits(F, mask)
        ce, grad_logits = softmax_cross_entropy(logits, labels)
        rep = self._representation(state)
        grad_rep = self.classifier.backward(rep, grad_logits / batch)
        if self._uses_rb(F, lambda_rb):
            rb = rb_loss(state.mu, alpha, mask)
            grad_mu = lambda_rb * rb_loss_grad(state.mu, alpha, mask) / batch
        else:
            rb = np.zeros(batch)
            grad_mu = None
        grad_F, grad_q0, grad_q1 = attention_backward(
            F, mask, self.self_params.q0.value, self.relation_params.q1.value, state,
            grad_pran=grad_rep if self.relation else None,
            grad_fm=None if self.relation else grad_rep,
            grad_mu=grad_mu,
        )
        self.self_params.q0.accumulate(grad_q0)
        if self.relation:
            self.relation_params.q1.accumulate(grad_q1)
        return StepResult(float(ce.mean()), float(lambda_rb * np.mean(rb)), softmax(logits), grad_F)


class AveragePoolModel(RegionModel):
    variant = "average"

    def _inputs(self, F, mask):
        return baseline_average_pool(F, mask)

    def _inputs_backward(self, F, mask, grad_x):
        weights = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1)
        return weights[..., None] * grad_x[:, None, :]


class ConcatModel(RegionModel):
    variant = "concat"

    def _classifier_input_dim(self) -> int:
        return self.num_regions * self.feature_dim

    def _inputs(self, F, mask):
        if not mask.all():
            raise DimensionError("concatenation needs every region present; got a ragged crop set")
        return baseline_concat(F, self.num_regions)

    def _inputs_backward(self, F, mask, grad_x):
        return grad_x.reshape(F.shape)


class SingleRegionModel(RegionModel):
    """Classifier on one region only; region 0 is the plain whole-face baseline."""

    variant = "single_region"

    def __init__(self, feature_dim: int, num_classes: int, num_regions: int, seed: int = 0,
                 region_index: int = 0):
        if not 0 <= region_index < num_regions:
            raise ValueError(f"region_index {region_index} outside 0..{num_regions - 1}")
        self.region_index = region_index
        super().__init__(feature_dim, num_classes, num_regions, seed)

    def _inputs(self, F, mask):
        if not mask[:, self.region_index].all():
            raise DimensionError(f"region {self.region_index} is missing from some samples")
        return F[:, self.region_index]

    def _inputs_backward(self, F, mask, grad_x):
        grad_F = np.zeros_like(F)
        grad_F[:, self.region_index] = grad_x
        return grad_F


class ScoreFusionModel(RegionModel):
    """One classifier shared by every region, trained on all regions, predicting by mean softmax."""

    variant = "score_fusion"

    def predict_proba(self, features, mask=None) -> np.ndarray:
        F, mask = self._check(features, mask)
        return baseline_score_fusion(self.classifier.logits(F), mask)

    def _region_ce(self, F, labels, mask):
        logits = self.classifier.logits(F)
        labels = np.repeat(np.asarray(labels)[:, None], F.shape[1], axis=1)
        ce, grad_logits = softmax_cross_entropy(logits, labels)
        counts = np.maximum(mask.sum(axis=1, keepdims=True), 1)
        sample_ce = (ce * mask).sum(axis=1) / counts[:, 0]
        return logits, sample_ce, grad_logits * (mask / counts)[..., None]

    def loss(self, features, labels, mask=None, alpha: float = 0.02, lambda_rb: float = 1.0) -> float:
        F, mask = self._check(features, mask)
        _, sample_ce, _ = self._region_ce(F, labels, mask)
        return float(sample_ce.mean())

    def loss_and_backward(self, features, labels, mask=None, alpha: float = 0.02,
                          lambda_rb: float = 1.0) -> StepResult:
        F, mask = self._check(features, mask)
        logits, sample_ce, grad_logits = self._region_ce(F, labels, mask)
        grad_F = self.classifier.backward(F, grad_logits / F.shape[0])
        return StepResult(float(sample_ce.mean()), 0.0, baseline_score_fusion(logits, mask), grad_F)


def build_model(variant: str, feature_dim: int, num_classes: int, num_regions: int, seed: int = 0,
                region_index: int = 0) -> RegionModel:
    if variant == "ran":
        return RANModel(feature_dim, num_classes, num_regions, seed, relation=True)
    if variant == "self_attention":
        return RANModel(feature_dim, num_classes, num_regions, seed, relation=False)
    if variant == "average":
        return AveragePoolModel(feature_dim, num_classes, num_regions, seed)
    if variant == "concat":
        return ConcatModel(feature_dim, num_classes, num_regions, seed)
    if variant == "score_fusion":
        return ScoreFusionModel(feature_dim, num_classes, num_regions, seed)
    if variant == "single_region":
        return SingleRegionModel(feature_dim, num_classes, num_regions, seed, region_index)
    raise ValueError(f"unknown model variant {variant!r}; expected one of {VARIANTS}")


def permute_crops(features: np.ndarray, order: Sequence[int]) -> np.ndarray:
    """Reorder crops 1..k by `order` (a permutation of 1..k); I_0 stays first."""
    F = np.asarray(features)
    order = list(order)
    if sorted(order) != list(range(1, F.shape[-2])):
        raise ValueError(f"{order} is not a permutation of 1..{F.shape[-2] - 1}")
    return np.concatenate([F[..., :1, :], F[..., order, :]], axis=-2)
