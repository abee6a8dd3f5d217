"""Gated attention-based multiple-instance learning for slide-level survival.

A bag of patch embeddings H (N x d) is pooled with learned softmax weights

    a_n = softmax_n( w^T tanh(V h_n) )                 (non-gated)
    a_n = softmax_n( w^T [tanh(V h_n) * sigmoid(U h_n)] )   (gated, default)

into g = sum_n a_n h_n, scored by a linear head and a sigmoid, and trained
with binary cross-entropy plus an L1 penalty on the attention weights (one
whole slide per optimizer step). Everything is permutation invariant over
instances by construction.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin

from .cohort import FoldAssignment, SynthBag
from .errors import (
    ConfigError,
    DegenerateLabelsError,
    DivergenceError,
    ShapeError,
)
from .survival import roc_auc

PROB_EPS = 1e-7


@dataclass
class Bag:
    """One slide's patch-embedding matrix plus its survival outcome."""

    slide_id: str
    patient_id: str
    features: np.ndarray
    label: int
    time_months: float = 0.0
    event: int = 0

    def __post_init__(self):
        f = np.asarray(self.features)
        if f.ndim != 2 or f.shape[0] < 1:
            raise ShapeError(f"bag {self.slide_id!r}: features must be N x d with N >= 1")
        self.features = f
        if self.label not in (0, 1):
            raise ShapeError(f"bag {self.slide_id!r}: label must be 0 or 1")

    @classmethod
    def from_synth(cls, s: SynthBag) -> "Bag":
        return cls(s.slide_id, s.patient_id, s.features, s.label, s.time_months, s.event)


def check_bag_label(bag: Bag, horizon_months: float = 60.0) -> None:
    """Enforce label = 1 iff event within the horizon."""
    expected = 1 if (bag.event == 1 and bag.time_months <= horizon_months) else 0
    if bag.label != expected:
        raise ConfigError(
            f"bag {bag.slide_id!r}: label {bag.label} inconsistent with time="
            f"{bag.time_months}, event={bag.event} at horizon {horizon_months}"
        )


@dataclass
class AttentionParams:
    """Weights of the attention pooling network and the prediction head.

    attention_V: hidden x d tanh branch; attention_U: hidden x d sigmoid
    gate (None when non-gated); attention_w: length-hidden scoring vector;
    head_weight/head_bias: the linear survival head. Tensors may require
    grad, in which case the functional ops below stay differentiable.
    """

    attention_V: torch.Tensor
    attention_w: torch.Tensor
    head_weight: torch.Tensor
    head_bias: torch.Tensor
    attention_U: Optional[torch.Tensor] = None
    gated: bool = True

    def __post_init__(self):
        if self.gated and self.attention_U is None:
            raise ConfigError("gated attention requires attention_U")
        hidden, d = self.attention_V.shape
        if self.attention_w.shape != (hidden,):
            raise ShapeError(f"attention_w must have shape ({hidden},)")
        if self.attention_U is not None and tuple(self.attention_U.shape) != (hidden, d):
            raise ShapeError(f"attention_U must have shape ({hidden}, {d})")
        if self.head_weight.shape != (d,):
            raise ShapeError(f"head_weight must have shape ({d},)")

    @property
    def hidden(self) -> int:
        return int(self.attention_V.shape[0])

    @property
    def feature_dim(self) -> int:
        return int(self.attention_V.shape[1])


@dataclass
class SlidePrediction:
    slide_id: str
    patient_id: str
    logit: float
    probability: float
    attention: np.ndarray
    fold: int = -1


def _as_tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def attention_weights(features, params: AttentionParams) -> torch.Tensor:
    """Softmax attention over a bag's instances; nonnegative, sums to 1."""
    h = _as_tensor(features, dtype=params.attention_V.dtype)
    if h.ndim != 2 or h.shape[1] != params.feature_dim:
        raise ShapeError(
            f"bag features must be N x {params.feature_dim}, got {tuple(h.shape)}"
        )
    pre = torch.tanh(h @ params.attention_V.T)
    if params.gated:
        pre = pre * torch.sigmoid(h @ params.attention_U.T)
    scores = pre @ params.attention_w
    return torch.softmax(scores, dim=0)


def bag_pool(features, attention) -> torch.Tensor:
    """Attention-weighted sum of the instance embeddings."""
    h = _as_tensor(features)
    a = _as_tensor(attention, dtype=h.dtype)
    if a.ndim != 1 or a.shape[0] != h.shape[0]:
        raise ShapeError("attention weights must align with bag rows")
    if abs(float(a.detach().sum()) - 1.0) > 1e-6:
        raise ShapeError("attention weights must sum to 1 within 1e-6")
    return a @ h


def predict_logit(features, params: AttentionParams) -> Tuple[torch.Tensor, torch.Tensor]:
    """(logit, attention) for one bag; keeps autograd when params do."""
    a = attention_weights(features, params)
    h = _as_tensor(features, dtype=params.attention_V.dtype)
    g = a @ h
    logit = params.head_weight @ g + params.head_bias
    return logit, a


def predict_slide(bag: Bag, params: AttentionParams, fold: int = -1) -> SlidePrediction:
    logit, a = predict_logit(bag.features, params)
    return SlidePrediction(
        slide_id=bag.slide_id,
        patient_id=bag.patient_id,
        logit=float(logit),
        probability=float(torch.sigmoid(logit)),
        attention=a.detach().cpu().numpy(),
        fold=fold,
    )


def stage2_loss(
    probabilities,
    labels,
    params: Optional[AttentionParams] = None,
    l1_coeff: float = 5e-4,
) -> torch.Tensor:
    """Summed BCE over the minibatch plus L1 on the attention weights.

    Probabilities are clamped to [1e-7, 1 - 1e-7] before the logs. The L1
    term covers attention_V, attention_U and attention_w but not the head.
    """
    p = _as_tensor(probabilities)
    if p.ndim == 0:
        p = p.unsqueeze(0)
    y = _as_tensor(labels, dtype=p.dtype)
    if y.ndim == 0:
        y = y.unsqueeze(0)
    if p.shape != y.shape:
        raise ShapeError(f"probabilities {tuple(p.shape)} vs labels {tuple(y.shape)}")
    if l1_coeff < 0:
        raise ConfigError("l1_coeff must be >= 0")
    p = p.clamp(PROB_EPS, 1.0 - PROB_EPS)
    bce = -(y * torch.log(p) + (1.0 - y) * torch.log(1.0 - p)).sum()
    if params is not None and l1_coeff > 0:
        l1 = params.attention_V.abs().sum() + params.attention_w.abs().sum()
        if params.attention_U is not None:
            l1 = l1 + params.attention_U.abs().sum()
        bce = bce + l1_coeff * l1
    return bce


class GatedAttentionPooler(torch.nn.Module):
    """nn.Module wrapper over the functional ops (single source of math)."""

    def __init__(self, feature_dim: int, hidden_dim: int = 512, gated: bool = True):
        super().__init__()
        self.gated = gated
        self.attention_V = torch.nn.Linear(feature_dim, hidden_dim, bias=False)
        self.attention_U = torch.nn.Linear(feature_dim, hidden_dim, bias=False) if gated else None
        self.attention_w = torch.nn.Linear(hidden_dim, 1, bias=False)
        self.head = torch.nn.Linear(feature_dim, 1, bias=True)

    @property
    def params(self) -> AttentionParams:
        return AttentionParams(
            attention_V=self.attention_V.weight,
            attention_U=self.attention_U.weight if self.gated else None,
            attention_w=self.attention_w.weight.squeeze(0),
            head_weight=self.head.weight.squeeze(0),
            head_bias=self.head.bias.squeeze(0),
            gated=self.gated,
        )

    def forward(self, features) -> Tuple[torch.Tensor, torch.Tensor]:
        return predict_logit(features, self.params)


@dataclass(frozen=True)
class Stage2Config:
    """Training protocol for the slide-level survival model."""

    hidden_dim: int = 512
    gated: bool = True
    learning_rate: float = 2e-4
    epochs: int = 100
    patience: int = 10
    l1_coeff: float = 5e-4
    seed: int = 0
    patient_level_auc: bool = True
    horizon_months: float = 60.0


def _patient_probabilities(
    predictions: Sequence[SlidePrediction], labels_by_patient: Dict[str, int]
) -> Tuple[np.ndarray, np.ndarray]:
    """Mean slide probability per patient, paired with the patient label."""
    grouped: Dict[str, List[float]] = {}
    for pred in predictions:
        grouped.setdefault(pred.patient_id, []).append(pred.probability)
    pids = sorted(grouped)
    probs = np.array([float(np.mean(grouped[p])) for p in pids])
    labels = np.array([labels_by_patient[p] for p in pids], dtype=int)
    return probs, labels


class AttentionMILClassifier(BaseEstimator, ClassifierMixin):
    """sklearn-style wrapper around one gated-ABMIL survival model.

    fit() consumes a list of Bag objects (labels ride along in the bags);
    an optional ``val_bags`` list drives early stopping on validation AUC.
    """

    def __init__(
        self,
        hidden_dim: int = 512,
        gated: bool = True,
        learning_rate: float = 2e-4,
        epochs: int = 100,
        patience: int = 10,
        l1_coeff: float = 5e-4,
        seed: int = 0,
        patient_level_auc: bool = True,
    ):
        self.hidden_dim = hidden_dim
        self.gated = gated
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.patience = patience
        self.l1_coeff = l1_coeff
        self.seed = seed
        self.patient_level_auc = patient_level_auc

    def fit(self, bags: Sequence[Bag], y=None, val_bags: Optional[Sequence[Bag]] = None):
        bags = list(bags)
        if not bags:
            raise ConfigError("no training bags")
        labels = [b.label for b in bags] if y is None else list(y)
        if len(labels) != len(bags):
            raise ShapeError("labels must align with bags")
        d = bags[0].features.shape[1]
        for b in bags:
            if b.features.shape[1] != d:
                raise ShapeError(f"bag {b.slide_id!r} feature dim {b.features.shape[1]} != {d}")

        torch.manual_seed(self.seed)
        model = GatedAttentionPooler(d, self.hidden_dim, self.gated)
        opt = torch.optim.Adam(model.parameters(), lr=self.learning_rate)
        rng = np.random.default_rng(self.seed)

        best_auc = -math.inf
        best_state = copy.deepcopy(model.state_dict())
        best_epoch = 0
        history = []
        stopped_epoch = None
        for epoch in range(1, self.epochs + 1):
            model.train()
            order = rng.permutation(len(bags))
            epoch_loss = 0.0
            for idx in order:
                bag = bags[idx]
                opt.zero_grad()
                logit, _ = model(torch.as_tensor(bag.features, dtype=torch.float32))
                prob = torch.sigmoid(logit)
                loss = stage2_loss(prob, float(labels[idx]), model.params, self.l1_coeff)
                if not torch.isfinite(loss):
                    raise DivergenceError(
                        f"non-finite training loss at epoch {epoch}, slide {bag.slide_id!r}"
                    )
                loss.backward()
                opt.step()
                epoch_loss += float(loss.detach())
            row = {"epoch": epoch, "train_loss": epoch_loss / len(bags)}
            if val_bags:
                val_auc = self._validation_auc(model, val_bags)
                row["val_auc"] = val_auc
                if val_auc > best_auc:
                    best_auc = val_auc
                    best_state = copy.deepcopy(model.state_dict())
                    best_epoch = epoch
                elif epoch - best_epoch >= self.patience:
                    history.append(row)
                    stopped_epoch = epoch
                    break
            history.append(row)
        if val_bags:
            model.load_state_dict(best_state)
        model.eval()
        self.model_ = model
        self.history_ = history
        self.best_epoch_ = best_epoch if val_bags else None
        self.stopped_epoch_ = stopped_epoch
        self.n_features_in_ = d
        self.classes_ = np.array([0, 1])
        return self

    def _validation_auc(self, model: GatedAttentionPooler, val_bags: Sequence[Bag]) -> float:
        preds = [self._predict_bag(model, b) for b in val_bags]
        if self.patient_level_auc:
            labels_by_patient = {b.patient_id: b.label for b in val_bags}
            probs, labels = _patient_probabilities(preds, labels_by_patient)
        else:
            probs = np.array([p.probability for p in preds])
            labels = np.array([b.label for b in val_bags], dtype=int)
        if len(np.unique(labels)) < 2:
            raise DegenerateLabelsError("validation split needs both classes for AUC")
        return roc_auc(probs, labels)

    @staticmethod
    def _predict_bag(model: GatedAttentionPooler, bag: Bag, fold: int = -1) -> SlidePrediction:
        with torch.no_grad():
            logit, a = model(torch.as_tensor(bag.features, dtype=torch.float32))
        return SlidePrediction(
            slide_id=bag.slide_id,
            patient_id=bag.patient_id,
            logit=float(logit),
            probability=float(torch.sigmoid(logit)),
            attention=a.numpy(),
            fold=fold,
        )

    def predict_bags(self, bags: Sequence[Bag], fold: int = -1) -> List[SlidePrediction]:
        self._check_fitted()
        return [self._predict_bag(self.model_, b, fold) for b in bags]

    def predict_proba(self, bags: Sequence[Bag]) -> np.ndarray:
        preds = self.predict_bags(bags)
        p = np.array([pr.probability for pr in preds])
        return np.column_stack([1.0 - p, p])

    def predict(self, bags: Sequence[Bag]) -> np.ndarray:
        return (self.predict_proba(bags)[:, 1] >= 0.5).astype(int)

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise ConfigError("classifier is not fitted")


@dataclass
class Stage2FoldResult:
    fold: int
    classifier: AttentionMILClassifier
    predictions: List[SlidePrediction]
    best_epoch: Optional[int]
    stopped_epoch: Optional[int]


def train_stage2(
    bags: Sequence[Bag],
    split: FoldAssignment,
    config: Stage2Config = Stage2Config(),
) -> Tuple[List[Stage2FoldResult], List[SlidePrediction]]:
    """Per-fold training with early stopping; returns out-of-fold predictions.

    Every bag of a patient lands in that patient's fold. Fold f trains on the
    inner 85% of the remaining patients' bags, early-stops on the inner 15%
    validation AUC (patience per config, best checkpoint kept), and predicts
    the held-out fold. Per-fold seeds are config.seed + fold so serial and
    parallel execution agree.
    """
    for bag in bags:
        check_bag_label(bag, config.horizon_months)
    by_patient: Dict[str, List[Bag]] = {}
    for bag in bags:
        by_patient.setdefault(bag.patient_id, []).append(bag)
    unknown = set(by_patient) - set(split.fold_of)
    if unknown:
        raise ConfigError(f"bags reference patients missing from the fold assignment: {sorted(unknown)[:5]}")

    def collect(pids) -> List[Bag]:
        out: List[Bag] = []
        for pid in pids:
            out.extend(by_patient.get(pid, []))
        return out

    results: List[Stage2FoldResult] = []
    pooled: List[SlidePrediction] = []
    for fold in range(split.k):
        train_bags = collect(split.inner_train[fold])
        val_bags = collect(split.inner_val[fold])
        test_bags = collect(split.test_patients(fold))
        if not train_bags or not test_bags:
            raise ConfigError(f"fold {fold}: empty train or test partition")
        clf = AttentionMILClassifier(
            hidden_dim=config.hidden_dim,
            gated=config.gated,
            learning_rate=config.learning_rate,
            epochs=config.epochs,
            patience=config.patience,
            l1_coeff=config.l1_coeff,
            seed=config.seed + fold,
            patient_level_auc=config.patient_level_auc,
        )
        clf.fit(train_bags, val_bags=val_bags)
        preds = clf.predict_bags(test_bags, fold=fold)
        results.append(
            Stage2FoldResult(
                fold=fold,
                classifier=clf,
                predictions=preds,
                best_epoch=clf.best_epoch_,
                stopped_epoch=clf.stopped_epoch_,
            )
        )
        pooled.extend(preds)
    pooled.sort(key=lambda p: (p.patient_id, p.slide_id))
    return results, pooled
