"""Relational distillation core: similarity geometry and the KL objective.

All operations are pure and accept numpy arrays, torch tensors, or the
:class:`EmbeddingMatrix` wrapper. When handed torch tensors they stay on the
autograd tape, so the same functions serve training and the finite-difference
gradient tests. The loss depends only on the N x N similarity structure of a
batch, never on embedding widths, which is what makes the objective usable
across teachers of different dimensionality.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
import torch

from .errors import (
    BatchTooSmallError,
    InvalidTemperatureError,
    NonFiniteError,
    ShapeMismatchError,
    ZeroVectorError,
)

EPSILON_NORM = 1e-12

ArrayLike = Union[np.ndarray, torch.Tensor, "EmbeddingMatrix"]


def _unwrap(x):
    if isinstance(x, (EmbeddingMatrix, SimilarityMatrix, RelationalDistribution)):
        return x.values
    return x


def _tensor(x) -> torch.Tensor:
    """Torch view of ``x``; keeps autograd when ``x`` already is a tensor."""
    v = _unwrap(x)
    if isinstance(v, torch.Tensor):
        return v
    return torch.as_tensor(np.asarray(v, dtype=np.float64))


def _is_torch(x) -> bool:
    return isinstance(_unwrap(x), torch.Tensor)


def _sample_ids(x):
    return x.sample_ids if isinstance(x, EmbeddingMatrix) else None


def _all_finite(v) -> bool:
    if isinstance(v, torch.Tensor):
        return bool(torch.isfinite(v.detach()).all())
    return bool(np.isfinite(v).all())


@dataclass(frozen=True)
class EmbeddingMatrix:
    """N x d matrix of embedding rows with optional aligned sample ids.

    ``values`` may be a numpy array or a torch tensor; both are accepted
    everywhere downstream. N = 0 is legal (the result of embedding an empty
    sample list); operations that need rows enforce their own preconditions.
    """

    values: Union[np.ndarray, torch.Tensor]
    sample_ids: tuple = None

    def __post_init__(self):
        v = self.values
        if not isinstance(v, torch.Tensor):
            v = np.asarray(v)
            if not np.issubdtype(v.dtype, np.floating):
                v = v.astype(np.float64)
            object.__setattr__(self, "values", v)
        if v.ndim != 2:
            raise ShapeMismatchError(f"embedding matrix must be 2-D, got shape {tuple(v.shape)}")
        if v.shape[0] > 0 and v.shape[1] < 1:
            raise ShapeMismatchError("embedding dimension must be >= 1")
        if not _all_finite(v):
            raise NonFiniteError("embedding matrix contains non-finite values")
        if self.sample_ids is not None:
            ids = tuple(self.sample_ids)
            object.__setattr__(self, "sample_ids", ids)
            if len(ids) != v.shape[0]:
                raise ShapeMismatchError(f"{len(ids)} sample ids for {v.shape[0]} embedding rows")
            if len(set(ids)) != len(ids):
                raise ShapeMismatchError("sample ids must be unique")

    @property
    def n_samples(self) -> int:
        return int(self.values.shape[0])

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True)
class SimilarityMatrix:
    """Symmetric N x N cosine-similarity matrix with unit diagonal."""

    values: Union[np.ndarray, torch.Tensor]

    def __post_init__(self):
        t = _tensor(self.values).detach()
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ShapeMismatchError(f"similarity matrix must be square, got {tuple(t.shape)}")
        if not _all_finite(t):
            raise NonFiniteError("similarity matrix contains non-finite values")
        if t.shape[0] > 0:
            if float((t - t.T).abs().max()) > 1e-6:
                raise ShapeMismatchError("similarity matrix is not symmetric within 1e-6")
            if float((torch.diagonal(t) - 1.0).abs().max()) > 1e-6:
                raise ShapeMismatchError("similarity diagonal must be 1 within 1e-6")
            if float(t.abs().max()) > 1.0 + 1e-6:
                raise ShapeMismatchError("similarities must lie in [-1, 1] within 1e-6")

    @property
    def n_samples(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class RelationalDistribution:
    """Row-stochastic matrix of neighbor probabilities (zero diagonal)."""

    values: Union[np.ndarray, torch.Tensor]
    temperature: float = 1.0

    def __post_init__(self):
        t = _tensor(self.values).detach()
        if t.ndim != 2 or t.shape[0] != t.shape[1] or t.shape[0] < 2:
            raise BatchTooSmallError("relational distribution needs an N x N matrix with N >= 2")
        if self.temperature <= 0:
            raise InvalidTemperatureError(f"temperature must be > 0, got {self.temperature}")
        if float(torch.diagonal(t).abs().max()) != 0.0:
            raise ShapeMismatchError("relational distribution diagonal must be exactly zero")
        if float(t.min()) < 0:
            raise ShapeMismatchError("relational distribution entries must be nonnegative")
        if float((t.sum(dim=1) - 1.0).abs().max()) > 1e-9:
            raise ShapeMismatchError("relational distribution rows must sum to 1 within 1e-9")


def l2_normalize(embeddings: ArrayLike, epsilon: float = EPSILON_NORM):
    """Scale every row to unit Euclidean norm.

    Raises ZeroVectorError when any row norm is <= ``epsilon``; a zero
    embedding signals upstream corruption and is never silently replaced.
    """
    t = _tensor(embeddings)
    if t.ndim != 2:
        raise ShapeMismatchError(f"expected 2-D embeddings, got shape {tuple(t.shape)}")
    out = _unit_rows_unchecked(t, epsilon)
    if isinstance(embeddings, EmbeddingMatrix):
        vals = out if _is_torch(embeddings) else out.numpy()
        return EmbeddingMatrix(vals, embeddings.sample_ids)
    return out if isinstance(embeddings, torch.Tensor) else out.numpy()


def _unit_rows_unchecked(t: torch.Tensor, epsilon: float = EPSILON_NORM) -> torch.Tensor:
    if t.shape[0] == 0:
        return t
    norms = torch.linalg.vector_norm(t, dim=1)
    bad = (norms.detach() <= epsilon).nonzero().flatten()
    if len(bad):
        raise ZeroVectorError(f"row {int(bad[0])} has norm <= {epsilon}")
    return t / norms.unsqueeze(1)


def cosine_similarity_matrix(embeddings: ArrayLike, assume_normalized: bool = False) -> SimilarityMatrix:
    """Pairwise cosine similarities of the rows, [S]_ij = z_i . z_j."""
    t = _tensor(embeddings)
    if assume_normalized:
        norms = torch.linalg.vector_norm(t.detach(), dim=1)
        if t.shape[0] > 0 and float((norms - 1.0).abs().max()) > 1e-6:
            raise ZeroVectorError("assume_normalized=True but a row is not unit within 1e-6")
        z = t
    else:
        z = _unit_rows_unchecked(t)
    s = z @ z.T
    s = 0.5 * (s + s.T)  # exact symmetry, immune to matmul rounding order
    n = s.shape[0]
    if n:
        eye = torch.eye(n, dtype=torch.bool)
        s = s.masked_fill(eye, 0.0) + torch.eye(n, dtype=s.dtype)
    return SimilarityMatrix(s if _is_torch(embeddings) else s.detach().numpy())


def _off_diagonal_log_softmax(s: torch.Tensor, tau: float) -> torch.Tensor:
    """Row-wise log-softmax of S/tau over the off-diagonal entries.

    Diagonal positions come back as -inf (probability exactly zero). Relies
    on log_softmax's internal max subtraction for overflow safety.
    """
    mask = torch.eye(s.shape[0], dtype=torch.bool)
    logits = (s / tau).masked_fill(mask, float("-inf"))
    return torch.log_softmax(logits, dim=1)


def _check_relational_inputs(n: int, tau: float):
    if n < 2:
        raise BatchTooSmallError(f"need N >= 2 samples, got N = {n}")
    if not (tau > 0):
        raise InvalidTemperatureError(f"temperature must be > 0, got {tau}")


def relational_distribution(similarities, tau: float) -> RelationalDistribution:
    """Per-anchor softmax over the other samples' similarity scores.

    Row i holds p(j|i) = exp(S_ij/tau) / sum_{m != i} exp(S_im/tau), diagonal
    zero. Computed in float64 so the row-sum invariant holds to 1e-9 even for
    float32 inputs (the upcast is differentiable).
    """
    s = _tensor(similarities)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ShapeMismatchError("similarities must be a square matrix")
    _check_relational_inputs(int(s.shape[0]), tau)
    probs = torch.exp(_off_diagonal_log_softmax(s.double(), float(tau)))
    if not _is_torch(similarities):
        probs = probs.detach().numpy()
    return RelationalDistribution(probs, temperature=float(tau))


@dataclass
class DistillationLoss:
    """Total relational-distillation loss plus the per-teacher terms."""

    total: Union[float, torch.Tensor]
    per_teacher: tuple = field(default_factory=tuple)

    def __float__(self):
        return float(self.total)


def distillation_loss(
    student: ArrayLike,
    teachers: Sequence[ArrayLike],
    tau: float = 0.1,
    reduction: str = "mean_anchors",
) -> DistillationLoss:
    """Mean over teachers of the per-anchor KL(teacher || student) sums.

    Each side is l2-normalized, turned into cosine similarities, and softened
    into neighbor distributions at temperature ``tau``. The teacher
    distribution is the KL target, so gradients flow only into the student.
    ``reduction="mean_anchors"`` divides the anchor sum by N (batch-size
    invariant, the default); ``"sum_anchors"`` keeps the literal summed form.
    """
    if reduction not in ("sum_anchors", "mean_anchors"):
        raise ValueError(f"reduction must be 'sum_anchors' or 'mean_anchors', got {reduction!r}")
    if len(teachers) < 1:
        raise ShapeMismatchError("at least one teacher is required")
    zs = _tensor(student)
    sids = _sample_ids(student)
    n = int(zs.shape[0])
    _check_relational_inputs(n, tau)
    mats = []
    for k, teacher in enumerate(teachers):
        t = _tensor(teacher)
        if int(t.shape[0]) != n:
            raise ShapeMismatchError(f"teacher {k} has {int(t.shape[0])} rows, student has {n}")
        tids = _sample_ids(teacher)
        if sids is not None and tids is not None and tuple(tids) != tuple(sids):
            raise ShapeMismatchError(f"teacher {k} sample ids are not in student order")
        mats.append(t.detach())  # teachers are frozen; no gradient into p

    log_q = _off_diagonal_log_softmax(_pairwise_cosine(zs), tau)
    components = []
    for t in mats:
        log_p = _off_diagonal_log_softmax(_pairwise_cosine(t), tau)
        p = torch.exp(log_p)
        # p * (log p - log q), with the p = 0 limit contributing exactly 0
        diff = torch.where(p > 0, log_p - log_q, torch.zeros((), dtype=log_q.dtype))
        kl = (p * diff).sum()
        if reduction == "mean_anchors":
            kl = kl / n
        components.append(kl)
    total = sum(components) / len(components)
    if _is_torch(student):
        return DistillationLoss(total, tuple(components))
    return DistillationLoss(float(total), tuple(float(c) for c in components))


def _pairwise_cosine(t: torch.Tensor) -> torch.Tensor:
    z = _unit_rows_unchecked(t)
    return z @ z.T


def oracle_distillation_loss(
    student: ArrayLike,
    teachers: Sequence[ArrayLike],
    tau: float = 0.1,
    reduction: str = "mean_anchors",
) -> float:
    """Scalar-loop reimplementation of :func:`distillation_loss`.

    Element-wise Python arithmetic only; shares no code with the vectorized
    path. Exists as the independent cross-check the test suite runs against.
    """
    import math

    if reduction not in ("sum_anchors", "mean_anchors"):
        raise ValueError(f"reduction must be 'sum_anchors' or 'mean_anchors', got {reduction!r}")

    def rows(x):
        v = _unwrap(x)
        if isinstance(v, torch.Tensor):
            v = v.detach().numpy()
        return [[float(e) for e in row] for row in np.asarray(v)]

    def unit(rs):
        out = []
        for r in rs:
            s = 0.0
            for e in r:
                s += e * e
            nrm = math.sqrt(s)
            if nrm <= EPSILON_NORM:
                raise ZeroVectorError("zero row in oracle input")
            out.append([e / nrm for e in r])
        return out

    def neighbor_probs(rs):
        u = unit(rs)
        n = len(u)
        probs = []
        for i in range(n):
            sims = []
            for j in range(n):
                if j == i:
                    continue
                dot = 0.0
                for a, b in zip(u[i], u[j]):
                    dot += a * b
                sims.append(dot / tau)
            m = max(sims)
            exps = [math.exp(s - m) for s in sims]
            z = sum(exps)
            probs.append([e / z for e in exps])
        return probs

    zrows = rows(student)
    n = len(zrows)
    _check_relational_inputs(n, tau)
    if len(teachers) < 1:
        raise ShapeMismatchError("at least one teacher is required")
    for k, t in enumerate(teachers):
        if len(rows(t)) != n:
            raise ShapeMismatchError(f"teacher {k} row count differs from student")

    q = neighbor_probs(zrows)
    total = 0.0
    for t in teachers:
        p = neighbor_probs(rows(t))
        kl = 0.0
        for i in range(n):
            for pij, qij in zip(p[i], q[i]):
                if pij > 0.0:
                    kl += pij * (math.log(pij) - math.log(qij))
        if reduction == "mean_anchors":
            kl /= n
        total += kl
    return total / len(teachers)
