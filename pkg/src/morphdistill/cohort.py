"""Cohort data model, stratified patient-disjoint folds, synthetic cohorts.

Fold construction standardizes the chosen covariates, clusters patients with
a deterministic Lloyd k-means, and deals each cluster's patients into folds
round-robin while alternating outcome labels, so folds stay balanced on both
covariates and outcomes. All randomness flows from one seed.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, MissingCovariateError, ShapeError, UnknownSubgroupError

COHORT_CORE_COLUMNS = ("patient_id", "slide_id", "label", "time_months", "event")
COVARIATE_COLUMNS = ("age", "bmi", "income")


@dataclass
class PatientRecord:
    """One patient: covariates, outcome, subgroup keys, and their slides."""

    patient_id: str
    covariates: Dict[str, float] = field(default_factory=dict)
    label: int = 0
    time_months: float = 0.0
    event: int = 0
    subgroups: Dict[str, str] = field(default_factory=dict)
    slide_ids: List[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.slide_ids:
            raise ShapeError(f"patient {self.patient_id!r} has no slides")
        for key, value in self.covariates.items():
            if not math.isfinite(value):
                raise ShapeError(f"patient {self.patient_id!r}: covariate {key!r} is not finite")


@dataclass
class FoldAssignment:
    """Patient -> test-fold map plus the per-fold inner train/val split."""

    k: int
    fold_of: Dict[str, int]
    inner_train: Dict[int, List[str]]
    inner_val: Dict[int, List[str]]
    seed: int = 0

    def __post_init__(self):
        folds = set(self.fold_of.values())
        if folds - set(range(self.k)):
            raise ConfigError("fold indices out of range")
        sizes = self.fold_sizes()
        if sizes and max(sizes) - min(sizes) > 1:
            raise ConfigError(f"fold sizes differ by more than one patient: {sizes}")
        for f in range(self.k):
            train, val = set(self.inner_train.get(f, [])), set(self.inner_val.get(f, []))
            if train & val:
                raise ConfigError(f"fold {f}: inner train/val overlap")
            test = {p for p, ff in self.fold_of.items() if ff == f}
            if (train | val) & test:
                raise ConfigError(f"fold {f}: test patients leak into the inner split")

    def fold_sizes(self) -> List[int]:
        sizes = [0] * self.k
        for f in self.fold_of.values():
            sizes[f] += 1
        return sizes

    def test_patients(self, fold: int) -> List[str]:
        return sorted(p for p, f in self.fold_of.items() if f == fold)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "k": self.k,
            "assignments": self.fold_of,
            "inner_splits": {
                str(f): {"train": self.inner_train[f], "val": self.inner_val[f]}
                for f in range(self.k)
            },
        }

    @classmethod
    def from_json(cls, payload: dict) -> "FoldAssignment":
        inner = payload.get("inner_splits", {})
        return cls(
            k=int(payload["k"]),
            fold_of={p: int(f) for p, f in payload["assignments"].items()},
            inner_train={int(f): list(v["train"]) for f, v in inner.items()},
            inner_val={int(f): list(v["val"]) for f, v in inner.items()},
            seed=int(payload.get("seed", 0)),
        )


def _kmeans(x: np.ndarray, n_clusters: int, rng: np.random.Generator, n_iter: int = 100) -> np.ndarray:
    """Plain Lloyd iterations with greedy k-means++ seeding; fully deterministic."""
    n = x.shape[0]
    centers = np.empty((n_clusters, x.shape[1]))
    first = int(rng.integers(n))
    centers[0] = x[first]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for c in range(1, n_clusters):
        total = float(d2.sum())
        if total <= 0:
            centers[c:] = x[first]
            break
        probs = d2 / total
        centers[c] = x[int(rng.choice(n, p=probs))]
        d2 = np.minimum(d2, np.sum((x - centers[c]) ** 2, axis=1))
    assign = np.full(n, -1, dtype=int)
    for _ in range(n_iter):
        dists = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = np.argmin(dists, axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for c in range(n_clusters):
            members = x[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return assign


def stratified_kfold(
    patients: Sequence[PatientRecord],
    covariate_keys: Sequence[str] = COVARIATE_COLUMNS,
    k: int = 5,
    seed: int = 0,
    val_fraction: float = 0.15,
) -> FoldAssignment:
    """Covariate-clustered, label-balanced, patient-disjoint k folds.

    Covariates are z-scored and clustered (cluster count min(8, n//10 + 1));
    each cluster's patients are shuffled, interleaved by outcome label, and
    dealt into folds with one global round-robin cursor, keeping fold sizes
    within one patient of each other. Each fold's complement is split
    85/15 into inner train/val lists, stratified by label.
    """
    patients = list(patients)
    n = len(patients)
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    if n < k:
        raise ConfigError(f"cannot make {k} folds from {n} patients")
    for key in covariate_keys:
        for p in patients:
            if key not in p.covariates:
                raise MissingCovariateError(f"patient {p.patient_id!r} lacks covariate {key!r}")

    x = np.array([[p.covariates[key] for key in covariate_keys] for p in patients], dtype=float)
    mu, sd = x.mean(axis=0), x.std(axis=0)
    sd[sd == 0] = 1.0
    x = (x - mu) / sd

    rng = np.random.default_rng(seed)
    n_clusters = min(8, n // 10 + 1)
    assign = _kmeans(x, n_clusters, rng) if n_clusters > 1 else np.zeros(n, dtype=int)

    fold_of: Dict[str, int] = {}
    totals = [0] * k
    label_counts = {0: [0] * k, 1: [0] * k}
    for c in range(n_clusters):
        members = [patients[i] for i in np.flatnonzero(assign == c)]
        order = rng.permutation(len(members))
        members = [members[i] for i in order]
        pos = [p for p in members if p.label == 1]
        neg = [p for p in members if p.label != 1]
        interleaved = []
        for a, b in zip(pos, neg):
            interleaved.extend([a, b])
        longer = pos[len(neg):] if len(pos) > len(neg) else neg[len(pos):]
        interleaved.extend(longer)
        for p in interleaved:
            lab = 1 if p.label == 1 else 0
            # least-loaded fold first (sizes stay within one patient), then
            # the fold shortest on this outcome label
            fold = min(range(k), key=lambda f: (totals[f], label_counts[lab][f], f))
            fold_of[p.patient_id] = fold
            totals[fold] += 1
            label_counts[lab][fold] += 1

    inner_train: Dict[int, List[str]] = {}
    inner_val: Dict[int, List[str]] = {}
    by_id = {p.patient_id: p for p in patients}
    for f in range(k):
        pool = sorted(pid for pid, ff in fold_of.items() if ff != f)
        rng_f = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1000 + f,)))
        val: List[str] = []
        for lab in (1, 0):
            group = [pid for pid in pool if (by_id[pid].label == 1) == (lab == 1)]
            group = [group[i] for i in rng_f.permutation(len(group))]
            take = max(1, round(val_fraction * len(group))) if group else 0
            val.extend(group[:take])
        val_set = set(val)
        inner_val[f] = sorted(val_set)
        inner_train[f] = sorted(pid for pid in pool if pid not in val_set)
    return FoldAssignment(k=k, fold_of=fold_of, inner_train=inner_train, inner_val=inner_val, seed=seed)


def filter_patients(
    patients: Sequence[PatientRecord], key: str, value: str
) -> List[PatientRecord]:
    """Patients whose ``subgroups[key] == value``; absent values give []."""
    if not any(key in p.subgroups for p in patients):
        raise UnknownSubgroupError(f"subgroup key {key!r} absent from patients")
    return [p for p in patients if p.subgroups.get(key) == value]


# ---------------------------------------------------------------------------
# cohort CSV


def write_cohort_csv(path, patients: Sequence[PatientRecord]) -> Path:
    """One row per slide: core columns, covariates, then subgroup columns."""
    path = Path(path)
    subgroup_keys = sorted({k for p in patients for k in p.subgroups})
    covariate_keys = sorted({k for p in patients for k in p.covariates})
    header = list(COHORT_CORE_COLUMNS) + covariate_keys + subgroup_keys
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p in patients:
            for slide in p.slide_ids:
                row = [p.patient_id, slide, p.label, repr(p.time_months), p.event]
                row += [repr(p.covariates[k]) for k in covariate_keys]
                row += [p.subgroups.get(k, "") for k in subgroup_keys]
                writer.writerow(row)
    return path


def read_cohort_csv(path, horizon_months: float = 60.0) -> List[PatientRecord]:
    """Parse a cohort CSV back into patient records.

    Extra non-core columns become covariates when named in
    ``COVARIATE_COLUMNS`` (or fully numeric), otherwise subgroup strings.
    The five-year-label invariant (label = 1 iff event and time <= horizon)
    is enforced on every row.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty cohort file")
    missing = [c for c in COHORT_CORE_COLUMNS if c not in rows[0]]
    if missing:
        raise ConfigError(f"{path}: missing columns {missing}")
    extra = [c for c in rows[0] if c not in COHORT_CORE_COLUMNS]
    numeric_extra = set()
    for col in extra:
        try:
            for row in rows:
                float(row[col])
            numeric_extra.add(col)
        except (TypeError, ValueError):
            pass

    patients: Dict[str, PatientRecord] = {}
    for row in rows:
        pid = row["patient_id"]
        label, time_m, event = int(row["label"]), float(row["time_months"]), int(row["event"])
        expected = 1 if (event == 1 and time_m <= horizon_months) else 0
        if label != expected:
            raise ConfigError(
                f"{path}: slide {row['slide_id']!r} label {label} inconsistent with "
                f"time={time_m}, event={event} at horizon {horizon_months}"
            )
        if pid in patients:
            patients[pid].slide_ids.append(row["slide_id"])
            continue
        covs = {c: float(row[c]) for c in extra if c in COVARIATE_COLUMNS or c in numeric_extra}
        subs = {c: row[c] for c in extra if c not in covs}
        patients[pid] = PatientRecord(
            patient_id=pid,
            covariates=covs,
            label=label,
            time_months=time_m,
            event=event,
            subgroups=subs,
            slide_ids=[row["slide_id"]],
        )
    return list(patients.values())


# ---------------------------------------------------------------------------
# synthetic cohort with planted prognostic signal


@dataclass(frozen=True)
class SynthCohortConfig:
    signal_strength: float = 2.5
    patches_per_bag: int = 64
    censoring_rate: float = 0.2
    horizon_months: float = 60.0
    feature_dim: int = 32
    signal_fraction: float = 0.25
    baseline_hazard: float = 0.01  # per month; ~45% five-year mortality at z = 0
    two_slide_fraction: float = 0.05

    def __post_init__(self):
        if not 0 <= self.censoring_rate < 1:
            raise ConfigError("censoring_rate must lie in [0, 1)")
        if self.patches_per_bag < 1 or self.feature_dim < 1:
            raise ConfigError("patches_per_bag and feature_dim must be positive")
        if not 0 <= self.signal_fraction <= 1:
            raise ConfigError("signal_fraction must lie in [0, 1]")


@dataclass
class SynthBag:
    slide_id: str
    patient_id: str
    features: np.ndarray
    label: int
    time_months: float
    event: int


def synth_cohort(
    n_patients: int,
    config: SynthCohortConfig = SynthCohortConfig(),
    seed: int = 0,
) -> Tuple[List[SynthBag], List[PatientRecord]]:
    """Deterministic cohort with a planted per-patient risk latent z.

    A fixed fraction of each bag's patches is drawn from a distribution whose
    mean is shifted along one fixed direction by signal_strength * z, so bag
    content encodes z for both signs. Survival times are exponential with
    hazard baseline_hazard * exp(signal_strength * z); censoring times are
    independent exponentials calibrated to the requested rate. Labels follow
    the horizon rule (label 1 iff event and time <= horizon).
    """
    if n_patients < 10:
        raise ConfigError(f"need at least 10 patients, got {n_patients}")
    rng = np.random.default_rng(seed)
    d = config.feature_dim
    direction = np.zeros(d)
    direction[0] = 1.0  # canonical signal axis; rotations add nothing here

    beta = float(config.signal_strength)
    lam0 = config.baseline_hazard
    cens_rate = config.censoring_rate
    lam_c = lam0 * cens_rate / (1.0 - cens_rate) if cens_rate > 0 else 0.0

    bags: List[SynthBag] = []
    patients: List[PatientRecord] = []
    n_signal = int(round(config.signal_fraction * config.patches_per_bag))
    treatments = ("FL", "IFL")
    sexes = ("F", "M")
    locations = ("cecum", "ascending", "transverse", "sigmoid")
    for i in range(n_patients):
        pid = f"pt{i:04d}"
        z = float(rng.standard_normal())
        t_event = float(rng.exponential(1.0 / (lam0 * math.exp(beta * z))))
        if lam_c > 0:
            t_cens = float(rng.exponential(1.0 / lam_c))
        else:
            t_cens = float("inf")
        time_m = min(t_event, t_cens)
        event = int(t_event <= t_cens)
        label = 1 if (event == 1 and time_m <= config.horizon_months) else 0

        n_slides = 2 if rng.random() < config.two_slide_fraction else 1
        slide_ids = [f"{pid}-s{j}" for j in range(n_slides)]
        for slide in slide_ids:
            feats = rng.standard_normal((config.patches_per_bag, d))
            if n_signal:
                shift = config.signal_strength * z * direction
                feats[:n_signal] += shift
            perm = rng.permutation(config.patches_per_bag)
            bags.append(
                SynthBag(
                    slide_id=slide,
                    patient_id=pid,
                    features=feats[perm].astype(np.float32),
                    label=label,
                    time_months=time_m,
                    event=event,
                )
            )
        patients.append(
            PatientRecord(
                patient_id=pid,
                covariates={
                    "age": float(np.round(rng.normal(62, 9), 1)),
                    "bmi": float(np.round(rng.normal(27, 4), 1)),
                    "income": float(np.round(rng.normal(55000, 12000), 0)),
                    "latent_risk": z,  # generator ground truth, kept for oracle checks
                },
                label=label,
                time_months=time_m,
                event=event,
                subgroups={
                    "treatment": treatments[int(rng.integers(2))],
                    "sex": sexes[int(rng.integers(2))],
                    "tumor_location": locations[int(rng.integers(4))],
                },
                slide_ids=slide_ids,
            )
        )
    return bags, patients
