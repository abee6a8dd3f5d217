"""Frozen teacher embedding stores: file format, ensembles, synthesis.

Teachers enter the pipeline as precomputed embedding files (frozen encoders
make their outputs constants), one MDEMB1 file per teacher plus an id
sidecar, tied together by a manifest.json. Synthetic teachers built from a
shared latent via orthonormal-column maps give ground-truth relational
structure for tests.

MDEMB1 layout (little-endian):
    magic "MDEMB1\\0\\0" | version u32 = 1 | N u32 | d u32
    | dtype u8 (0 = fp32, 1 = fp64) | 3 reserved bytes
    | payload N*d values row-major | CRC32(payload) u32
Sidecar ``<name>.ids``: newline-delimited UTF-8 sample ids, exactly N lines.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import (
    ConfigError,
    FormatError,
    IntegrityError,
    MissingSampleError,
    NonFiniteError,
)
from .relational import EmbeddingMatrix

MAGIC = b"MDEMB1\x00\x00"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
CACHE_ENV = "MORPHDISTILL_CACHE"


def write_embedding_file(path, matrix: EmbeddingMatrix, dtype: str = "float32") -> Path:
    """Write an EmbeddingMatrix as MDEMB1 plus its ``.ids`` sidecar."""
    path = Path(path)
    values = np.asarray(matrix.values, dtype=dtype)
    if matrix.sample_ids is None:
        raise ConfigError("embedding files require sample ids")
    code = _DTYPE_CODES[values.dtype]
    payload = np.ascontiguousarray(values.astype(values.dtype.newbyteorder("<"))).tobytes()
    header = MAGIC + struct.pack("<III", VERSION, values.shape[0], values.shape[1])
    header += struct.pack("<B3x", code)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    ids_path = path.with_suffix(".ids")
    ids_path.write_text("\n".join(matrix.sample_ids) + "\n", encoding="utf-8")
    return path


def read_embedding_file(path) -> EmbeddingMatrix:
    """Read an MDEMB1 file and its id sidecar back into an EmbeddingMatrix."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 24 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic, not an MDEMB1 file")
    version, n, d = struct.unpack_from("<III", raw, 8)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    (code,) = struct.unpack_from("<B", raw, 20)
    if code not in _DTYPES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dt = _DTYPES[code]
    expected = 24 + n * d * dt.itemsize + 4
    if len(raw) != expected:
        raise IntegrityError(f"{path}: expected {expected} bytes, found {len(raw)} (truncated?)")
    payload = raw[24:-4]
    (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc:
        raise IntegrityError(f"{path}: payload checksum mismatch")
    values = np.frombuffer(payload, dtype=dt).reshape(n, d).astype(dt.newbyteorder("="))
    if not np.isfinite(values).all():
        raise NonFiniteError(f"{path}: embedding payload contains non-finite values")
    ids_path = path.with_suffix(".ids")
    if not ids_path.exists():
        raise FormatError(f"{path}: missing id sidecar {ids_path.name}")
    ids = ids_path.read_text(encoding="utf-8").splitlines()
    if len(ids) != n:
        raise IntegrityError(f"{ids_path}: {len(ids)} ids for {n} rows")
    return EmbeddingMatrix(values, tuple(ids))


@dataclass(frozen=True)
class TeacherSpec:
    """Identity and provenance of one frozen teacher store."""

    teacher_id: str
    dim: int
    source: dict = field(default_factory=dict)


@dataclass
class TeacherEnsemble:
    """K aligned teacher stores covering one common sample-id set."""

    teachers: List[Tuple[TeacherSpec, EmbeddingMatrix]]

    def __post_init__(self):
        if not self.teachers:
            raise ConfigError("an ensemble needs at least one teacher")
        ids = set(self.teachers[0][1].sample_ids)
        seen = set()
        for spec, mat in self.teachers:
            if spec.teacher_id in seen:
                raise ConfigError(f"duplicate teacher id {spec.teacher_id!r}")
            seen.add(spec.teacher_id)
            if mat.dim != spec.dim:
                raise ConfigError(f"teacher {spec.teacher_id!r}: dim {mat.dim} != spec dim {spec.dim}")
            if set(mat.sample_ids) != ids:
                raise ConfigError(f"teacher {spec.teacher_id!r} covers a different sample-id set")
        self._index = [
            {sid: row for row, sid in enumerate(mat.sample_ids)} for _, mat in self.teachers
        ]

    @property
    def k(self) -> int:
        return len(self.teachers)

    @property
    def sample_ids(self) -> frozenset:
        return frozenset(self.teachers[0][1].sample_ids)

    @property
    def specs(self) -> List[TeacherSpec]:
        return [spec for spec, _ in self.teachers]


def load_teacher_embeddings(path, teacher_id: Optional[str] = None) -> Tuple[TeacherSpec, EmbeddingMatrix]:
    """Load a single teacher store from an MDEMB1 file."""
    path = Path(path)
    matrix = read_embedding_file(path)
    spec = TeacherSpec(
        teacher_id=teacher_id or path.stem,
        dim=matrix.dim,
        source={"kind": "precomputed", "path": str(path)},
    )
    return spec, matrix


def _cache_dir() -> Optional[Path]:
    loc = os.environ.get(CACHE_ENV)
    return Path(loc) if loc else None


def load_ensemble(manifest_path, use_cache: bool = True) -> TeacherEnsemble:
    """Load all teachers listed in a manifest.json.

    When MORPHDISTILL_CACHE points at a directory, a consolidated ``.npz``
    keyed by the manifest's content hash is written on first load and reused
    afterwards.
    """
    manifest_path = Path(manifest_path)
    entries = json.loads(manifest_path.read_text(encoding="utf-8"))
    if not isinstance(entries, list) or not entries:
        raise FormatError(f"{manifest_path}: manifest must be a non-empty list")

    cache = _cache_dir() if use_cache else None
    key = hashlib.sha256(manifest_path.read_bytes()).hexdigest()[:16]
    cache_file = cache / f"ensemble-{key}.npz" if cache else None
    if cache_file is not None and cache_file.exists():
        return _ensemble_from_cache(cache_file, entries)

    teachers = []
    for entry in entries:
        emb_path = manifest_path.parent / entry["file"]
        spec, matrix = load_teacher_embeddings(emb_path, teacher_id=entry["teacher_id"])
        if matrix.dim != int(entry["dim"]):
            raise IntegrityError(
                f"teacher {entry['teacher_id']!r}: file dim {matrix.dim} != manifest dim {entry['dim']}"
            )
        teachers.append((spec, matrix))
    ensemble = TeacherEnsemble(teachers)
    if cache_file is not None:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for spec, mat in ensemble.teachers:
            arrays[f"values_{spec.teacher_id}"] = np.asarray(mat.values)
            arrays[f"ids_{spec.teacher_id}"] = np.asarray(mat.sample_ids)  # fixed-width unicode
        tmp = cache_file.with_suffix(".tmp.npz")
        np.savez(tmp, **arrays)
        os.replace(tmp, cache_file)
    return ensemble


def _ensemble_from_cache(cache_file: Path, entries) -> TeacherEnsemble:
    data = np.load(cache_file)
    teachers = []
    for entry in entries:
        tid = entry["teacher_id"]
        values = data[f"values_{tid}"]
        ids = tuple(str(s) for s in data[f"ids_{tid}"])
        spec = TeacherSpec(tid, int(values.shape[1]), {"kind": "cached", "path": str(cache_file)})
        teachers.append((spec, EmbeddingMatrix(values, ids)))
    return TeacherEnsemble(teachers)


def synth_teacher_ensemble(
    latents: EmbeddingMatrix,
    dims: Sequence[int],
    noise_scale: float = 0.0,
    seed: int = 0,
) -> TeacherEnsemble:
    """Build K synthetic teachers from one shared latent matrix.

    Teacher k applies a seed-deterministic map with orthonormal columns
    (d_k x m), which preserves inner products and norms, hence every pairwise
    cosine; optional isotropic noise perturbs the copies. With zero noise all
    teachers therefore share one relational structure regardless of width.
    """
    if noise_scale < 0:
        raise ConfigError(f"noise_scale must be >= 0, got {noise_scale}")
    lat = np.asarray(latents.values, dtype=np.float64)
    n, m = lat.shape
    teachers = []
    for k, dim in enumerate(dims):
        dim = int(dim)
        if dim < m and noise_scale == 0:
            raise ConfigError(
                f"teacher {k}: dim {dim} < latent dim {m} cannot preserve cosines at zero noise"
            )
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(k,)))
        if dim >= m:
            gauss = rng.standard_normal((dim, m))
            q, r = np.linalg.qr(gauss)
            q = q * np.sign(np.diagonal(r))  # sign-fix for a deterministic Q
            values = lat @ q.T
        else:
            values = lat @ (rng.standard_normal((dim, m)) / np.sqrt(m)).T
        if noise_scale > 0:
            values = values + noise_scale * rng.standard_normal(values.shape)
        spec = TeacherSpec(
            teacher_id=f"synthetic_{k}_d{dim}",
            dim=dim,
            source={"kind": "synthetic", "seed": seed, "noise_scale": noise_scale},
        )
        teachers.append((spec, EmbeddingMatrix(values, latents.sample_ids)))
    return TeacherEnsemble(teachers)


def batch_teacher_views(ensemble: TeacherEnsemble, sample_ids: Sequence[str]) -> List[EmbeddingMatrix]:
    """Gather every teacher's rows in the requested order (repeats allowed)."""
    views = []
    for (spec, mat), index in zip(ensemble.teachers, ensemble._index):
        rows = []
        for sid in sample_ids:
            if sid not in index:
                raise MissingSampleError(f"teacher {spec.teacher_id!r} has no sample {sid!r}")
            rows.append(index[sid])
        values = np.asarray(mat.values)[rows]
        ids = tuple(sample_ids) if len(set(sample_ids)) == len(sample_ids) else None
        views.append(EmbeddingMatrix(values, ids))
    return views


def write_ensemble(
    out_dir,
    ensemble: TeacherEnsemble,
    dtype: str = "float32",
) -> Path:
    """Write each teacher as MDEMB1 plus a manifest.json; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec, mat in ensemble.teachers:
        fname = f"{spec.teacher_id}.emb"
        write_embedding_file(out_dir / fname, mat, dtype=dtype)
        entries.append(
            {
                "teacher_id": spec.teacher_id,
                "dim": spec.dim,
                "file": fname,
                "ids_file": f"{spec.teacher_id}.ids",
            }
        )
    manifest = out_dir / "manifest.json"
    manifest.write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")
    return manifest
