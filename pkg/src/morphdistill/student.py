"""Student encoder, Stage I training, embedding extraction, and probes.

The desk-scale default is a small MLP over vector datasets; a compact ViT
handles image-folder datasets. Training minimizes the blended Stage I
objective with AdamW, decoupled weight decay, and a cosine learning-rate
schedule that anneals to exactly zero on the last optimizer step. The best
checkpoint by validation total loss is kept.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import optimize
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.metrics import accuracy_score, f1_score

from .contrastive import (
    strategy_uses_distillation,
    strategy_uses_labels,
    total_stage1_loss,
    validate_strategy,
)
from .errors import (
    ConfigError,
    DegenerateLabelsError,
    DivergenceError,
    MissingSampleError,
    NoPositivePairsError,
    ShapeError,
)
from .relational import EmbeddingMatrix, l2_normalize
from .teachers import TeacherEnsemble, batch_teacher_views, read_embedding_file

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# configs


@dataclass(frozen=True)
class AugmentationConfig:
    flips: bool = True
    rotations: bool = True  # up to +/- 90 degrees
    color_jitter: bool = True
    vector_noise: float = 0.0  # additive-noise analog for vector datasets

    def active_for_images(self) -> bool:
        return self.flips or self.rotations or self.color_jitter


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture plus input pairing; mlp <-> vector, vit <-> image."""

    arch: str = "mlp"
    embed_dim: int = 768
    input_kind: str = "vector"
    input_dim: int = 16
    hidden_sizes: Tuple[int, ...] = (256,)
    image_size: int = 224
    channels: int = 3
    patch_size: int = 16
    depth: int = 6
    heads: int = 6
    width: int = 384

    def __post_init__(self):
        if self.arch not in ("mlp", "vit"):
            raise ConfigError(f"arch must be 'mlp' or 'vit', got {self.arch!r}")
        if self.embed_dim < 1:
            raise ConfigError("embed_dim must be positive")
        if self.arch == "mlp" and self.input_kind != "vector":
            raise ConfigError("mlp encoders pair with vector datasets")
        if self.arch == "vit":
            if self.input_kind != "image":
                raise ConfigError("vit encoders pair with image datasets")
            if self.image_size % self.patch_size:
                raise ConfigError("image_size must be divisible by patch_size")
            if self.width % self.heads:
                raise ConfigError("width must be divisible by heads")


@dataclass(frozen=True)
class Stage1Config:
    strategy: str = "supcon-distill"
    lam: float = 0.75
    tau: float = 0.1
    epochs: int = 50
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    val_fraction: float = 0.15
    augmentation: AugmentationConfig = AugmentationConfig()

    def __post_init__(self):
        validate_strategy(self.strategy)
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lambda must lie in [0, 1]")
        for name in ("tau", "epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        # learning_rate 0 is legal (frozen-weights contract in tests)
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ConfigError("learning_rate and weight_decay must be >= 0")


# ---------------------------------------------------------------------------
# datasets


@dataclass
class VectorDataset:
    """Vector samples with string ids and (optionally factorized) labels."""

    sample_ids: Tuple[str, ...]
    features: np.ndarray
    labels: Optional[np.ndarray] = None
    label_names: Tuple[str, ...] = ()

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise ShapeError("vector dataset features must be N x m")
        if len(self.sample_ids) != len(self.features):
            raise ShapeError("sample ids must align with feature rows")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
            if len(self.labels) != len(self.features):
                raise ShapeError("labels must align with feature rows")

    def __len__(self):
        return len(self.features)

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def fetch(self, indices, augment: bool, rng: Optional[np.random.Generator], aug: AugmentationConfig):
        x = self.features[indices]
        if augment and aug.vector_noise > 0 and rng is not None:
            x = x + aug.vector_noise * rng.standard_normal(x.shape).astype(np.float32)
        return torch.as_tensor(x, dtype=torch.float32)


@dataclass
class ImageFolderDataset:
    """Class-per-directory image dataset with ingestion-time channel stats."""

    sample_ids: Tuple[str, ...]
    paths: Tuple[str, ...]
    labels: Optional[np.ndarray]
    label_names: Tuple[str, ...]
    image_size: int
    channels: int
    channel_mean: np.ndarray
    channel_std: np.ndarray

    def __len__(self):
        return len(self.paths)

    def _load(self, path) -> np.ndarray:
        from PIL import Image

        with Image.open(path) as img:
            img = img.convert("RGB" if self.channels == 3 else "L")
            img = img.resize((self.image_size, self.image_size))
            arr = np.asarray(img, dtype=np.float32) / 255.0
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return arr

    def fetch(self, indices, augment: bool, rng: Optional[np.random.Generator], aug: AugmentationConfig):
        out = []
        for i in indices:
            arr = self._load(self.paths[i])
            if augment and rng is not None and aug.active_for_images():
                arr = _augment_image(arr, rng, aug)
            arr = (arr - self.channel_mean) / self.channel_std
            out.append(arr.transpose(2, 0, 1))
        return torch.as_tensor(np.stack(out), dtype=torch.float32)


def _augment_image(arr: np.ndarray, rng: np.random.Generator, aug: AugmentationConfig) -> np.ndarray:
    if aug.flips:
        if rng.random() < 0.5:
            arr = arr[:, ::-1]
        if rng.random() < 0.5:
            arr = arr[::-1, :]
    if aug.rotations:
        # quarter-turn rotations keep the grid exact; the paper-style bound is 90 degrees
        quarter = int(rng.integers(0, 4))
        if quarter:
            arr = np.rot90(arr, k=quarter, axes=(0, 1))
    if aug.color_jitter:
        brightness = 1.0 + 0.2 * (rng.random() * 2 - 1)
        contrast = 1.0 + 0.2 * (rng.random() * 2 - 1)
        mean = arr.mean(axis=(0, 1), keepdims=True)
        arr = np.clip((arr - mean) * contrast + mean * brightness, 0.0, 1.0)
    return np.ascontiguousarray(arr, dtype=np.float32)


def load_vector_dataset(directory) -> VectorDataset:
    """features.emb (+ .ids sidecar) and labels.csv (sample_id,label)."""
    directory = Path(directory)
    matrix = read_embedding_file(directory / "features.emb")
    labels = None
    names: Tuple[str, ...] = ()
    labels_path = directory / "labels.csv"
    if labels_path.exists():
        with open(labels_path, newline="", encoding="utf-8") as fh:
            by_id = {row["sample_id"]: row["label"] for row in csv.DictReader(fh)}
        missing = [sid for sid in matrix.sample_ids if sid not in by_id]
        if missing:
            raise ConfigError(f"labels.csv missing ids, e.g. {missing[:3]}")
        raw = [by_id[sid] for sid in matrix.sample_ids]
        names = tuple(sorted(set(raw)))
        index = {name: i for i, name in enumerate(names)}
        labels = np.array([index[r] for r in raw], dtype=int)
    return VectorDataset(matrix.sample_ids, np.asarray(matrix.values, dtype=np.float32), labels, names)


def load_image_folder(directory, image_size: int = 224, channels: int = 3) -> ImageFolderDataset:
    directory = Path(directory)
    classes = sorted(p.name for p in directory.iterdir() if p.is_dir())
    if not classes:
        raise ConfigError(f"{directory}: no class subdirectories found")
    paths, labels, ids = [], [], []
    for ci, cname in enumerate(classes):
        for p in sorted((directory / cname).iterdir()):
            if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"):
                paths.append(str(p))
                labels.append(ci)
                ids.append(f"{cname}/{p.name}")
    if not paths:
        raise ConfigError(f"{directory}: no images found")
    ds = ImageFolderDataset(
        sample_ids=tuple(ids),
        paths=tuple(paths),
        labels=np.array(labels, dtype=int),
        label_names=tuple(classes),
        image_size=image_size,
        channels=channels,
        channel_mean=np.zeros(channels, dtype=np.float32),
        channel_std=np.ones(channels, dtype=np.float32),
    )
    sample = np.stack([ds._load(p) for p in paths[: min(len(paths), 256)]])
    ds.channel_mean = sample.mean(axis=(0, 1, 2)).astype(np.float32)
    std = sample.std(axis=(0, 1, 2)).astype(np.float32)
    std[std == 0] = 1.0
    ds.channel_std = std
    return ds


# ---------------------------------------------------------------------------
# encoders


class MLPEncoder(torch.nn.Module):
    def __init__(self, input_dim: int, hidden_sizes: Sequence[int], embed_dim: int):
        super().__init__()
        layers: List[torch.nn.Module] = []
        prev = input_dim
        for h in hidden_sizes:
            layers += [torch.nn.Linear(prev, h), torch.nn.ReLU()]
            prev = h
        layers.append(torch.nn.Linear(prev, embed_dim))
        self.net = torch.nn.Sequential(*layers)

    def forward(self, x):
        if x.ndim != 2:
            raise ShapeError(f"mlp encoder expects N x m input, got {tuple(x.shape)}")
        return self.net(x)


class ViTEncoder(torch.nn.Module):
    """Compact ViT: conv patchifier, cls token, pre-norm transformer blocks."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        n_patches = (cfg.image_size // cfg.patch_size) ** 2
        self.patch_embed = torch.nn.Conv2d(cfg.channels, cfg.width, cfg.patch_size, stride=cfg.patch_size)
        self.cls_token = torch.nn.Parameter(torch.zeros(1, 1, cfg.width))
        self.pos_embed = torch.nn.Parameter(torch.zeros(1, n_patches + 1, cfg.width))
        torch.nn.init.normal_(self.cls_token, std=0.02)
        torch.nn.init.normal_(self.pos_embed, std=0.02)
        layer = torch.nn.TransformerEncoderLayer(
            d_model=cfg.width,
            nhead=cfg.heads,
            dim_feedforward=cfg.width * 4,
            batch_first=True,
            norm_first=True,
            dropout=0.0,
        )
        self.blocks = torch.nn.TransformerEncoder(layer, num_layers=cfg.depth, enable_nested_tensor=False)
        self.norm = torch.nn.LayerNorm(cfg.width)
        self.proj = torch.nn.Linear(cfg.width, cfg.embed_dim)

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"vit encoder expects N x C x H x W input, got {tuple(x.shape)}")
        tokens = self.patch_embed(x).flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) + self.pos_embed
        tokens = self.blocks(tokens)
        return self.proj(self.norm(tokens[:, 0]))


def build_encoder(config: EncoderConfig, seed: int = 0) -> torch.nn.Module:
    """Deterministically initialized encoder for the given config."""
    torch.manual_seed(seed)
    if config.arch == "mlp":
        return MLPEncoder(config.input_dim, config.hidden_sizes, config.embed_dim)
    return ViTEncoder(config)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    encoder: torch.nn.Module
    encoder_config: EncoderConfig
    stage1_config: Stage1Config
    label_names: Tuple[str, ...]
    epoch: int
    history: List[dict]
    head: Optional[torch.nn.Module] = None
    channel_mean: Optional[np.ndarray] = None
    channel_std: Optional[np.ndarray] = None


def save_checkpoint(directory, ckpt: Checkpoint) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    blob = {"encoder": ckpt.encoder.state_dict()}
    if ckpt.head is not None:
        blob["head"] = ckpt.head.state_dict()
    torch.save(blob, directory / "weights.pt")
    cfg = {
        "encoder_config": asdict(ckpt.encoder_config),
        "stage1_config": asdict(ckpt.stage1_config),
        "label_names": list(ckpt.label_names),
        "epoch": ckpt.epoch,
        "channel_mean": None if ckpt.channel_mean is None else [float(v) for v in ckpt.channel_mean],
        "channel_std": None if ckpt.channel_std is None else [float(v) for v in ckpt.channel_std],
        "has_head": ckpt.head is not None,
    }
    (directory / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    with open(directory / "history.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "total", "supcon", "distill", "lr", "val_total"])
        for row in ckpt.history:
            writer.writerow(
                [row["epoch"], repr(row["total"]), repr(row["supcon"]), repr(row["distill"]),
                 repr(row["lr"]), repr(row.get("val_total", float("nan")))]
            )
    return directory


def load_checkpoint(directory) -> Checkpoint:
    directory = Path(directory)
    cfg = json.loads((directory / "config.json").read_text())
    enc_cfg = EncoderConfig(
        **{**cfg["encoder_config"], "hidden_sizes": tuple(cfg["encoder_config"]["hidden_sizes"])}
    )
    st_cfg_raw = dict(cfg["stage1_config"])
    st_cfg_raw["augmentation"] = AugmentationConfig(**st_cfg_raw["augmentation"])
    st_cfg = Stage1Config(**st_cfg_raw)
    encoder = build_encoder(enc_cfg, seed=st_cfg.seed)
    blob = torch.load(directory / "weights.pt", weights_only=True)
    encoder.load_state_dict(blob["encoder"])
    encoder.eval()
    head = None
    if cfg.get("has_head") and "head" in blob:
        n_cls = blob["head"]["weight"].shape[0]
        head = torch.nn.Linear(enc_cfg.embed_dim, n_cls)
        head.load_state_dict(blob["head"])
        head.eval()
    history = []
    hist_path = directory / "history.csv"
    if hist_path.exists():
        with open(hist_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                history.append({k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()})
    return Checkpoint(
        encoder=encoder,
        encoder_config=enc_cfg,
        stage1_config=st_cfg,
        label_names=tuple(cfg.get("label_names", ())),
        epoch=int(cfg.get("epoch", 0)),
        history=history,
        head=head,
        channel_mean=None if cfg.get("channel_mean") is None else np.array(cfg["channel_mean"], dtype=np.float32),
        channel_std=None if cfg.get("channel_std") is None else np.array(cfg["channel_std"], dtype=np.float32),
    )


# ---------------------------------------------------------------------------
# Stage I training


def cosine_lr_factor(step: int, total_steps: int) -> float:
    """1.0 at step 0, exactly 0.0 at the final step."""
    if total_steps <= 1:
        return 1.0 if step == 0 else 0.0
    return 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps - 1) / (total_steps - 1)))


@dataclass
class Stage1Result:
    checkpoint: Checkpoint
    history: List[dict]
    initial_train_loss: float
    best_val_loss: float


def _stratified_split(labels: Optional[np.ndarray], n: int, fraction: float, rng: np.random.Generator):
    idx = np.arange(n)
    if labels is None:
        perm = rng.permutation(n)
        n_val = max(1, int(round(fraction * n)))
        return np.sort(perm[n_val:]), np.sort(perm[:n_val])
    val: List[int] = []
    for cls in np.unique(labels):
        members = idx[labels == cls]
        members = members[rng.permutation(len(members))]
        n_val = max(1, int(round(fraction * len(members))))
        val.extend(members[:n_val])
    val_set = set(val)
    train = np.array([i for i in idx if i not in val_set], dtype=int)
    return train, np.array(sorted(val_set), dtype=int)


def _batch_loss(
    encoder, head, dataset, ids, indices, ensemble, config: Stage1Config, rng, augment: bool
):
    x = dataset.fetch(indices, augment, rng, config.augmentation)
    z = encoder(x)
    kwargs: dict = {}
    if strategy_uses_labels(config.strategy):
        kwargs["labels"] = dataset.labels[indices]
    if config.strategy.startswith("unsup"):
        x2 = dataset.fetch(indices, augment, rng, config.augmentation)
        kwargs["paired_view"] = encoder(x2)
    if config.strategy.startswith("sup") and not config.strategy.startswith("supcon"):
        kwargs["class_logits"] = head(z)
    teacher_views = None
    if strategy_uses_distillation(config.strategy):
        batch_ids = [ids[i] for i in indices]
        teacher_views = [np.asarray(v.values, dtype=np.float32) for v in batch_teacher_views(ensemble, batch_ids)]
    return total_stage1_loss(
        z, teacher_views, lam=config.lam, tau=config.tau, strategy=config.strategy, **kwargs
    )


def train_stage1(
    dataset,
    ensemble: Optional[TeacherEnsemble],
    config: Stage1Config,
    encoder_config: Optional[EncoderConfig] = None,
) -> Stage1Result:
    """Train the student under the configured strategy; keep the best epoch.

    The train/val split (85/15 by default, label-stratified when labels
    exist) is derived from the seed. Batches are visited in a seed-determined
    order; the final partial batch is dropped when smaller than 2 samples.
    """
    needs_labels = strategy_uses_labels(config.strategy)
    if needs_labels and getattr(dataset, "labels", None) is None:
        raise ConfigError(f"strategy {config.strategy!r} needs a labeled dataset")
    needs_teachers = strategy_uses_distillation(config.strategy)
    if needs_teachers:
        if ensemble is None:
            raise ConfigError(f"strategy {config.strategy!r} requires a teacher ensemble")
        missing = [sid for sid in dataset.sample_ids if sid not in ensemble.sample_ids]
        if missing:
            raise MissingSampleError(f"teacher ensemble does not cover e.g. {missing[:3]}")

    if encoder_config is None:
        if not isinstance(dataset, VectorDataset):
            raise ConfigError("encoder_config is required for image datasets")
        encoder_config = EncoderConfig(arch="mlp", input_dim=dataset.input_dim, embed_dim=768)
    if encoder_config.input_kind == "vector" and not isinstance(dataset, VectorDataset):
        raise ConfigError("vector-input encoders only pair with vector datasets")
    if encoder_config.input_kind == "image" and isinstance(dataset, VectorDataset):
        raise ConfigError("image-input encoders cannot consume vector datasets")

    torch.manual_seed(config.seed)
    encoder = build_encoder(encoder_config, seed=config.seed)
    head = None
    if config.strategy in ("sup", "sup-distill"):
        n_classes = len(dataset.label_names) or int(dataset.labels.max()) + 1
        head = torch.nn.Linear(encoder_config.embed_dim, n_classes)
    params = list(encoder.parameters()) + (list(head.parameters()) if head is not None else [])
    opt = torch.optim.AdamW(params, lr=config.learning_rate, weight_decay=config.weight_decay)

    rng = np.random.default_rng(config.seed)
    n = len(dataset)
    train_idx, val_idx = _stratified_split(getattr(dataset, "labels", None), n, config.val_fraction, rng)
    if len(train_idx) < 2:
        raise ConfigError("training split has fewer than 2 samples")
    ids = list(dataset.sample_ids)

    def batches(index_pool, shuffle_rng=None):
        pool = index_pool if shuffle_rng is None else index_pool[shuffle_rng.permutation(len(index_pool))]
        for start in range(0, len(pool), config.batch_size):
            chunk = pool[start : start + config.batch_size]
            if len(chunk) >= 2:
                yield chunk

    def evaluate(index_pool) -> dict:
        encoder.eval()
        if head is not None:
            head.eval()
        sums = {"total": 0.0, "supcon": 0.0, "distill": 0.0}
        count = 0
        with torch.no_grad():
            for chunk in batches(index_pool):
                try:
                    breakdown = _batch_loss(encoder, head, dataset, ids, chunk, ensemble, config, None, False)
                except NoPositivePairsError:
                    continue  # pure-supcon batch without a positive pair carries no signal
                sums["total"] += float(breakdown.total) * len(chunk)
                sums["supcon"] += float(breakdown.supcon_component) * len(chunk)
                sums["distill"] += float(breakdown.distill_component) * len(chunk)
                count += len(chunk)
        return {k: v / max(count, 1) for k, v in sums.items()}

    steps_per_epoch = max(1, sum(1 for _ in batches(train_idx)))
    total_steps = steps_per_epoch * config.epochs
    if any(len(chunk) < 3 for chunk in batches(train_idx)):
        log.warning("some batches have N < 3: relational distillation carries no signal at N = 2")

    initial = evaluate(train_idx)
    best_val = math.inf
    best_state = (copy.deepcopy(encoder.state_dict()), copy.deepcopy(head.state_dict()) if head else None)
    best_epoch = 0
    history: List[dict] = []
    step = 0
    for epoch in range(1, config.epochs + 1):
        encoder.train()
        if head is not None:
            head.train()
        sums = {"total": 0.0, "supcon": 0.0, "distill": 0.0}
        count = 0
        lr_epoch = config.learning_rate * cosine_lr_factor(step, total_steps)
        for chunk in batches(train_idx, shuffle_rng=rng):
            factor = cosine_lr_factor(step, total_steps)
            for group in opt.param_groups:
                group["lr"] = config.learning_rate * factor
            opt.zero_grad()
            try:
                breakdown = _batch_loss(encoder, head, dataset, ids, chunk, ensemble, config, rng, True)
            except NoPositivePairsError:
                step += 1
                continue
            loss = breakdown.total
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite training loss at epoch {epoch}")
            loss.backward()
            opt.step()
            step += 1
            sums["total"] += float(breakdown.total.detach()) * len(chunk)
            sums["supcon"] += float(torch.as_tensor(breakdown.supcon_component).detach()) * len(chunk)
            sums["distill"] += float(torch.as_tensor(breakdown.distill_component).detach()) * len(chunk)
            count += len(chunk)
        # a validation pool below 2 samples cannot form a relational batch
        val = evaluate(val_idx) if len(val_idx) >= 2 else {"total": sums["total"] / max(count, 1)}
        row = {
            "epoch": epoch,
            "total": sums["total"] / max(count, 1),
            "supcon": sums["supcon"] / max(count, 1),
            "distill": sums["distill"] / max(count, 1),
            "lr": lr_epoch,
            "val_total": val["total"],
        }
        history.append(row)
        if val["total"] < best_val:
            best_val = val["total"]
            best_state = (
                copy.deepcopy(encoder.state_dict()),
                copy.deepcopy(head.state_dict()) if head else None,
            )
            best_epoch = epoch

    encoder.load_state_dict(best_state[0])
    if head is not None and best_state[1] is not None:
        head.load_state_dict(best_state[1])
    encoder.eval()
    if head is not None:
        head.eval()
    ckpt = Checkpoint(
        encoder=encoder,
        encoder_config=encoder_config,
        stage1_config=config,
        label_names=tuple(getattr(dataset, "label_names", ())),
        epoch=best_epoch,
        history=history,
        head=head,
        channel_mean=getattr(dataset, "channel_mean", None),
        channel_std=getattr(dataset, "channel_std", None),
    )
    return Stage1Result(ckpt, history, initial["total"], best_val)


# ---------------------------------------------------------------------------
# embedding extraction


def embed(checkpoint: Checkpoint, samples, sample_ids=None, batch_size: int = 256) -> EmbeddingMatrix:
    """Deterministic embeddings in input order; empty input gives 0 x d."""
    cfg = checkpoint.encoder_config
    encoder = checkpoint.encoder
    encoder.eval()
    if isinstance(samples, VectorDataset):
        sample_ids = samples.sample_ids
        samples = samples.features
    if isinstance(samples, ImageFolderDataset):
        ds = samples
        sample_ids = ds.sample_ids
        arrays = []
        with torch.no_grad():
            for start in range(0, len(ds), batch_size):
                x = ds.fetch(range(start, min(start + batch_size, len(ds))), False, None, AugmentationConfig())
                arrays.append(encoder(x).numpy())
        values = np.concatenate(arrays) if arrays else np.zeros((0, cfg.embed_dim), dtype=np.float32)
        return EmbeddingMatrix(values.astype(np.float32), tuple(sample_ids))

    x = np.asarray(samples, dtype=np.float32)
    if x.ndim == 1:
        x = x.reshape(0, cfg.input_dim) if x.size == 0 else x.reshape(1, -1)
    if x.shape[0] == 0:
        return EmbeddingMatrix(np.zeros((0, cfg.embed_dim), dtype=np.float32),
                               tuple(sample_ids) if sample_ids else None)
    if cfg.input_kind == "vector" and x.shape[1] != cfg.input_dim:
        raise ShapeError(f"expected {cfg.input_dim}-d vectors, got {x.shape[1]}-d")
    outs = []
    with torch.no_grad():
        for start in range(0, len(x), batch_size):
            outs.append(encoder(torch.as_tensor(x[start : start + batch_size])).numpy())
    values = np.concatenate(outs).astype(np.float32)
    return EmbeddingMatrix(values, tuple(sample_ids) if sample_ids else None)


# ---------------------------------------------------------------------------
# probes (Table-8 style)


def _classification_metrics(y_true, y_pred) -> Dict[str, float]:
    return {
        "accuracy": float(accuracy_score(y_true, y_pred)),
        "macro_f1": float(f1_score(y_true, y_pred, average="macro", zero_division=0)),
        "weighted_f1": float(f1_score(y_true, y_pred, average="weighted", zero_division=0)),
    }


def eval_linear_probe(
    train_emb,
    train_labels,
    val_emb,
    val_labels,
    l2_penalty: float = 1e-4,
    grad_tol: float = 1e-6,
    max_iter: int = 1000,
) -> Dict[str, float]:
    """Multinomial logistic probe on frozen embeddings (L-BFGS).

    Objective: mean cross-entropy + l2_penalty/2 * ||W||^2 (bias excluded),
    iterated until the projected gradient's max-norm falls below grad_tol or
    max_iter steps.
    """
    xtr = np.asarray(train_emb.values if isinstance(train_emb, EmbeddingMatrix) else train_emb, dtype=np.float64)
    xva = np.asarray(val_emb.values if isinstance(val_emb, EmbeddingMatrix) else val_emb, dtype=np.float64)
    if xtr.shape[1] != xva.shape[1]:
        raise ShapeError("train/val embedding dims differ")
    ytr = np.asarray(train_labels)
    yva = np.asarray(val_labels)
    classes = np.unique(ytr)
    if len(classes) < 2:
        raise DegenerateLabelsError("linear probe needs >= 2 training classes")
    index = {c: i for i, c in enumerate(classes.tolist())}
    ytr_i = np.array([index[c] for c in ytr.tolist()])
    n, d = xtr.shape
    c = len(classes)

    def unpack(theta):
        w = theta[: c * d].reshape(c, d)
        b = theta[c * d :]
        return w, b

    def objective(theta):
        w, b = unpack(theta)
        logits = xtr @ w.T + b
        logits -= logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(logits).sum(axis=1))
        ce = float(np.mean(logz - logits[np.arange(n), ytr_i]))
        obj = ce + 0.5 * l2_penalty * float(np.sum(w * w))
        probs = np.exp(logits - logz[:, None])
        probs[np.arange(n), ytr_i] -= 1.0
        gw = probs.T @ xtr / n + l2_penalty * w
        gb = probs.sum(axis=0) / n
        return obj, np.concatenate([gw.ravel(), gb])

    theta0 = np.zeros(c * d + c)
    res = optimize.minimize(
        objective, theta0, jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": grad_tol, "ftol": 0.0},
    )
    w, b = unpack(res.x)
    pred_idx = np.argmax(xva @ w.T + b, axis=1)
    pred = classes[pred_idx]
    return _classification_metrics(yva, pred)


def knn_predict(train_emb, train_labels, val_emb, k: int) -> np.ndarray:
    """Cosine-distance k-NN majority vote.

    Vote ties break by the smaller summed distance of the tied class's
    neighbors, then by the smaller class id.
    """
    xtr = np.asarray(train_emb.values if isinstance(train_emb, EmbeddingMatrix) else train_emb, dtype=np.float64)
    xva = np.asarray(val_emb.values if isinstance(val_emb, EmbeddingMatrix) else val_emb, dtype=np.float64)
    ytr = np.asarray(train_labels)
    if not 1 <= k <= len(xtr):
        raise ConfigError(f"k must lie in [1, {len(xtr)}], got {k}")
    ztr = l2_normalize(xtr)
    zva = l2_normalize(xva)
    sims = zva @ ztr.T
    preds = []
    classes = np.unique(ytr)
    for row in sims:
        order = np.lexsort((np.arange(len(row)), -row))[:k]
        dist = 1.0 - row[order]
        votes = ytr[order]
        best_cls, best_key = None, None
        for cls in classes:
            mask = votes == cls
            cnt = int(mask.sum())
            if cnt == 0:
                continue
            key = (-cnt, float(dist[mask].sum()), cls)
            if best_key is None or key < best_key:
                best_key, best_cls = key, cls
        preds.append(best_cls)
    return np.asarray(preds)


def eval_knn(train_emb, train_labels, val_emb, val_labels, k: int = 30) -> Dict[str, float]:
    pred = knn_predict(train_emb, train_labels, val_emb, k)
    out = _classification_metrics(np.asarray(val_labels), pred)
    out["k"] = k
    return out


def eval_knn_sweep(train_emb, train_labels, val_emb, val_labels, ks=(1, 5, 10, 20, 30, 50)) -> Dict:
    """Best-k KNN metrics, Table-8 style ('best-performing value of K')."""
    n = len(np.asarray(train_labels))
    results = [eval_knn(train_emb, train_labels, val_emb, val_labels, k) for k in ks if k <= n]
    if not results:
        raise ConfigError("no feasible k in the sweep")
    best = max(results, key=lambda r: r["accuracy"])
    return {"best": best, "all": results}


# ---------------------------------------------------------------------------
# sklearn-style wrapper


class DistillationEncoder(BaseEstimator, TransformerMixin):
    """Estimator facade over Stage I for vector datasets.

    fit(X, y, sample_ids=...) trains the MLP student under the configured
    strategy (teachers passed in the constructor); transform(X) returns the
    learned embeddings.
    """

    def __init__(
        self,
        strategy: str = "supcon-distill",
        lam: float = 0.75,
        tau: float = 0.1,
        epochs: int = 10,
        batch_size: int = 64,
        learning_rate: float = 1e-3,
        weight_decay: float = 1e-4,
        embed_dim: int = 64,
        hidden_sizes: Tuple[int, ...] = (128,),
        seed: int = 0,
        teachers: Optional[TeacherEnsemble] = None,
        val_fraction: float = 0.15,
    ):
        self.strategy = strategy
        self.lam = lam
        self.tau = tau
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.embed_dim = embed_dim
        self.hidden_sizes = hidden_sizes
        self.seed = seed
        self.teachers = teachers
        self.val_fraction = val_fraction

    def fit(self, X, y=None, sample_ids=None):
        X = np.asarray(X, dtype=np.float32)
        ids = tuple(sample_ids) if sample_ids is not None else tuple(f"s{i:06d}" for i in range(len(X)))
        labels, names = None, ()
        if y is not None:
            raw = np.asarray(y)
            names = tuple(str(v) for v in np.unique(raw))
            index = {v: i for i, v in enumerate(np.unique(raw).tolist())}
            labels = np.array([index[v] for v in raw.tolist()], dtype=int)
        dataset = VectorDataset(ids, X, labels, names)
        config = Stage1Config(
            strategy=self.strategy,
            lam=self.lam,
            tau=self.tau,
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            seed=self.seed,
            val_fraction=self.val_fraction,
        )
        enc_cfg = EncoderConfig(
            arch="mlp", input_dim=X.shape[1], embed_dim=self.embed_dim, hidden_sizes=tuple(self.hidden_sizes)
        )
        result = train_stage1(dataset, self.teachers, config, enc_cfg)
        self.result_ = result
        self.checkpoint_ = result.checkpoint
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X) -> np.ndarray:
        if not hasattr(self, "checkpoint_"):
            raise ConfigError("encoder is not fitted")
        return np.asarray(embed(self.checkpoint_, np.asarray(X, dtype=np.float32)).values)
