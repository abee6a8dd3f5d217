"""Command-line orchestration.

Subcommands: synth, distill, embed, mil-train, evaluate, bench, probe,
rerun. Every command writes a run_manifest.json into its output directory;
``rerun`` re-executes a manifest (optionally into a new directory) and, in
single-threaded deterministic mode, reproduces all numeric outputs bitwise.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch

from . import __version__
from .cohort import (
    FoldAssignment,
    SynthCohortConfig,
    read_cohort_csv,
    stratified_kfold,
    synth_cohort,
    write_cohort_csv,
)
from .contrastive import STRATEGIES
from .errors import ConfigError, MorphDistillError
from .mil import Bag, Stage2Config, train_stage2
from .relational import EmbeddingMatrix
from .runio import PhaseTimer, RunManifest, atomic_write_json, atomic_write_text, checksum_path
from .student import (
    AugmentationConfig,
    EncoderConfig,
    Stage1Config,
    embed,
    eval_knn_sweep,
    eval_linear_probe,
    load_checkpoint,
    load_image_folder,
    load_vector_dataset,
    save_checkpoint,
    train_stage1,
)
from .survival import (
    SurvivalRecord,
    concordance_index,
    confusion_metrics,
    cox_fit,
    evaluate_stratified,
    km_estimate,
    logrank_test,
    roc_auc,
    stratify_risk,
)
from .teachers import (
    load_ensemble,
    read_embedding_file,
    synth_teacher_ensemble,
    write_embedding_file,
    write_ensemble,
)


def _apply_determinism(seed: int, deterministic: bool):
    if deterministic:
        torch.set_num_threads(1)
    torch.manual_seed(seed)


def _float_list(text: str) -> List[float]:
    return [float(v) for v in text.split(",") if v != ""]


def _int_list(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v != ""]


def _fmt(x: float) -> str:
    return repr(float(x))


# ---------------------------------------------------------------------------
# synth


def cmd_synth(p: Dict) -> None:
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    timer = PhaseTimer()
    kind = p["kind"]
    with timer.time("generate"):
        if kind == "teachers":
            dims = _int_list(p["dims"])
            if not dims or any(d < 1 for d in dims):
                raise ConfigError(f"--dims must list positive integers, got {p['dims']!r}")
            if p.get("latents"):
                latents = read_embedding_file(p["latents"])
            else:
                rng = np.random.default_rng(p["seed"])
                values = rng.standard_normal((p["n"], p["latent_dim"]))
                ids = tuple(f"s{i:06d}" for i in range(p["n"]))
                latents = EmbeddingMatrix(values, ids)
            ensemble = synth_teacher_ensemble(latents, dims, noise_scale=p["noise"], seed=p["seed"])
            manifest = write_ensemble(out, ensemble)
            print(f"wrote {len(dims)} teachers to {manifest}")
        elif kind == "cohort":
            cfg = SynthCohortConfig(
                signal_strength=p["signal"],
                patches_per_bag=p["patches"],
                censoring_rate=p["censoring"],
                horizon_months=p["horizon"],
                feature_dim=p["feature_dim"],
            )
            bags, patients = synth_cohort(p["patients"], cfg, seed=p["seed"])
            write_cohort_csv(out / "cohort.csv", patients)
            for bag in bags:
                ids = tuple(f"patch{i:05d}" for i in range(bag.features.shape[0]))
                write_embedding_file(out / "bags" / f"{bag.slide_id}.emb", EmbeddingMatrix(bag.features, ids))
            print(f"wrote cohort.csv ({len(patients)} patients) and {len(bags)} bags to {out}")
        elif kind == "dataset":
            rng = np.random.default_rng(p["seed"])
            n, c, d = p["n"], p["classes"], p["dim"]
            centers = rng.standard_normal((c, d)) * p["separation"]
            labels = rng.integers(0, c, size=n)
            values = centers[labels] + p["noise"] * rng.standard_normal((n, d))
            ids = tuple(f"s{i:06d}" for i in range(n))
            write_embedding_file(out / "features.emb", EmbeddingMatrix(values.astype(np.float32), ids))
            rows = "\n".join(f"{sid},c{lab}" for sid, lab in zip(ids, labels))
            atomic_write_text(out / "labels.csv", "sample_id,label\n" + rows + "\n")
            print(f"wrote labeled dataset (n={n}, classes={c}, dim={d}) to {out}")
        else:
            raise ConfigError(f"unknown synth kind {kind!r}")
    _write_manifest("synth", p, out, timer)


# ---------------------------------------------------------------------------
# distill


def _load_stage1_dataset(path: str, image_size: int):
    path = Path(path)
    if (path / "features.emb").exists():
        return load_vector_dataset(path), "vector"
    return load_image_folder(path, image_size=image_size), "image"


def _encoder_config_for(p: Dict, dataset, kind: str) -> EncoderConfig:
    if kind == "vector":
        return EncoderConfig(
            arch="mlp",
            input_kind="vector",
            input_dim=dataset.input_dim,
            embed_dim=p["embed_dim"],
            hidden_sizes=tuple(_int_list(p["hidden"])),
        )
    return EncoderConfig(
        arch="vit",
        input_kind="image",
        embed_dim=p["embed_dim"],
        image_size=p["image_size"],
        channels=3,
        patch_size=p["patch_size"],
        depth=p["depth"],
        heads=p["heads"],
        width=p["width"],
    )


def _run_distill_once(p: Dict, dataset, kind: str, ensemble, strategy: str, out: Path):
    config = Stage1Config(
        strategy=strategy,
        lam=p["lam"],
        tau=p["tau"],
        epochs=p["epochs"],
        batch_size=p["batch_size"],
        learning_rate=p["lr"],
        weight_decay=p["weight_decay"],
        seed=p["seed"],
        augmentation=AugmentationConfig(vector_noise=p["vector_noise"]),
    )
    enc_cfg = _encoder_config_for(p, dataset, kind)
    result = train_stage1(dataset, ensemble, config, enc_cfg)
    save_checkpoint(out, result.checkpoint)
    final = result.history[-1] if result.history else {}
    print(
        f"[{strategy}] epochs={len(result.history)} "
        f"train={final.get('total', float('nan')):.5f} best_val={result.best_val_loss:.5f} -> {out}"
    )
    return result


def cmd_distill(p: Dict) -> None:
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    timer = PhaseTimer()
    _apply_determinism(p["seed"], p["deterministic"])
    with timer.time("load"):
        dataset, kind = _load_stage1_dataset(p["dataset"], p["image_size"])
        ensemble = load_ensemble(p["teachers"]) if p.get("teachers") else None
    with timer.time("train"):
        if p["ablation_grid"]:
            summary = ["strategy,epochs,train_total,train_supcon,train_distill,best_val_total"]
            for strategy in STRATEGIES:
                result = _run_distill_once(p, dataset, kind, ensemble, strategy, out / strategy)
                last = result.history[-1]
                summary.append(
                    f"{strategy},{last['epoch']},{_fmt(last['total'])},{_fmt(last['supcon'])},"
                    f"{_fmt(last['distill'])},{_fmt(result.best_val_loss)}"
                )
            atomic_write_text(out / "ablation_summary.csv", "\n".join(summary) + "\n")
        else:
            _run_distill_once(p, dataset, kind, ensemble, p["strategy"], out)
    _write_manifest("distill", p, out, timer)


# ---------------------------------------------------------------------------
# embed


def _append_bench_row(out: Path, row: Dict) -> None:
    path = out / "bench.csv"
    header = ["name", "kind", "n", "batch_size", "seconds_per_1k"]
    exists = path.exists()
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if not exists:
            writer.writerow(header)
        writer.writerow([row[h] for h in header])


def cmd_embed(p: Dict) -> None:
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    timer = PhaseTimer()
    _apply_determinism(p["seed"], p["deterministic"])
    ckpt = load_checkpoint(p["checkpoint"])
    source = Path(p["input"])
    if p["mode"] == "flat":
        with timer.time("load"):
            if ckpt.encoder_config.input_kind == "vector":
                dataset = load_vector_dataset(source)
            else:
                dataset = load_image_folder(source, image_size=ckpt.encoder_config.image_size)
                dataset.channel_mean = ckpt.channel_mean
                dataset.channel_std = ckpt.channel_std
        with timer.time("embed"):
            start = time.perf_counter()
            matrix = embed(ckpt, dataset, batch_size=p["batch_size"])
            elapsed = time.perf_counter() - start
        write_embedding_file(out / "embeddings.emb", matrix)
        per_1k = elapsed / max(1, matrix.n_samples) * 1000.0
        _append_bench_row(
            out,
            {"name": Path(p["checkpoint"]).name, "kind": "flat", "n": matrix.n_samples,
             "batch_size": p["batch_size"], "seconds_per_1k": f"{per_1k:.6f}"},
        )
        print(f"embedded {matrix.n_samples} samples ({per_1k:.3f} s / 1k) -> {out / 'embeddings.emb'}")
    elif p["mode"] == "bags":
        if ckpt.encoder_config.input_kind == "vector":
            slide_files = sorted(source.glob("*.emb"))
            if not slide_files:
                raise ConfigError(f"{source}: no .emb slide files found")
            with timer.time("embed"):
                for f in slide_files:
                    patches = read_embedding_file(f)
                    matrix = embed(ckpt, np.asarray(patches.values, dtype=np.float32),
                                   sample_ids=patches.sample_ids, batch_size=p["batch_size"])
                    write_embedding_file(out / "bags" / f.name, matrix)
            n_slides = len(slide_files)
        else:
            slide_dirs = sorted(d for d in source.iterdir() if d.is_dir())
            if not slide_dirs:
                raise ConfigError(f"{source}: no slide subdirectories found")
            with timer.time("embed"):
                for d in slide_dirs:
                    matrix = _embed_image_bag(ckpt, d, p["batch_size"])
                    write_embedding_file(out / "bags" / f"{d.name}.emb", matrix)
            n_slides = len(slide_dirs)
        print(f"embedded {n_slides} slides -> {out / 'bags'}")
    else:
        raise ConfigError(f"unknown embed mode {p['mode']!r}")
    _write_manifest("embed", p, out, timer)


def _embed_image_bag(ckpt, slide_dir: Path, batch_size: int) -> EmbeddingMatrix:
    """Embed every image directly inside one slide directory."""
    from .student import ImageFolderDataset

    paths = sorted(
        str(f) for f in slide_dir.iterdir()
        if f.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
    )
    if not paths:
        raise ConfigError(f"{slide_dir}: no patch images found")
    ds = ImageFolderDataset(
        sample_ids=tuple(Path(p).name for p in paths),
        paths=tuple(paths),
        labels=None,
        label_names=(),
        image_size=ckpt.encoder_config.image_size,
        channels=ckpt.encoder_config.channels,
        channel_mean=ckpt.channel_mean,
        channel_std=ckpt.channel_std,
    )
    return embed(ckpt, ds, batch_size=batch_size)


# ---------------------------------------------------------------------------
# mil-train


def _load_bags(bags_dir: Path, cohort_path: Path, horizon: float) -> List[Bag]:
    patients = {pt.patient_id: pt for pt in read_cohort_csv(cohort_path, horizon)}
    slide_to_patient = {}
    for pt in patients.values():
        for slide in pt.slide_ids:
            slide_to_patient[slide] = pt
    bags = []
    for f in sorted(bags_dir.glob("*.emb")):
        slide_id = f.stem
        if slide_id not in slide_to_patient:
            raise ConfigError(f"slide {slide_id!r} has no cohort row")
        pt = slide_to_patient[slide_id]
        matrix = read_embedding_file(f)
        bags.append(
            Bag(
                slide_id=slide_id,
                patient_id=pt.patient_id,
                features=np.asarray(matrix.values, dtype=np.float32),
                label=pt.label,
                time_months=pt.time_months,
                event=pt.event,
            )
        )
    if not bags:
        raise ConfigError(f"{bags_dir}: no bags found")
    covered = {b.patient_id for b in bags}
    missing = sorted(set(patients) - covered)
    if missing:
        raise ConfigError(f"cohort patients without bags, e.g. {missing[:3]}")
    return bags


def cmd_mil_train(p: Dict) -> None:
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    timer = PhaseTimer()
    _apply_determinism(p["seed"], p["deterministic"])
    with timer.time("load"):
        bags = _load_bags(Path(p["bags"]), Path(p["cohort"]), p["horizon"])
        patients = read_cohort_csv(p["cohort"], p["horizon"])
        if p.get("folds_file"):
            split = FoldAssignment.from_json(json.loads(Path(p["folds_file"]).read_text()))
        else:
            keys = [k for k in ("age", "bmi", "income") if all(k in pt.covariates for pt in patients)]
            if not keys:
                raise ConfigError("cohort lacks the age/bmi/income covariates needed for fold stratification")
            split = stratified_kfold(patients, keys, k=p["folds"], seed=p["seed"])
        atomic_write_json(out / "folds.json", split.to_json())
    config = Stage2Config(
        hidden_dim=p["hidden"],
        gated=not p["no_gated"],
        learning_rate=p["lr"],
        epochs=p["epochs"],
        patience=p["patience"],
        l1_coeff=p["l1"],
        seed=p["seed"],
        patient_level_auc=not p["slide_level_auc"],
        horizon_months=p["horizon"],
    )
    with timer.time("train"):
        results, pooled = train_stage2(bags, split, config)
    with timer.time("write"):
        models_dir = out / "models"
        models_dir.mkdir(exist_ok=True)
        for res in results:
            torch.save(res.classifier.model_.state_dict(), models_dir / f"fold{res.fold}.pt")
        lines = ["patient_id,slide_id,fold,probability"]
        for pred in pooled:
            lines.append(f"{pred.patient_id},{pred.slide_id},{pred.fold},{_fmt(pred.probability)}")
        atomic_write_text(out / "predictions.csv", "\n".join(lines) + "\n")
        if p["export_attention"]:
            att = ["slide_id,patch_index,weight"]
            for pred in pooled:
                for i, w in enumerate(pred.attention):
                    att.append(f"{pred.slide_id},{i},{_fmt(w)}")
            atomic_write_text(out / "attention.csv", "\n".join(att) + "\n")
    stops = [res.stopped_epoch or p["epochs"] for res in results]
    print(f"trained {len(results)} folds (stop epochs: {stops}) -> {out / 'predictions.csv'}")
    _write_manifest("mil-train", p, out, timer)


# ---------------------------------------------------------------------------
# evaluate


def _read_predictions(path) -> List[Dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"{path}: empty predictions file")
    required = {"patient_id", "slide_id", "fold", "probability"}
    if required - set(rows[0]):
        raise ConfigError(f"{path}: predictions need columns {sorted(required)}")
    return rows


def _patient_table(pred_rows, patients) -> List[Dict]:
    by_pid: Dict[str, Dict] = {}
    known = {pt.patient_id: pt for pt in patients}
    for row in pred_rows:
        pid = row["patient_id"]
        if pid not in known:
            raise ConfigError(f"prediction for unknown patient {pid!r}")
        entry = by_pid.setdefault(pid, {"probs": [], "fold": int(row["fold"])})
        entry["probs"].append(float(row["probability"]))
    table = []
    for pid, entry in sorted(by_pid.items()):
        pt = known[pid]
        table.append(
            {
                "patient_id": pid,
                "probability": float(np.mean(entry["probs"])),
                "fold": entry["fold"],
                "label": pt.label,
                "time_months": pt.time_months,
                "event": pt.event,
                "subgroups": dict(pt.subgroups),
            }
        )
    return table


def _mean_std(values: List[float]) -> Dict[str, object]:
    arr = np.asarray(values, dtype=float)
    return {
        "mean": float(arr.mean()),
        "std": float(arr.std(ddof=1)) if len(arr) > 1 else 0.0,
        "per_fold": [float(v) for v in arr],
    }


def cmd_evaluate(p: Dict) -> None:
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    timer = PhaseTimer()
    with timer.time("load"):
        pred_rows = _read_predictions(p["predictions"])
        patients = read_cohort_csv(p["cohort"], p["horizon"])
        table = _patient_table(pred_rows, patients)

    with timer.time("metrics"):
        folds = sorted({row["fold"] for row in table})
        per_fold: Dict[str, List[float]] = {"auc": [], "balanced_accuracy": [], "sensitivity": [], "specificity": []}
        for fold in folds:
            rows = [r for r in table if r["fold"] == fold]
            probs = [r["probability"] for r in rows]
            labels = [r["label"] for r in rows]
            per_fold["auc"].append(roc_auc(probs, labels))
            cm = confusion_metrics(probs, labels, threshold=p["threshold"])
            for key in ("balanced_accuracy", "sensitivity", "specificity"):
                per_fold[key].append(cm[key])

        records = [
            SurvivalRecord(r["patient_id"], r["probability"], r["time_months"], r["event"],
                           r["label"], r["subgroups"])
            for r in table
        ]
        rule = "median" if p["rule"] == "median" else float(p["rule"])
        high, low = stratify_risk(records, rule)
        metrics = {
            "n_patients": len(table),
            "folds": {k: _mean_std(v) for k, v in per_fold.items()},
            "pooled": {
                "auc": roc_auc([r["probability"] for r in table], [r["label"] for r in table]),
                "c_index": concordance_index(records),
                "risk_groups": {"high": len(high), "low": len(low)},
            },
        }
        try:
            cox = cox_fit(records)
            metrics["pooled"]["cox"] = {
                "beta": cox.beta,
                "hazard_ratio": cox.hazard_ratio,
                "ci95": list(cox.ci95),
                "p_value": cox.p_value,
                "standard_error": cox.standard_error,
                "rendered": cox.render_hazard_ratio(),
            }
        except (DegenerateCovariateError, NoEventsError, NonConvergenceError) as exc:
            metrics["pooled"]["cox"] = {"error": f"{type(exc).__name__}: {exc}"}
        km_rows = []
        if high and low:
            lr = logrank_test(high, low)
            metrics["pooled"]["logrank"] = lr
            for name, group in (("high", high), ("low", low)):
                curve = km_estimate([r.time_months for r in group], [r.event for r in group])
                for t, s, n_at in zip(curve.event_times, curve.survival_probabilities, curve.at_risk_counts):
                    km_rows.append(f"{name},{_fmt(t)},{_fmt(s)},{n_at}")
        else:
            metrics["pooled"]["logrank"] = {
                "error": "EmptyInputError: risk stratification produced an empty group"
            }
        if p.get("stratify_by"):
            metrics["subgroups"] = {}
            for key in p["stratify_by"].split(","):
                key = key.strip()
                if key:
                    metrics["subgroups"][key] = evaluate_stratified(records, key, p["threshold"])

    with timer.time("write"):
        atomic_write_json(out / "metrics.json", metrics)
        atomic_write_text(out / "km_curves.csv", "group,time,survival,at_risk\n" + "\n".join(km_rows) + "\n")
        if p["plots"]:
            _render_km_plot(out, records, rule)
    auc = metrics["folds"]["auc"]
    print(
        f"AUC {auc['mean']:.3f} +/- {auc['std']:.3f} | C-index {metrics['pooled']['c_index']:.4f} "
        f"| HR {metrics['pooled']['cox']['rendered']} -> {out / 'metrics.json'}"
    )
    _write_manifest("evaluate", p, out, timer)


def _render_km_plot(out: Path, records, rule) -> None:
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        print("matplotlib unavailable; skipping KM plot", file=sys.stderr)
        return
    high, low = stratify_risk(records, rule)
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, group, color in (("high risk", high, "tab:orange"), ("low risk", low, "tab:blue")):
        if not group:
            continue
        curve = km_estimate([r.time_months for r in group], [r.event for r in group])
        xs = [0.0] + curve.event_times
        ys = [1.0] + curve.survival_probabilities
        ax.step(xs, ys, where="post", label=f"{name} (n={len(group)})", color=color)
    ax.set_xlabel("months")
    ax.set_ylabel("survival probability")
    ax.set_ylim(0, 1.02)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "km_plot.png", dpi=150)
    plt.close(fig)


# ---------------------------------------------------------------------------
# bench


def _bench_checkpoint(path: str, n: int, batch_size: int, seed: int) -> Dict:
    ckpt = load_checkpoint(path)
    cfg = ckpt.encoder_config
    rng = np.random.default_rng(seed)
    if cfg.input_kind == "vector":
        data = rng.standard_normal((n, cfg.input_dim)).astype(np.float32)
    else:
        data = rng.standard_normal((n, cfg.channels, cfg.image_size, cfg.image_size)).astype(np.float32)
    params = sum(int(q.numel()) for q in ckpt.encoder.parameters())
    with torch.no_grad():
        ckpt.encoder(torch.as_tensor(data[: min(batch_size, n)]))  # warm-up
        start = time.perf_counter()
        for s in range(0, n, batch_size):
            ckpt.encoder(torch.as_tensor(data[s : s + batch_size]))
        elapsed = time.perf_counter() - start
    return {
        "name": Path(path).name,
        "kind": "encoder",
        "params_m": params / 1e6,
        "embed_dim": cfg.embed_dim,
        "seconds_per_1k": elapsed / n * 1000.0,
    }


def _bench_teacher_file(path: str, n: int, seed: int) -> Dict:
    matrix = read_embedding_file(path)
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, matrix.n_samples, size=n)
    start = time.perf_counter()
    _ = np.asarray(matrix.values)[rows]
    elapsed = time.perf_counter() - start
    return {
        "name": Path(path).name,
        "kind": "precomputed",
        "params_m": 0.0,
        "embed_dim": matrix.dim,
        "seconds_per_1k": elapsed / n * 1000.0,
    }


def cmd_bench(p: Dict) -> None:
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    timer = PhaseTimer()
    _apply_determinism(p["seed"], p["deterministic"])
    rows: List[Dict] = []
    with timer.time("bench"):
        for path in (p.get("checkpoints") or "").split(","):
            if path.strip():
                rows.append(_bench_checkpoint(path.strip(), p["n_patches"], p["batch_size"], p["seed"]))
        for path in (p.get("teacher_files") or "").split(","):
            if path.strip():
                rows.append(_bench_teacher_file(path.strip(), p["n_patches"], p["seed"]))
    if not rows:
        raise ConfigError("bench needs --checkpoints and/or --teacher-files")
    slowest = max(r["seconds_per_1k"] for r in rows)
    avg = sum(r["seconds_per_1k"] for r in rows) / len(rows)
    for r in rows:
        r["speedup_vs_slowest"] = slowest / r["seconds_per_1k"]
        r["speedup_vs_avg"] = avg / r["seconds_per_1k"]
        r["batch_size"] = p["batch_size"]
    rows.sort(key=lambda r: r["seconds_per_1k"])
    header = ["name", "kind", "params_m", "embed_dim", "batch_size",
              "seconds_per_1k", "speedup_vs_slowest", "speedup_vs_avg"]
    lines = [",".join(header)]
    for r in rows:
        lines.append(
            f"{r['name']},{r['kind']},{_fmt(r['params_m'])},{r['embed_dim']},{r['batch_size']},"
            f"{_fmt(r['seconds_per_1k'])},{_fmt(r['speedup_vs_slowest'])},{_fmt(r['speedup_vs_avg'])}"
        )
    atomic_write_text(out / "bench.csv", "\n".join(lines) + "\n")
    widths = [28, 12, 10, 10, 10, 16, 19, 15]
    print("".join(h.ljust(w) for h, w in zip(header, widths)))
    for r in rows:
        cells = [r["name"][:26], r["kind"], f"{r['params_m']:.3f}", str(r["embed_dim"]),
                 str(r["batch_size"]), f"{r['seconds_per_1k']:.4f}",
                 f"{r['speedup_vs_slowest']:.2f}", f"{r['speedup_vs_avg']:.2f}"]
        print("".join(c.ljust(w) for c, w in zip(cells, widths)))
    _write_manifest("bench", p, out, timer)


# ---------------------------------------------------------------------------
# probe


def _read_labels_csv(path) -> Dict[str, str]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["sample_id"]: row["label"] for row in csv.DictReader(fh)}


def cmd_probe(p: Dict) -> None:
    out = Path(p["out"])
    out.mkdir(parents=True, exist_ok=True)
    timer = PhaseTimer()
    with timer.time("load"):
        train = read_embedding_file(p["train_emb"])
        val = read_embedding_file(p["val_emb"])
        train_labels = _read_labels_csv(p["train_labels"])
        val_labels = _read_labels_csv(p["val_labels"])
        ytr = [train_labels[sid] for sid in train.sample_ids]
        yva = [val_labels[sid] for sid in val.sample_ids]
    with timer.time("probe"):
        lp = eval_linear_probe(train, ytr, val, yva)
        knn = eval_knn_sweep(train, ytr, val, yva, ks=tuple(_int_list(p["ks"])))
    payload = {"linear_probe": lp, "knn": knn}
    atomic_write_json(out / "probe.json", payload)
    print(
        f"LP acc {lp['accuracy']:.4f} macro-F1 {lp['macro_f1']:.4f} | "
        f"KNN(k={knn['best']['k']}) acc {knn['best']['accuracy']:.4f} -> {out / 'probe.json'}"
    )
    _write_manifest("probe", p, out, timer)


# ---------------------------------------------------------------------------
# manifest plumbing and argument parsing


_PATH_KEYS = ("dataset", "teachers", "checkpoint", "input", "bags", "cohort", "predictions",
              "folds_file", "train_emb", "train_labels", "val_emb", "val_labels", "latents")


def _write_manifest(command: str, p: Dict, out: Path, timer: PhaseTimer) -> None:
    checksums = {}
    for key in _PATH_KEYS:
        value = p.get(key)
        if value:
            digest = checksum_path(value)
            if digest:
                checksums[str(value)] = digest
    for key in ("checkpoints", "teacher_files"):
        for path in (p.get(key) or "").split(","):
            if path.strip():
                digest = checksum_path(path.strip())
                if digest:
                    checksums[path.strip()] = digest
    args = {k: v for k, v in p.items() if k not in ("command", "func")}
    RunManifest(
        command=command,
        args=args,
        seed=int(p.get("seed", 0)),
        version=__version__,
        deterministic=bool(p.get("deterministic", True)),
        input_checksums=checksums,
        wall_clock={k: round(v, 6) for k, v in timer.phases.items()},
    ).write(out)


def cmd_rerun(p: Dict) -> None:
    manifest = RunManifest.load(p["manifest"])
    params = dict(manifest.args)
    if p.get("out"):
        params["out"] = p["out"]
    run_command(manifest.command, params)


_COMMANDS = {
    "synth": cmd_synth,
    "distill": cmd_distill,
    "embed": cmd_embed,
    "mil-train": cmd_mil_train,
    "evaluate": cmd_evaluate,
    "bench": cmd_bench,
    "probe": cmd_probe,
    "rerun": cmd_rerun,
}


def run_command(command: str, params: Dict) -> None:
    if command not in _COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    _COMMANDS[command](params)


def _add_common(sp, out_default="runs/out"):
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", default=out_default)
    sp.add_argument("--deterministic", dest="deterministic", action="store_true", default=True)
    sp.add_argument("--no-deterministic", dest="deterministic", action="store_false")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="morphdistill",
        description="Multi-teacher relational distillation + attention-MIL survival toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", default=None, help="JSON file with per-subcommand argument defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate synthetic teachers / cohort / dataset fixtures")
    sp.add_argument("kind", choices=["teachers", "cohort", "dataset"])
    sp.add_argument("--dims", default="8,32", help="teacher dims, comma-separated")
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--latent-dim", type=int, default=16)
    sp.add_argument("--latents", default=None, help="reuse an .emb file as the shared latent")
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--patients", type=int, default=120)
    sp.add_argument("--signal", type=float, default=2.5)
    sp.add_argument("--patches", type=int, default=64)
    sp.add_argument("--censoring", type=float, default=0.2)
    sp.add_argument("--horizon", type=float, default=60.0)
    sp.add_argument("--feature-dim", type=int, default=32)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--dim", type=int, default=16)
    sp.add_argument("--separation", type=float, default=2.0)
    _add_common(sp)

    sp = sub.add_parser("distill", help="Stage I student training")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--teachers", default=None)
    sp.add_argument("--strategy", choices=list(STRATEGIES), default="supcon-distill")
    sp.add_argument("--lambda", dest="lam", type=float, default=0.75)
    sp.add_argument("--tau", type=float, default=0.1)
    sp.add_argument("--epochs", type=int, default=50)
    sp.add_argument("--batch-size", type=int, default=256)
    sp.add_argument("--lr", type=float, default=1e-3)
    sp.add_argument("--weight-decay", type=float, default=1e-4)
    sp.add_argument("--embed-dim", type=int, default=768)
    sp.add_argument("--hidden", default="256", help="mlp hidden sizes, comma-separated")
    sp.add_argument("--vector-noise", type=float, default=0.0)
    sp.add_argument("--image-size", type=int, default=224)
    sp.add_argument("--patch-size", type=int, default=16)
    sp.add_argument("--depth", type=int, default=6)
    sp.add_argument("--heads", type=int, default=6)
    sp.add_argument("--width", type=int, default=384)
    sp.add_argument("--ablation-grid", action="store_true")
    _add_common(sp)

    sp = sub.add_parser("embed", help="extract embeddings with a frozen checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--mode", choices=["flat", "bags"], default="flat")
    sp.add_argument("--batch-size", type=int, default=256)
    _add_common(sp)

    sp = sub.add_parser("mil-train", help="Stage II cross-validated MIL training")
    sp.add_argument("--bags", required=True)
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--folds", type=int, default=5)
    sp.add_argument("--folds-file", default=None)
    sp.add_argument("--horizon", type=float, default=60.0)
    sp.add_argument("--hidden", type=int, default=512)
    sp.add_argument("--no-gated", action="store_true")
    sp.add_argument("--lr", type=float, default=2e-4)
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--patience", type=int, default=10)
    sp.add_argument("--l1", type=float, default=5e-4)
    sp.add_argument("--slide-level-auc", action="store_true")
    sp.add_argument("--export-attention", action="store_true")
    _add_common(sp)

    sp = sub.add_parser("evaluate", help="metrics, Cox/KM/log-rank, subgroup tables")
    sp.add_argument("--predictions", required=True)
    sp.add_argument("--cohort", required=True)
    sp.add_argument("--horizon", type=float, default=60.0)
    sp.add_argument("--threshold", type=float, default=0.5)
    sp.add_argument("--rule", default="median", help="'median' or a fixed probability threshold")
    sp.add_argument("--stratify-by", default=None)
    sp.add_argument("--plots", action="store_true")
    _add_common(sp)

    sp = sub.add_parser("bench", help="throughput table for encoders / embedding files")
    sp.add_argument("--checkpoints", default=None, help="comma-separated checkpoint dirs")
    sp.add_argument("--teacher-files", default=None, help="comma-separated .emb files")
    sp.add_argument("--n-patches", type=int, default=1000)
    sp.add_argument("--batch-size", type=int, default=32)
    _add_common(sp)

    sp = sub.add_parser("probe", help="linear-probe and KNN embedding evaluation")
    sp.add_argument("--train-emb", required=True)
    sp.add_argument("--train-labels", required=True)
    sp.add_argument("--val-emb", required=True)
    sp.add_argument("--val-labels", required=True)
    sp.add_argument("--ks", default="1,5,10,20,30,50")
    _add_common(sp)

    sp = sub.add_parser("rerun", help="re-execute a run manifest")
    sp.add_argument("manifest")
    sp.add_argument("--out", default=None)
    return parser


def _apply_config_defaults(parser: argparse.ArgumentParser, argv: List[str]) -> List[str]:
    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    cfg_path = argv[idx + 1]
    payload = json.loads(Path(cfg_path).read_text(encoding="utf-8"))
    command = next((a for a in argv if not a.startswith("-") and a != cfg_path), None)
    section = payload.get(command, {}) if command else {}
    section = {**{k: v for k, v in payload.items() if not isinstance(v, dict)}, **section}
    for action in parser._subparsers._group_actions:  # noqa: SLF001 - argparse has no public hook
        if hasattr(action, "choices") and command in (action.choices or {}):
            action.choices[command].set_defaults(
                **{k.replace("-", "_"): v for k, v in section.items()}
            )
    return argv


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    argv = _apply_config_defaults(parser, argv)
    args = parser.parse_args(argv)
    params = vars(args)
    try:
        run_command(params.pop("command"), params)
    except MorphDistillError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
