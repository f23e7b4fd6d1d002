"""End-to-end orchestration: dataset synthesis, key generation, watermark
training, attack application, evaluation, attribution, and report emission.

Every function here is a pure mapping from (config, seed) to files and
report objects, shared by the CLI and the HTTP service. Primary outputs
contain no timestamps, so a rerun with the same config produces
byte-identical files.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attacks as atk
from .attacks import AttackSuite, named_suite, sample_suite_batch
from .audio import Dataset, read_wav, synth_dataset, ingest_wav_dir, write_wav, AudioClip
from .config import ExperimentConfig
from .errors import ConfigError, DataError
from .keys import (
    ConditionReport,
    KeyGenResult,
    KeySet,
    check_conditions,
    generate_keyset,
    keyset_to_dict,
    load_keys,
    save_keys,
)
from .metrics import EvalReport, attributability, distinguishability, fsd
from .registry import AttributionResult, attribute, load_registry
from .watermark import (
    SampleSource,
    WatermarkModel,
    apply_matrix,
    load_model,
    quality_loss,
    save_model,
    train,
    train_robust,
)

ATTACK_CLASSES = ("noise", "gain", "speed", "pass_filter", "combination")

# Ablation rows mirror the loss-design comparison: hinge alone, hinge plus
# the quality term, and the full objective with the angle term.
ABLATION_CONFIGS = ("hinge_only", "plus_quality", "plus_angle")


def build_dataset(config: ExperimentConfig) -> Dataset:
    ds_cfg = config.dataset
    if ds_cfg.kind == "synthetic":
        return synth_dataset(ds_cfg.n, ds_cfg.d_x, ds_cfg.sample_rate, ds_cfg.seed)
    return ingest_wav_dir(ds_cfg.path)


# ---------------------------------------------------------------------------
# synth-data / ingest
# ---------------------------------------------------------------------------


def run_synth_data(config: ExperimentConfig, out_dir: Path) -> dict:
    """Write the synthetic dataset as WAV files; returns its summary."""

    dataset = build_dataset(config)
    out_dir.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(dataset.n_clips)))
    for i in range(dataset.n_clips):
        write_wav(dataset.clip(i), out_dir / f"clip_{i:0{width}d}.wav")
    return {
        "n_clips": dataset.n_clips,
        "d_x": dataset.d_x,
        "sample_rate": dataset.sample_rate,
        "content_hash": dataset.content_hash,
        "dir": str(out_dir),
    }


def run_ingest(wav_dir: str | Path) -> dict:
    dataset = ingest_wav_dir(wav_dir)
    return {
        "n_clips": dataset.n_clips,
        "d_x": dataset.d_x,
        "sample_rate": dataset.sample_rate,
        "content_hash": dataset.content_hash,
    }


# ---------------------------------------------------------------------------
# keygen
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeygenOutput:
    keyset: KeySet
    results: list[KeyGenResult]
    report: ConditionReport


def run_keygen(config: ExperimentConfig, seed: int, out_dir: Path | None = None) -> KeygenOutput:
    """Generate the configured number of keys and check their conditions.

    The conditions file is written with delta 0 (no models exist yet); the
    eval stage re-reports the bound with the measured delta.
    """

    dataset = build_dataset(config)
    keyset, results = generate_keyset(
        dataset,
        config.n_keys,
        config.optimizer.to_optimizer_config(default_algorithm="adam"),
        seed=seed,
        use_bias=config.use_bias,
    )
    report = check_conditions(keyset, dataset, measured_delta=0.0)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_keys(keyset, out_dir / "keys.json", dataset.sample_rate)
        payload = {
            "n_keys": keyset.n_keys,
            "gram_max": keyset.gram_max,
            "dataset_hash": keyset.dataset_hash,
            "keygen": [
                {
                    "id": r.key.id,
                    "compliance_rate": r.compliance_rate,
                    "iterations": r.iterations,
                    "converged": r.converged,
                }
                for r in results
            ],
            "conditions": report.to_dict(),
        }
        (out_dir / "conditions.json").write_text(json.dumps(payload, indent=1) + "\n")
    return KeygenOutput(keyset, results, report)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def run_train(
    config: ExperimentConfig,
    seed: int,
    keyset: KeySet,
    out_dir: Path | None = None,
) -> list[WatermarkModel]:
    """Train one watermark model per key, optionally against an attack suite."""

    dataset = build_dataset(config)
    if keyset.dataset_hash != dataset.content_hash:
        raise DataError("keys were generated against a different dataset than configured")
    source = SampleSource(dataset)
    opt = config.optimizer.to_optimizer_config(default_algorithm="momentum")
    suite = config.suite()
    if config.robust and suite is None:
        raise ConfigError("robust training requires an attack_suite in the config")
    models = []
    for key in keyset.keys:
        if config.robust:
            model = train_robust(key, source, suite, config.lambdas, opt, seed=(seed, key.id))
        else:
            model = train(key, source, config.lambdas, opt, seed=(seed, key.id))
        models.append(model)
    if out_dir is not None:
        models_dir = out_dir / "models"
        models_dir.mkdir(parents=True, exist_ok=True)
        for model in models:
            stem = f"model_{model.key_id:03d}"
            save_model(model, models_dir / f"{stem}.json", models_dir / f"{stem}_log.csv")
    return models


def load_models(models_dir: Path) -> list[WatermarkModel]:
    paths = sorted(Path(models_dir).glob("model_*.json"))
    if not paths:
        raise ConfigError(f"{models_dir}: no model files found")
    return [load_model(p) for p in paths]


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def _draw_generated(source: SampleSource, models: list[WatermarkModel],
                    n_samples: int, seed: int) -> list[np.ndarray]:
    out = []
    for model in models:
        base = source.draw_matrix([seed, 0xE0, model.key_id], n_samples)
        out.append(apply_matrix(model.w, base))
    return out


def evaluate(
    dataset: Dataset,
    keyset: KeySet,
    models: list[WatermarkModel],
    n_samples: int,
    seed: int,
    attack_classes: tuple[str, ...] = (),
) -> EvalReport:
    """Score all models: distinguishability, attributability, FSD, and
    post-attack variants for the requested attack classes."""

    if len(models) != keyset.n_keys:
        raise DataError(f"expected {keyset.n_keys} models, got {len(models)}")
    models = sorted(models, key=lambda m: m.key_id)
    source = SampleSource(dataset)
    auth = source.draw_matrix([seed, 0xA0], n_samples)
    generated = _draw_generated(source, models, n_samples, seed)

    attacked: dict[str, list[np.ndarray]] = {}
    for ci, label in enumerate(attack_classes):
        suite = named_suite(label)
        attacked[label] = [
            sample_suite_batch(suite, gen.shape[0], dataset.d_x, dataset.sample_rate,
                               seed=[seed, 0xAE, ci, model.key_id]).forward(gen)
            for model, gen in zip(models, generated)
        ]

    per_model = []
    for i, (key, model, gen) in enumerate(zip(keyset.keys, models, generated)):
        row = {
            "key_id": key.id,
            "distinguishability": distinguishability(key, gen, auth),
            "compliance": float(np.mean(auth @ key.direction + key.bias < 0.0)),
            "fsd": fsd(gen, auth, dataset.sample_rate),
            "quality_l1": quality_loss(model.w, auth, apply_matrix(model.w, auth)),
        }
        if attack_classes:
            row["post_attack"] = {
                label: distinguishability(key, attacked[label][i], auth)
                for label in attack_classes
            }
        per_model.append(row)

    report = EvalReport(
        per_model=tuple(per_model),
        attributability=attributability(keyset, generated),
        post_attack_attributability={
            label: attributability(keyset, attacked[label]) for label in attack_classes
        },
        quality=fsd(np.concatenate(generated, axis=0), auth, dataset.sample_rate),
        n_samples=n_samples,
        seed=seed,
    )
    return report


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def write_eval_outputs(report: EvalReport, keyset: KeySet, dataset: Dataset,
                       out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    measured_delta = max(1.0 - row["distinguishability"] for row in report.per_model)
    payload = report.to_dict()
    payload["measured_delta"] = measured_delta
    payload["bound"] = max(0.0, 1.0 - keyset.n_keys * measured_delta)
    (out_dir / "eval.json").write_text(json.dumps(payload, indent=1) + "\n")

    attack_labels = sorted(report.post_attack_attributability)
    header = ["key_id", "distinguishability", "compliance", "fsd", "quality_l1"]
    header += [f"dist_after_{label}" for label in attack_labels]
    rows = []
    for row in report.per_model:
        out = [row["key_id"], row["distinguishability"], row["compliance"],
               row["fsd"], row["quality_l1"]]
        out += [row.get("post_attack", {}).get(label) for label in attack_labels]
        rows.append(out)
    _write_csv(out_dir / "per_model.csv", header, rows)


def run_eval(
    config: ExperimentConfig,
    seed: int,
    keyset: KeySet,
    models: list[WatermarkModel],
    out_dir: Path | None = None,
) -> EvalReport:
    dataset = build_dataset(config)
    report = evaluate(dataset, keyset, models, config.eval_samples, seed,
                      tuple(config.eval_attack_classes))
    if out_dir is not None:
        write_eval_outputs(report, keyset, dataset, out_dir)
    return report


# ---------------------------------------------------------------------------
# ablation and attack comparison modes
# ---------------------------------------------------------------------------


def ablation_lambdas(lambdas: tuple[float, float, float]) -> dict[str, tuple[float, float, float]]:
    l1, l2, l3 = lambdas
    return {
        "hinge_only": (l1, 0.0, 0.0),
        "plus_quality": (l1, l2, 0.0),
        "plus_angle": (l1, l2, l3),
    }


def run_eval_ablation(
    config: ExperimentConfig,
    seed: int,
    keyset: KeySet,
    out_dir: Path | None = None,
) -> list[dict]:
    """Train and score models under the three loss configurations.

    Emits one row per configuration with distinguishability, attributability,
    and FSD columns.
    """

    dataset = build_dataset(config)
    source = SampleSource(dataset)
    opt = config.optimizer.to_optimizer_config(default_algorithm="momentum")
    rows = []
    for label, lambdas in ablation_lambdas(config.lambdas).items():
        models = [
            train(key, source, lambdas, opt, seed=(seed, key.id))
            for key in keyset.keys
        ]
        report = evaluate(dataset, keyset, models, config.eval_samples, seed)
        rows.append({
            "config": label,
            "lambdas": list(lambdas),
            "distinguishability": report.mean_distinguishability(),
            "attributability": report.attributability,
            "fsd": report.quality,
        })
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_csv(
            out_dir / "ablation.csv",
            ["config", "dist", "att", "fsd"],
            [[r["config"], r["distinguishability"], r["attributability"], r["fsd"]] for r in rows],
        )
        (out_dir / "ablation.json").write_text(json.dumps(rows, indent=1) + "\n")
    return rows


def run_eval_attacks(
    config: ExperimentConfig,
    seed: int,
    keyset: KeySet,
    out_dir: Path | None = None,
    classes: tuple[str, ...] = ATTACK_CLASSES,
) -> list[dict]:
    """Before/after robust-training comparison per attack class.

    Non-robust models are trained once; for each attack class a robust set is
    trained with paired seeds and both sets are scored on identically seeded
    attacked samples.
    """

    dataset = build_dataset(config)
    source = SampleSource(dataset)
    opt = config.optimizer.to_optimizer_config(default_algorithm="momentum")
    baseline = [train(key, source, config.lambdas, opt, seed=(seed, key.id))
                for key in keyset.keys]
    rows = []
    for ci, label in enumerate(classes):
        suite = named_suite(label)
        robust = [
            train_robust(key, source, suite, config.lambdas, opt, seed=(seed, key.id))
            for key in keyset.keys
        ]
        row = {"attack": label}
        for tag, models in (("before", baseline), ("after", robust)):
            report = evaluate(dataset, keyset, models, config.eval_samples,
                              seed + ci + 1, attack_classes=(label,))
            row[f"dist_{tag}"] = float(np.mean([
                r["post_attack"][label] for r in report.per_model
            ]))
            row[f"att_{tag}"] = report.post_attack_attributability[label]
            row[f"fsd_{tag}"] = report.quality
            row[f"quality_{tag}"] = float(np.mean([r["quality_l1"] for r in report.per_model]))
        rows.append(row)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        header = ["attack", "dist_before", "dist_after", "att_before", "att_after",
                  "fsd_before", "fsd_after", "quality_before", "quality_after"]
        _write_csv(out_dir / "attack.csv", header,
                   [[r["attack"], r["dist_before"], r["dist_after"], r["att_before"],
                     r["att_after"], r["fsd_before"], r["fsd_after"],
                     r["quality_before"], r["quality_after"]] for r in rows])
        (out_dir / "attack.json").write_text(json.dumps(rows, indent=1) + "\n")
    return rows


# ---------------------------------------------------------------------------
# attack application, series report, attribution
# ---------------------------------------------------------------------------


def run_attack(
    suite: AttackSuite,
    in_path: Path,
    seed: int,
    out_dir: Path,
) -> dict:
    """Apply one sampled attack per input clip and write the results as WAV."""

    paths = sorted(in_path.glob("*.wav")) if in_path.is_dir() else [in_path]
    if not paths:
        raise DataError(f"{in_path}: no .wav inputs found")
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, p in enumerate(paths):
        clip = read_wav(p)
        kernel = sample_suite_batch(suite, 1, clip.d_x, clip.sample_rate, seed=[seed, i])
        out = AudioClip(kernel.forward(clip.samples[None, :])[0], clip.sample_rate)
        write_wav(out, out_dir / p.name)
    meta = {"suite": atk.suite_to_dict(suite), "seed": seed,
            "inputs": [p.name for p in paths]}
    (out_dir / "attack_meta.json").write_text(json.dumps(meta, indent=1) + "\n")
    return meta


def run_report(
    config: ExperimentConfig,
    seed: int,
    keyset: KeySet,
    models: list[WatermarkModel],
    out_dir: Path,
) -> list[dict]:
    """Emit per-model-count metric series: for each prefix of the model list,
    average pairwise key orthogonality, mean distinguishability,
    attributability, and mean FSD."""

    dataset = build_dataset(config)
    models = sorted(models, key=lambda m: m.key_id)
    report = evaluate(dataset, keyset, models, config.eval_samples, seed)
    source = SampleSource(dataset)
    generated = _draw_generated(source, models, config.eval_samples, seed)
    dirs = keyset.direction_matrix()
    gram = np.abs(dirs @ dirs.T)
    series = []
    for i in range(1, keyset.n_keys + 1):
        if i == 1:
            avg_orth = 0.0
        else:
            sub = gram[:i, :i]
            avg_orth = float((sub.sum() - np.trace(sub)) / (i * (i - 1)))
        prefix_keys = KeySet.from_keys(list(keyset.keys[:i]), keyset.dataset_hash)
        series.append({
            "n_models": i,
            "avg_orthogonality": avg_orth,
            "avg_distinguishability": float(np.mean(
                [row["distinguishability"] for row in report.per_model[:i]]
            )),
            "attributability": attributability(prefix_keys, generated[:i]),
            "avg_fsd": float(np.mean([row["fsd"] for row in report.per_model[:i]])),
        })
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(
        out_dir / "series.csv",
        ["n_models", "avg_orthogonality", "avg_distinguishability", "attributability", "avg_fsd"],
        [[s["n_models"], s["avg_orthogonality"], s["avg_distinguishability"],
          s["attributability"], s["avg_fsd"]] for s in series],
    )
    return series


def run_attribute(registry_path: Path, wav_path: Path) -> AttributionResult:
    store = load_registry(registry_path)
    clip = read_wav(wav_path)
    return attribute(store, clip)
