"""Batch command-line harness for the measure/fusion experiment suite.

Subcommands: measure, correlate, train, eval, sweep, probe, synth. Every
command reads a JSON config (with ``config_version: 1``), writes
machine-readable CSV/JSON outputs into --out, and embeds a config echo
plus content hashes of its inputs in a ``<command>_report.json`` for
provenance. Reruns with identical inputs and seeds are byte-identical.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from . import external_scores as ext
from . import fusion_model as fm
from . import probe as pb
from . import stats
from .measures import estoi, ncm, stoi
from .signal_core import read_wav

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


def _load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            cfg = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if cfg.get("config_version") != CONFIG_VERSION:
        raise ConfigError(
            f"config_version must be {CONFIG_VERSION}, got {cfg.get('config_version')!r}"
        )
    return cfg


def _check_keys(obj: dict, allowed, context: str) -> None:
    unknown = sorted(set(obj) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {context}: {unknown}")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _write_report(out_dir: Path, command: str, config: dict, inputs, extra: dict) -> None:
    doc = {
        "command": command,
        "config": config,
        "input_hashes": {str(p): _sha256(p) for p in inputs},
        **extra,
    }
    with open(out_dir / f"{command}_report.json", "w", encoding="utf-8") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")


def _load_records(manifest, score_paths, prefer_external=False):
    records = ds.load_manifest(manifest)
    warnings = []
    for p in score_paths or []:
        loaded = ext.load_external_scores(p)
        warnings.extend(f"{p}: {w}" for w in loaded.warnings)
        records = ext.apply_external_scores(records, loaded, prefer_external)
    return records, warnings


# --- synth -------------------------------------------------------------------

_SYNTH_KEYS = (
    "config_version",
    "n",
    "seed",
    "noise_std_q",
    "noise_std_i",
    "shared_latent_weight",
    "wavs",
)


def cmd_synth(cfg: dict, out_dir: Path, seed: int | None, jobs: int) -> int:
    _check_keys(cfg, _SYNTH_KEYS, "synth config")
    defaults = ds.SynthConfig()
    sc = ds.SynthConfig(
        n=cfg.get("n", defaults.n),
        seed=seed if seed is not None else cfg.get("seed", defaults.seed),
        noise_std_q=cfg.get("noise_std_q", defaults.noise_std_q),
        noise_std_i=cfg.get("noise_std_i", defaults.noise_std_i),
        shared_latent_weight=cfg.get(
            "shared_latent_weight", defaults.shared_latent_weight
        ),
    )
    wav_dir = out_dir / "wavs" if cfg.get("wavs", False) else None
    records, synth_stats = ds.synth_generate(sc, wav_dir=wav_dir)
    ds.write_manifest(records, out_dir / "manifest.csv")
    _write_report(
        out_dir,
        "synth",
        cfg,
        [],
        {
            "outputs": ["manifest.csv"],
            "n": sc.n,
            "seed": sc.seed,
            "clip_rates": {
                "measures": synth_stats.measure_clip_rate,
                "quality": synth_stats.quality_clip_rate,
                "intelligibility": synth_stats.intelligibility_clip_rate,
            },
        },
    )
    return 0


# --- measure -----------------------------------------------------------------


def _measure_one(args):
    utt_id, clean_path, deg_path = args
    try:
        clean = read_wav(clean_path)
        deg = read_wav(deg_path)
        return utt_id, {
            "ncm": ncm(clean, deg).value,
            "stoi": stoi(clean, deg).value,
            "estoi": estoi(clean, deg).value,
        }, None
    except Exception as e:  # per-row failures are recorded, not fatal
        return utt_id, None, f"{type(e).__name__}: {e}"


def cmd_measure(cfg: dict, out_dir: Path, seed: int | None, jobs: int) -> int:
    _check_keys(cfg, ("config_version", "manifest"), "measure config")
    manifest = cfg.get("manifest")
    if not manifest:
        raise ConfigError("measure config requires 'manifest'")
    records = ds.load_manifest(manifest)
    tasks = []
    failures = []
    for rec in records:
        if rec.clean_path and rec.degraded_path:
            tasks.append((rec.utt_id, rec.clean_path, rec.degraded_path))
        else:
            failures.append({"utt_id": rec.utt_id, "error": "missing audio paths"})
    if jobs > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_measure_one, tasks))
    else:
        results = [_measure_one(t) for t in tasks]
    scores = {}
    for utt_id, values, error in results:
        if error is not None:
            failures.append({"utt_id": utt_id, "error": error})
        else:
            scores[utt_id] = ext.MeasureVector(**values)
    ext.write_scores_csv(scores, out_dir / "measures.csv", columns=["ncm", "stoi", "estoi"])
    failures.sort(key=lambda d: d["utt_id"])
    _write_report(
        out_dir,
        "measure",
        cfg,
        [manifest],
        {"outputs": ["measures.csv"], "n_scored": len(scores), "failures": failures},
    )
    return 1 if failures else 0


# --- correlate -----------------------------------------------------------------

_CORR_NAMES = tuple(ext.MEASURE_NAMES) + ("subj_quality", "subj_intelligibility")


def cmd_correlate(cfg: dict, out_dir: Path, seed: int | None, jobs: int) -> int:
    _check_keys(
        cfg,
        ("config_version", "manifest", "external_scores", "scatter_pairs", "prefer_external"),
        "correlate config",
    )
    manifest = cfg.get("manifest")
    if not manifest:
        raise ConfigError("correlate config requires 'manifest'")
    pairs = cfg.get("scatter_pairs", [["wer", "stoi"], ["wer", "pesq"]])
    for pair in pairs:
        if len(pair) != 2 or any(p not in _CORR_NAMES for p in pair):
            raise ConfigError(f"invalid scatter pair {pair!r}")
    records, warnings = _load_records(
        manifest, cfg.get("external_scores"), cfg.get("prefer_external", False)
    )
    fs = ds.assemble_features(records)
    if fs.x.shape[0] < 2:
        raise ValueError("fewer than 2 complete rows; cannot correlate")
    columns = np.column_stack([fs.x, fs.quality, fs.intelligibility])
    matrix = stats.correlation_matrix(columns, _CORR_NAMES)
    with open(out_dir / "correlation_matrix.csv", "w", encoding="utf-8") as f:
        f.write("name," + ",".join(_CORR_NAMES) + "\n")
        for i, name in enumerate(_CORR_NAMES):
            f.write(name + "," + ",".join(repr(v) for v in matrix[i]) + "\n")
    outputs = ["correlation_matrix.csv"]
    col_of = {name: i for i, name in enumerate(_CORR_NAMES)}
    for x_name, y_name in pairs:
        fname = f"scatter_{x_name}_{y_name}.csv"
        with open(out_dir / fname, "w", encoding="utf-8") as f:
            f.write(f"utt_id,{x_name},{y_name}\n")
            for i, utt_id in enumerate(fs.utt_ids):
                f.write(
                    f"{utt_id},{columns[i, col_of[x_name]]!r},{columns[i, col_of[y_name]]!r}\n"
                )
        outputs.append(fname)
    iq = matrix[col_of["subj_quality"], col_of["subj_intelligibility"]]
    _write_report(
        out_dir,
        "correlate",
        cfg,
        [manifest] + list(cfg.get("external_scores") or []),
        {
            "outputs": outputs,
            "n_complete": int(fs.x.shape[0]),
            "n_excluded": fs.n_excluded,
            "warnings": warnings,
            "pcc_quality_intelligibility": float(iq),
        },
    )
    return 0


# --- train / eval --------------------------------------------------------------

_TRAIN_KEYS = (
    "config_version",
    "train_manifest",
    "test_manifest",
    "external_scores",
    "test_external_scores",
    "variant",
    "model",
    "train",
    "split",
    "impute",
)
_MODEL_KEYS = ("seed", "widths")
_TRAINSUB_KEYS = (
    "learning_rate",
    "batch_size",
    "max_epochs",
    "patience",
    "seed",
    "head_weights",
)
_SPLIT_KEYS = ("mode", "validation_fraction", "seed")


def _train_config(cfg: dict, seed: int | None) -> fm.TrainConfig:
    sub = cfg.get("train", {})
    _check_keys(sub, _TRAINSUB_KEYS, "train.train config")
    defaults = fm.TrainConfig()
    return fm.TrainConfig(
        learning_rate=sub.get("learning_rate", defaults.learning_rate),
        batch_size=sub.get("batch_size", defaults.batch_size),
        max_epochs=sub.get("max_epochs", defaults.max_epochs),
        patience=sub.get("patience", defaults.patience),
        seed=seed if seed is not None else sub.get("seed", defaults.seed),
        head_weights=tuple(sub.get("head_weights", defaults.head_weights)),
    )


def _split_spec(cfg: dict, seed: int | None) -> ds.SplitSpec:
    sub = cfg.get("split", {})
    _check_keys(sub, _SPLIT_KEYS, "train.split config")
    defaults = ds.SplitSpec()
    return ds.SplitSpec(
        mode=sub.get("mode", defaults.mode),
        validation_fraction=sub.get("validation_fraction", defaults.validation_fraction),
        seed=seed if seed is not None else sub.get("seed", defaults.seed),
    )


def _features_for(records, impute, train_means=None):
    return ds.assemble_features(records, impute=impute, train_means=train_means)


def _fit_variant(variant, train_records, val_records, cfg, seed):
    """Train one model variant; returns (model, history-or-None, info)."""
    impute = cfg.get("impute")
    train_fs = _features_for(train_records, impute)
    val_fs = _features_for(val_records, impute, train_fs.feature_means)
    model_cfg = cfg.get("model", {})
    _check_keys(model_cfg, _MODEL_KEYS, "train.model config")
    model_seed = seed if seed is not None else model_cfg.get("seed", 0)
    widths = model_cfg.get("widths")
    tconf = _train_config(cfg, seed)
    info = {
        "n_train": len(train_fs.utt_ids),
        "n_val": len(val_fs.utt_ids),
        "n_excluded": train_fs.n_excluded + val_fs.n_excluded,
        "n_imputed": train_fs.n_imputed + val_fs.n_imputed,
    }
    if variant == "linear":
        baseline = fm.train_linear(
            train_fs.x, np.column_stack([train_fs.quality, train_fs.intelligibility])
        )
        return baseline, None, info, tconf
    if variant == "augmented":
        if widths is not None:
            widths = tuple(widths) + (1,)
        model, history = fm.train_augmented(
            train_fs.x,
            train_fs.quality,
            train_fs.intelligibility,
            val_fs.x,
            val_fs.quality,
            val_fs.intelligibility,
            tconf,
            model_seed,
            widths=widths,
        )
        return model, history, info, tconf
    if variant == "standard":
        if widths is not None:
            widths = tuple(widths) + (2,)
        model = fm.init_model(model_seed, input_dim=12, widths=widths)
        model, history = fm.train(
            model,
            train_fs.x,
            np.column_stack([train_fs.quality, train_fs.intelligibility]),
            val_fs.x,
            np.column_stack([val_fs.quality, val_fs.intelligibility]),
            tconf,
        )
        return model, history, info, tconf
    raise ConfigError(f"unknown variant {variant!r}")


def _model_inputs(model, feature_set):
    """Assemble the raw input matrix a checkpointed model expects."""
    names = model.normalizer.names
    if names and names[-1] == "subj_quality":
        return np.column_stack([feature_set.x, feature_set.quality])
    return feature_set.x


def _evaluate(model, records, impute, train_means=None) -> dict:
    fs = _features_for(records, impute, train_means)
    if len(fs.utt_ids) < 2:
        raise ValueError("fewer than 2 complete evaluation rows")
    if isinstance(model, fm.LinearBaseline):
        preds = fm.predict_linear(model, fs.x)
        heads = model.heads
    else:
        preds = fm.predict(model, _model_inputs(model, fs))
        heads = model.heads
    targets = {"quality": fs.quality, "intelligibility": fs.intelligibility}
    report_heads = {}
    for i, head in enumerate(heads):
        t = targets[head]
        report_heads[head] = {
            "mse": stats.mse(preds[:, i], t),
            "pcc": stats.pearson(preds[:, i], t),
            "srcc": stats.spearman(preds[:, i], t),
        }
    return {
        "n": len(fs.utt_ids),
        "n_excluded": fs.n_excluded,
        "n_imputed": fs.n_imputed,
        "heads": report_heads,
    }


def cmd_train(cfg: dict, out_dir: Path, seed: int | None, jobs: int) -> int:
    _check_keys(cfg, _TRAIN_KEYS, "train config")
    manifest = cfg.get("train_manifest")
    if not manifest:
        raise ConfigError("train config requires 'train_manifest'")
    variant = cfg.get("variant", "standard")
    records, warnings = _load_records(manifest, cfg.get("external_scores"))
    split_spec = _split_spec(cfg, seed)
    train_records, val_records = ds.split(records, split_spec)
    model, history, info, tconf = _fit_variant(variant, train_records, val_records, cfg, seed)
    fm.save_checkpoint(model, out_dir / "checkpoint.json", train_config=tconf)
    outputs = ["checkpoint.json"]
    extra = {"outputs": outputs, "variant": variant, "warnings": warnings, **info}
    if history is not None:
        history.write_csv(out_dir / "history.csv")
        outputs.append("history.csv")
        extra["best_epoch"] = history.best_epoch
        extra["best_val_loss"] = history.val_loss[history.best_epoch]
    inputs = [manifest] + list(cfg.get("external_scores") or [])
    test_manifest = cfg.get("test_manifest")
    if test_manifest:
        test_records, test_warnings = _load_records(
            test_manifest, cfg.get("test_external_scores")
        )
        report = _evaluate(model, test_records, cfg.get("impute"))
        report["variant"] = variant
        with open(out_dir / "eval_report.json", "w", encoding="utf-8") as f:
            json.dump(report, f, sort_keys=True, indent=2)
            f.write("\n")
        outputs.append("eval_report.json")
        extra["warnings"] = warnings + test_warnings
        inputs += [test_manifest] + list(cfg.get("test_external_scores") or [])
    _write_report(out_dir, "train", cfg, inputs, extra)
    return 0


_EVAL_KEYS = ("config_version", "checkpoint", "manifest", "external_scores", "impute")


def cmd_eval(cfg: dict, out_dir: Path, seed: int | None, jobs: int) -> int:
    _check_keys(cfg, _EVAL_KEYS, "eval config")
    checkpoint = cfg.get("checkpoint")
    manifest = cfg.get("manifest")
    if not checkpoint or not manifest:
        raise ConfigError("eval config requires 'checkpoint' and 'manifest'")
    model = fm.load_checkpoint(checkpoint)
    records, warnings = _load_records(manifest, cfg.get("external_scores"))
    report = _evaluate(model, records, cfg.get("impute"))
    with open(out_dir / "eval_report.json", "w", encoding="utf-8") as f:
        json.dump(report, f, sort_keys=True, indent=2)
        f.write("\n")
    _write_report(
        out_dir,
        "eval",
        cfg,
        [checkpoint, manifest] + list(cfg.get("external_scores") or []),
        {"outputs": ["eval_report.json"], "warnings": warnings},
    )
    return 0


# --- sweep ---------------------------------------------------------------------

_SWEEP_KEYS = _TRAIN_KEYS + ("fractions", "sweep_seeds", "nested")
DEFAULT_FRACTIONS = (0.0166, 0.05, 0.25, 1.0)


def cmd_sweep(cfg: dict, out_dir: Path, seed: int | None, jobs: int) -> int:
    _check_keys(cfg, _SWEEP_KEYS, "sweep config")
    manifest = cfg.get("train_manifest")
    test_manifest = cfg.get("test_manifest")
    if not manifest or not test_manifest:
        raise ConfigError("sweep config requires 'train_manifest' and 'test_manifest'")
    fractions = sorted(cfg.get("fractions", DEFAULT_FRACTIONS))
    if fractions[-1] != 1.0:
        raise ConfigError("fractions must include 1.0 (the PC reference)")
    sweep_seeds = cfg.get("sweep_seeds", [1, 2, 3])
    nested = cfg.get("nested", False)
    variant = cfg.get("variant", "standard")
    records, _ = _load_records(manifest, cfg.get("external_scores"))
    test_records, _ = _load_records(test_manifest, cfg.get("test_external_scores"))
    heads = ("intelligibility",) if variant == "augmented" else fm.STANDARD_HEADS
    cells = []
    for fraction in fractions:
        for s in sweep_seeds:
            sub = ds.subsample(records, fraction, s, nested=nested)
            split_spec = _split_spec(cfg, None)
            split_spec = ds.SplitSpec(
                mode=split_spec.mode,
                validation_fraction=split_spec.validation_fraction,
                seed=s,
            )
            tr, va = ds.split(sub, split_spec)
            model, _h, _info, _t = _fit_variant(variant, tr, va, cfg, s)
            report = _evaluate(model, test_records, cfg.get("impute"))
            cells.append(
                {
                    "fraction": fraction,
                    "seed": s,
                    "n_train": len(tr),
                    "heads": report["heads"],
                }
            )
    # aggregate per fraction
    rows = []
    ref = {}
    for fraction in fractions:
        group = [c for c in cells if c["fraction"] == fraction]
        agg = {"fraction": fraction, "n_train": group[0]["n_train"], "seeds": list(sweep_seeds)}
        for head in heads:
            agg[f"{head}_pcc"] = float(np.mean([c["heads"][head]["pcc"] for c in group]))
            agg[f"{head}_srcc"] = float(np.mean([c["heads"][head]["srcc"] for c in group]))
        rows.append(agg)
        if fraction == 1.0:
            ref = {h: agg[f"{h}_pcc"] for h in heads}
    for row in rows:
        for head in heads:
            row[f"{head}_pc"] = 100.0 * (ref[head] - row[f"{head}_pcc"]) / ref[head]
    with open(out_dir / "sweep_report.csv", "w", encoding="utf-8") as f:
        head_cols = []
        for head in heads:
            head_cols += [f"{head}_pcc", f"{head}_srcc", f"{head}_pc"]
        f.write("fraction,n_train," + ",".join(head_cols) + ",seeds\n")
        for row in rows:
            cols = [repr(row["fraction"]), str(row["n_train"])]
            cols += [repr(row[c]) for c in head_cols]
            cols.append(";".join(str(s) for s in row["seeds"]))
            f.write(",".join(cols) + "\n")
    _write_report(
        out_dir,
        "sweep",
        cfg,
        [manifest, test_manifest]
        + list(cfg.get("external_scores") or [])
        + list(cfg.get("test_external_scores") or []),
        {"outputs": ["sweep_report.csv"], "cells": cells, "aggregate": rows},
    )
    return 0


# --- probe ---------------------------------------------------------------------

_PROBE_KEYS = (
    "config_version",
    "checkpoint",
    "manifest",
    "external_scores",
    "measures",
    "reps",
    "samples_per_rep",
    "bins",
    "ridge",
    "seed",
    "impute",
)


def cmd_probe(cfg: dict, out_dir: Path, seed: int | None, jobs: int) -> int:
    _check_keys(cfg, _PROBE_KEYS, "probe config")
    checkpoint = cfg.get("checkpoint")
    manifest = cfg.get("manifest")
    if not checkpoint or not manifest:
        raise ConfigError("probe config requires 'checkpoint' and 'manifest'")
    model = fm.load_checkpoint(checkpoint)
    if isinstance(model, fm.LinearBaseline):
        raise ConfigError("probe requires a fusion checkpoint, not a linear baseline")
    records, warnings = _load_records(manifest, cfg.get("external_scores"))
    fs = _features_for(records, cfg.get("impute"))
    xn = model.normalizer.apply(_model_inputs(model, fs))
    spec = pb.fit_gaussian(xn, ridge=cfg.get("ridge", 1e-6))
    names = list(model.normalizer.names)
    requested = cfg.get("measures", names)
    unknown = [m for m in requested if m not in names]
    if unknown:
        raise ConfigError(f"unknown probe measures {unknown}")
    probe_seed = seed if seed is not None else cfg.get("seed", 0)
    outputs = []
    for m in requested:
        curve = pb.probe_measure(
            model,
            spec,
            names.index(m),
            reps=cfg.get("reps", 1000),
            samples_per_rep=cfg.get("samples_per_rep", 10000),
            bins=cfg.get("bins", 200),
            seed=probe_seed,
        )
        fname = f"probe_{m}.csv"
        pb.write_probe_csv(curve, out_dir / fname)
        outputs.append(fname)
    _write_report(
        out_dir,
        "probe",
        cfg,
        [checkpoint, manifest] + list(cfg.get("external_scores") or []),
        {"outputs": outputs, "warnings": warnings, "seed": probe_seed},
    )
    return 0


# --- entry point -----------------------------------------------------------------

_COMMANDS = {
    "measure": cmd_measure,
    "correlate": cmd_correlate,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "probe": cmd_probe,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="qifusion",
        description="Objective speech measures and subjective quality/intelligibility fusion",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="JSON config file")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override config seeds")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers")
    args = parser.parse_args(argv)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        cfg = _load_config(args.config)
        return _COMMANDS[args.command](cfg, out_dir, args.seed, args.jobs)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
