"""Command-line driver: corpus, prepare, spm, train, gradcheck, report."""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import denoise, spm
from .config import ConfigError, ExperimentConfig, load_config, parse_assignment
from .denoise import DataError, write_schema
from .network import save_checkpoint
from .operators import parse_library
from .train import Divergence

log = logging.getLogger("onn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
WORKERS_ENV = "ONN_WORKERS"


class NumericalFailure(RuntimeError):
    """A computation finished but produced unusable numbers."""


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, doc):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


# -- data ---------------------------------------------------------------------

def _data_dir(cfg: ExperimentConfig) -> Path:
    return cfg.out / "data"


def prepared_arrays(cfg: ExperimentConfig):
    """(clean, noisy) from ``out/data`` if prepared with this config, else built."""
    d = _data_dir(cfg)
    manifest = d / "manifest.json"
    if manifest.is_file():
        doc = json.loads(manifest.read_text())
        if doc.get("noise") == _noise_doc(cfg) and doc.get("images") == cfg.images:
            return np.load(d / "clean.npy"), np.load(d / "noisy.npy")
        log.info("prepared data in %s does not match the config; rebuilding in memory", d)
    return _build_arrays(cfg)


def _build_arrays(cfg: ExperimentConfig):
    if cfg.dataset is None:
        raise ConfigError("data.dataset is not set")
    clean = denoise.load_dataset(cfg.dataset, cfg.images)
    return clean, cfg.noise.apply(clean)


def _noise_doc(cfg: ExperimentConfig) -> dict:
    n = cfg.noise
    doc = {"kind": n.kind, "seed": n.seed}
    doc.update({"p": n.p} if n.kind == "impulse" else {"M": n.M})
    return doc


def cmd_prepare(cfg: ExperimentConfig, args) -> int:
    clean, noisy = _build_arrays(cfg)
    d = _data_dir(cfg)
    d.mkdir(parents=True, exist_ok=True)
    np.save(d / "clean.npy", clean)
    np.save(d / "noisy.npy", noisy)
    stored = np.clip(noisy, 0.0, 1.0)
    doc = {
        "images": cfg.images,
        "dataset": str(cfg.dataset),
        "noise": _noise_doc(cfg),
        "per_image_seed": "default_rng([noise.seed, image_index])",
        "changed_fraction": float(np.mean(noisy != clean)),
        "noisy_psnr_mean": denoise.mean_psnr(stored, clean),
        "files": {"clean.npy": _sha256(d / "clean.npy"), "noisy.npy": _sha256(d / "noisy.npy")},
    }
    if cfg.noise.kind == "speckle":
        doc["clipped_fraction"] = float(np.mean(noisy > 1.0))
    if args.export_png:
        from PIL import Image

        png = d / "png"
        png.mkdir(exist_ok=True)
        for i in range(min(args.export_png, len(clean))):
            pair = np.concatenate([clean[i], stored[i]], axis=1)
            Image.fromarray(np.round(pair * 255).astype(np.uint8)).save(png / f"pair_{i:04d}.png")
    _write_json(d / "manifest.json", doc)
    print(f"wrote {cfg.images} clean/noisy pairs to {d} ({cfg.noise.label}, "
          f"changed fraction {doc['changed_fraction']:.4f})")
    return EXIT_OK


# -- spm ----------------------------------------------------------------------

def probe_indices(cfg: ExperimentConfig) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, 0x5EA2C4])
    return np.sort(rng.choice(cfg.images, cfg.probe_images, replace=False))


def cmd_spm(cfg: ExperimentConfig, args) -> int:
    clean, noisy = prepared_arrays(cfg)
    idx = probe_indices(cfg)
    out = cfg.out / "spm"
    out.mkdir(parents=True, exist_ok=True)

    def persist(r, ledger):
        # partial ledgers survive a later failure
        spm.write_ledger_csv(ledger, out / "ledger.csv")
        log.info("spm run %d/%d done", r + 1, cfg.spm.runs)

    template = cfg.onn_template()
    ledger = spm.run_spm(template, cfg.library, cfg.spm, (noisy[idx], clean[idx]), cfg.seed, progress=persist)
    assignment = spm.configure_elite(template, ledger, cfg.spm.top_k)
    report = spm.ledger_report(ledger)
    (out / "ledger.txt").write_text(report)
    _write_json(out / "elite.json", {
        "hidden": [[str(s) for s in layer] for layer in assignment],
        "top_k": cfg.spm.top_k,
        "seed": cfg.seed,
        "probe_images": idx.tolist(),
    })
    write_schema(out / "schema.txt", {"ledger.csv": {
        "layer": "hidden layer, 1-based",
        "rank": "1 = highest accumulated health",
        "nodal": "nodal operator id", "pool": "pool operator id", "activation": "activation id",
        "health": "sum over runs of the set's per-run mean health factor",
        "probability": "health normalised over the layer (guided draw probability)",
        "samples": "number of runs in which the set was assigned",
    }})
    print(report, end="")
    for l, layer in enumerate(assignment, 1):
        counts = {str(s): layer.count(s) for s in dict.fromkeys(layer)}
        print(f"elite layer {l}: " + ", ".join(f"{k} x{v}" for k, v in counts.items()))
    return EXIT_OK


# -- train --------------------------------------------------------------------

def cmd_train(cfg: ExperimentConfig, args) -> int:
    models = {}
    for m in cfg.models:
        if m == "cnn":
            models["cnn"] = cfg.cnn()
            continue
        path = Path(args.assignment) if args.assignment else cfg.out / "spm" / "elite.json"
        if not path.is_file():
            raise ConfigError(f"ONN training needs an assignment file; {path} not found (run 'spm' first)")
        models["onn"] = cfg.spec_from_assignment(parse_assignment(json.loads(path.read_text())))
    clean, noisy = prepared_arrays(cfg)
    result = denoise.run_protocol(clean, models, cfg.noise, cfg.protocol(), noisy=noisy)
    out = cfg.out / "train"
    reference = "cnn" if "cnn" in models else None
    paths = denoise.write_report(result, out, reference)
    ckpt = out / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    for r in result.runs:
        if r.selected:
            save_checkpoint(ckpt / f"fold{r.fold}_{r.model}.json", models[r.model], r.state,
                            {"fold": r.fold, "restart": r.restart, "train_psnr": r.train_psnr})
    _write_json(out / "manifest.json", {
        "config": cfg.raw,
        "models": list(models),
        "folds": sorted(result.folds),
        "expected_folds": list(cfg.run_folds) if cfg.run_folds is not None else list(range(cfg.n_folds)),
        "restart_seed": "SeedSequence([run.seed, fold, restart])",
        "failed_folds": result.failed_folds(),
    })
    print((paths["summary.csv"]).read_text(), end="")
    if result.failed_folds():
        raise NumericalFailure(f"every restart diverged in folds {result.failed_folds()}")
    return EXIT_OK


# -- gradcheck ----------------------------------------------------------------

def cmd_gradcheck(cfg: ExperimentConfig, args) -> int:
    from .gradcheck import gradcheck_library

    library = args.library or cfg.library
    results = gradcheck_library(library, args.configs, cfg.seed, args.tolerance)
    for r in results:
        print(r)
    failed = [str(r.operator_set) for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} operator sets passed")
    if failed:
        print("failed: " + ", ".join(failed))
        return EXIT_NUMERIC
    return EXIT_OK


# -- report -------------------------------------------------------------------

REPORT_SCHEMA = {"report.csv": {
    "model": "model name or external baseline",
    "folds": "number of completed folds aggregated",
    "train_mean": "mean selected-restart train PSNR (dB)",
    "train_std": "population std of train PSNR over folds",
    "test_mean": "mean selected-restart test PSNR (dB)",
    "test_std": "population std of test PSNR over folds",
    "improvement_pct": "percentage gain of the ONN test mean over this row's test mean",
}}


def aggregate(run_dir: Path, baseline=None) -> tuple:
    """Aggregate runs.csv into per-model rows; returns (rows, notes)."""
    runs_csv = run_dir / "runs.csv"
    if not runs_csv.is_file():
        raise DataError(f"{runs_csv} not found")
    with open(runs_csv, newline="") as fh:
        rows = [r for r in csv.DictReader(fh) if r["selected"] == "1"]
    notes = []
    expected = None
    manifest = run_dir / "manifest.json"
    if manifest.is_file():
        expected = set(json.loads(manifest.read_text()).get("expected_folds", []))
    per_model = {}
    for r in rows:
        per_model.setdefault(r["model"], {})[int(r["fold"])] = (float(r["train_psnr"]), float(r["test_psnr"]))
    for m, folds in sorted(per_model.items()):
        if expected is not None and set(folds) != expected:
            notes.append(f"{m}: incomplete, missing folds {sorted(expected - set(folds))}")
    table = []
    for m, folds in per_model.items():
        arr = np.array([folds[k] for k in sorted(folds)])
        table.append([m, len(folds), arr[:, 0].mean(), arr[:, 0].std(), arr[:, 1].mean(), arr[:, 1].std()])
    for name, test in (baseline or {}).items():
        table.append([name, 0, math.nan, math.nan, test, math.nan])
    onn = next((row[4] for row in table if row[0] == "onn"), None)
    for row in table:
        row.append(denoise.improvement(onn, row[4]) if onn is not None else math.nan)
    order = {"onn": 0, "cnn": 1}
    table.sort(key=lambda row: (order.get(row[0], 2), row[0]))
    return table, notes


def read_baseline(path) -> dict:
    """CSV with columns model,test_psnr (externally produced results)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"model", "test_psnr"} <= set(reader.fieldnames):
            raise DataError(f"{path} needs columns model,test_psnr")
        return {r["model"]: float(r["test_psnr"]) for r in reader}


def cmd_report(cfg: ExperimentConfig, args) -> int:
    run_dir = Path(args.run_dir) if args.run_dir else cfg.out / "train"
    table, notes = aggregate(run_dir, read_baseline(args.baseline) if args.baseline else None)
    with open(run_dir / "report.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_SCHEMA["report.csv"])
        for row in table:
            w.writerow([row[0], row[1], *(repr(float(v)) for v in row[2:])])
    write_schema(run_dir / "report_schema.txt", REPORT_SCHEMA)
    print(f"{'model':<12}{'folds':>6}{'train dB':>18}{'test dB':>18}{'ONN gain':>10}")
    for m, n, trm, trs, tem, tes, imp in table:
        train = f"{trm:.3f} ± {trs:.3f}" if n else "-"
        test = f"{tem:.3f} ± {tes:.3f}" if n else f"{tem:.3f}"
        gain = "-" if m == "onn" or math.isnan(imp) else f"{imp:+.2f}%"
        print(f"{m:<12}{n:>6}{train:>18}{test:>18}{gain:>10}")
    for note in notes:
        print(f"warning: {note}")
    return EXIT_OK


# -- corpus -------------------------------------------------------------------

def cmd_corpus(cfg: ExperimentConfig, args) -> int:
    from .corpus import build_corpus

    dest = Path(args.dest)
    paths = build_corpus(dest, args.count, cfg.seed)
    print(f"wrote {len(paths)} images to {dest}")
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def _env_workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI experiment config")
    common.add_argument("--seed", type=int, help="base seed (overrides run.seed)")
    common.add_argument("--workers", type=int, help=f"parallel worker processes (default ${WORKERS_ENV} or 1)")
    common.add_argument("--out", type=Path, help="output directory (overrides run.out)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="onn", description="Operational neural networks for image denoising.")
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("corpus", parents=[common], help="write a synthetic image corpus")
    s.add_argument("dest", help="directory to create")
    s.add_argument("--count", type=int, default=1000)
    s = sub.add_parser("prepare", parents=[common], help="load, corrupt and store the dataset")
    s.add_argument("--export-png", type=int, default=0, metavar="N", help="also save N clean|noisy PNG pairs")
    sub.add_parser("spm", parents=[common], help="operator search and elite configuration")
    s = sub.add_parser("train", parents=[common], help="cross-validated ONN/CNN training")
    s.add_argument("--assignment", help="elite assignment JSON (default OUT/spm/elite.json)")
    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--library", help="operator sets, e.g. 'sin-*-tanh,mul-sum-*'")
    s.add_argument("--configs", type=int, default=20, help="random networks per operator set")
    s.add_argument("--tolerance", type=float, default=1e-5)
    s = sub.add_parser("report", parents=[common], help="aggregate a training run")
    s.add_argument("run_dir", nargs="?", help="directory holding runs.csv (default OUT/train)")
    s.add_argument("--baseline", help="CSV of external results: model,test_psnr")
    return p


COMMANDS = {
    "corpus": cmd_corpus, "prepare": cmd_prepare, "spm": cmd_spm, "train": cmd_train,
    "gradcheck": cmd_gradcheck, "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        workers = args.workers if args.workers is not None else _env_workers()
        cfg = load_config(args.config, args.set, args.seed, workers, args.out,
                          check_dataset=args.command in ("prepare", "spm", "train"))
        if getattr(args, "library", None) is not None:
            try:
                args.library = parse_library(args.library)
            except (ValueError, KeyError) as exc:
                raise ConfigError(str(exc).strip("'\"")) from None
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (Divergence, NumericalFailure, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
