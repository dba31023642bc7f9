"""Noise models, dataset ingestion and the cross-validated denoising protocol."""

from __future__ import annotations

import csv
import logging
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .metrics import mean_psnr, psnr  # noqa: F401  (re-exported)
from .network import NetworkSpec, NetworkState, init_state
from .train import Divergence, TrainConfig, fit, predict

log = logging.getLogger(__name__)

IMAGE_SHAPE = (60, 60)
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".gif", ".pgm", ".ppm"}
LUMA = np.array([0.299, 0.587, 0.114])


class DataError(ValueError):
    """Dataset missing, unreadable or too small."""


# -- noise --------------------------------------------------------------------

def corrupt_impulse(img, p: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each pixel with probability ``p`` by 0.0 or 1.0 (even odds)."""
    img = np.asarray(img, dtype=np.float64)
    hit = rng.random(img.shape) < p
    salt = rng.random(img.shape) < 0.5
    return np.where(hit, salt.astype(np.float64), img)


def speckle_multiplier(shape, M: float, rng: np.random.Generator) -> np.ndarray:
    """Unit-mean Gamma(shape=M, scale=1/M) samples; variance 1/M."""
    return rng.gamma(M, 1.0 / M, size=shape)


def corrupt_speckle(img, M: float, rng: np.random.Generator, clip: bool = True) -> np.ndarray:
    """Multiplicative Gamma noise. ``clip=False`` keeps the raw product."""
    img = np.asarray(img, dtype=np.float64)
    out = img * speckle_multiplier(img.shape, M, rng)
    return np.clip(out, 0.0, 1.0) if clip else out


@dataclass(frozen=True)
class NoiseModel:
    kind: str  # "impulse" or "speckle"
    p: float = 0.4
    M: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("impulse", "speckle"):
            raise ValueError(f"noise kind must be 'impulse' or 'speckle', got {self.kind!r}")
        if self.kind == "impulse" and not 0.0 < self.p < 1.0:
            raise ValueError(f"impulse probability must lie in (0, 1), got {self.p}")
        if self.kind == "speckle" and (int(self.M) != self.M or self.M < 1):
            raise ValueError(f"speckle shape M must be an integer >= 1, got {self.M}")

    @property
    def label(self) -> str:
        return f"impulse(p={self.p})" if self.kind == "impulse" else f"speckle(M={self.M})"

    def corrupt(self, img, index: int, clip: bool = False) -> np.ndarray:
        """Noisy copy of image ``index``; the stream depends only on (seed, index)."""
        rng = np.random.default_rng([self.seed, index])
        if self.kind == "impulse":
            return corrupt_impulse(img, self.p, rng)
        return corrupt_speckle(img, self.M, rng, clip=clip)

    def apply(self, images, clip: bool = False) -> np.ndarray:
        """Corrupt a stack (n, H, W). Speckle stays unclamped unless ``clip``."""
        return np.stack([self.corrupt(img, i, clip) for i, img in enumerate(images)])


# -- data ---------------------------------------------------------------------

def _read_gray(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        im.load()
        if im.mode in ("1", "P", "LA", "PA", "CMYK", "YCbCr", "HSV", "LAB"):
            im = im.convert("RGBA" if "A" in im.mode or im.mode == "P" else "RGB")
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        scale = 255.0
    elif arr.dtype == np.uint16 or (arr.dtype.kind in "iu" and arr.max(initial=0) > 255):
        scale = 65535.0
    else:
        scale = 255.0
    arr = arr.astype(np.float64)
    if arr.ndim == 3:
        arr = arr[..., :3] @ LUMA
    return arr / scale


def load_dataset(directory, count: Optional[int] = None, shape=IMAGE_SHAPE) -> np.ndarray:
    """Grayscale [0, 1] images of ``shape`` from a directory, in file-name order.

    Colour is reduced with ITU-R 601 luma weights, then bilinearly resized.
    Unreadable files are skipped with a warning.
    """
    from skimage.transform import resize

    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"dataset directory {directory} does not exist")
    files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    out = []
    for path in files:
        if count is not None and len(out) == count:
            break
        try:
            img = _read_gray(path)
        except (OSError, ValueError) as exc:
            warnings.warn(f"skipping unreadable image {path.name}: {exc}")
            continue
        if img.shape != tuple(shape):
            img = resize(img, shape, order=1, mode="edge", anti_aliasing=False)
        out.append(np.clip(img, 0.0, 1.0))
    if count is not None and len(out) < count:
        raise DataError(f"{directory} holds {len(out)} readable images, {count} required")
    if not out:
        raise DataError(f"no readable images in {directory}")
    return np.stack(out)


# -- cross-validation plan ----------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    folds: tuple  # tuple of sorted index tuples
    restarts: int = 3

    @classmethod
    def make(cls, n_images: int = 1000, n_folds: int = 10, restarts: int = 3, seed: int = 0) -> "FoldPlan":
        if n_folds < 2 or n_images < n_folds:
            raise ValueError(f"cannot split {n_images} images into {n_folds} folds")
        if restarts < 1:
            raise ValueError("restarts must be >= 1")
        perm = np.random.default_rng([seed, n_images, n_folds]).permutation(n_images)
        folds = tuple(tuple(sorted(int(i) for i in chunk)) for chunk in np.array_split(perm, n_folds))
        return cls(folds, restarts)

    @property
    def n_images(self) -> int:
        return sum(len(f) for f in self.folds)

    def train(self, k: int) -> np.ndarray:
        """The fold itself is the (small) training set."""
        return np.array(self.folds[k])

    def test(self, k: int) -> np.ndarray:
        return np.array(sorted(i for j, f in enumerate(self.folds) if j != k for i in f))


def restart_seed(base_seed: int, fold: int, restart: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([base_seed, fold, restart])


# -- protocol -----------------------------------------------------------------

@dataclass
class ProtocolConfig:
    n_folds: int = 10
    folds: Optional[Sequence[int]] = None  # subset of folds to run; None = all
    restarts: int = 3
    base_seed: int = 0
    train: dict = field(default_factory=dict)  # model name -> TrainConfig
    workers: int = 1

    def train_config(self, model: str) -> TrainConfig:
        return self.train.get(model, TrainConfig())


@dataclass
class RestartResult:
    fold: int
    model: str
    restart: int
    status: str  # "ok" or "diverged"
    train_psnr: float = math.nan  # trained model re-evaluated on its training set
    test_psnr: float = math.nan
    curve: list = field(default_factory=list)  # running train PSNR per epoch
    loss: list = field(default_factory=list)
    selected: bool = False
    state: Optional[NetworkState] = None


@dataclass
class ProtocolResult:
    runs: list
    noisy_test_psnr: dict  # fold -> PSNR of the noisy test inputs
    models: tuple

    def selected(self, fold: int, model: str) -> Optional[RestartResult]:
        return next((r for r in self.runs if r.fold == fold and r.model == model and r.selected), None)

    @property
    def folds(self) -> list:
        return sorted({r.fold for r in self.runs})

    def failed_folds(self) -> list:
        return [k for k in self.folds if any(self.selected(k, m) is None for m in self.models)]


def _restart_job(args) -> RestartResult:
    fold, model, restart, spec, cfg, seed, x_tr, y_tr, x_te, y_te = args
    rng = np.random.default_rng(seed)
    state = init_state(spec, rng)
    res = RestartResult(fold, model, restart, "ok")
    try:
        hist = fit(spec, state, x_tr, y_tr, cfg, rng)
    except Divergence as exc:
        log.warning("fold %d %s restart %d diverged: %s", fold, model, restart, exc)
        res.status = "diverged"
        return res
    res.curve, res.loss = hist.train_psnr, hist.loss
    res.train_psnr = mean_psnr(predict(spec, state, x_tr), y_tr)
    res.test_psnr = mean_psnr(predict(spec, state, x_te), y_te)
    res.state = state
    log.info("fold %d %s restart %d: train %.3f dB, test %.3f dB",
             fold, model, restart, res.train_psnr, res.test_psnr)
    return res


def run_protocol(clean, models: dict, noise: NoiseModel, config: ProtocolConfig,
                 noisy: Optional[np.ndarray] = None) -> ProtocolResult:
    """Cross-validated train/test of each named model spec on one noise task.

    ``noisy`` (the network inputs) defaults to ``noise.apply(clean)``; it is
    corrupted once and shared by every fold. Each model gets the same restart
    seeds, so identical specs give identical results.
    """
    clean = np.asarray(clean, dtype=np.float64)
    if noisy is None:
        noisy = noise.apply(clean)
    if noisy.shape != clean.shape:
        raise DataError(f"noisy stack {noisy.shape} does not match clean {clean.shape}")
    plan = FoldPlan.make(len(clean), config.n_folds, config.restarts, config.base_seed)
    folds = range(config.n_folds) if config.folds is None else config.folds
    for k in folds:
        if not 0 <= k < config.n_folds:
            raise ValueError(f"fold {k} outside 0..{config.n_folds - 1}")
    shown = np.clip(noisy, 0.0, 1.0)
    jobs, noisy_psnr = [], {}
    for k in folds:
        tr, te = plan.train(k), plan.test(k)
        noisy_psnr[k] = mean_psnr(shown[te], clean[te])
        for name, spec in models.items():
            for r in range(config.restarts):
                jobs.append((k, name, r, spec, config.train_config(name),
                             restart_seed(config.base_seed, k, r),
                             noisy[tr], clean[tr], noisy[te], clean[te]))
    if config.workers > 1:
        with ProcessPoolExecutor(config.workers) as pool:
            runs = list(pool.map(_restart_job, jobs))
    else:
        runs = [_restart_job(j) for j in jobs]
    for k in folds:
        for name in models:
            ok = [r for r in runs if r.fold == k and r.model == name and r.status == "ok"]
            if ok:
                # first restart wins ties
                max(ok, key=lambda r: (r.train_psnr, -r.restart)).selected = True
            else:
                log.error("fold %d: every %s restart diverged", k, name)
    return ProtocolResult(runs, noisy_psnr, tuple(models))


def epochs_to_reach(curve: Sequence[float], target: float) -> Optional[int]:
    """First 1-based epoch whose value is >= ``target``; None if never."""
    return next((e for e, v in enumerate(curve, 1) if v >= target), None)


def improvement(onn: float, cnn: float) -> float:
    """Percentage gain of ``onn`` over ``cnn``."""
    return 100.0 * (onn - cnn) / abs(cnn)


# -- reports ------------------------------------------------------------------

SCHEMA = {
    "runs.csv": {
        "fold": "fold index (0-based); the fold is the training set",
        "model": "model name",
        "restart": "restart index (0-based)",
        "status": "ok or diverged",
        "train_psnr": "mean per-image PSNR (dB) of the trained model on its training images",
        "test_psnr": "mean per-image PSNR (dB) on the held-out images",
        "selected": "1 for the restart with the highest train_psnr in (fold, model)",
    },
    "curves.csv": {
        "fold": "fold index",
        "model": "model name",
        "restart": "restart index",
        "epoch": "1-based epoch",
        "loss": "mean minibatch MSE in the internal [-1, 1] range",
        "train_psnr": "mean PSNR (dB) of the minibatch outputs seen during the epoch",
    },
    "summary.csv": {
        "fold": "fold index, or 'mean' / 'std' over completed folds",
        "model": "model name, or 'noisy' for the corrupted inputs",
        "train_psnr": "train PSNR (dB) of the selected restart",
        "test_psnr": "test PSNR (dB) of the selected restart",
        "improvement_pct": "test PSNR gain over the reference model, percent",
    },
}


def _f(x: float) -> str:
    return repr(float(x))


def write_report(result: ProtocolResult, out_dir, reference: Optional[str] = None) -> dict:
    """Write runs.csv, curves.csv, summary.csv and schema.txt; return paths.

    ``reference`` names the model improvements are measured against
    (default: the last model).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reference = reference or result.models[-1]
    paths = {name: out / name for name in ("runs.csv", "curves.csv", "summary.csv", "schema.txt")}
    runs = sorted(result.runs, key=lambda r: (r.fold, result.models.index(r.model), r.restart))
    with open(paths["runs.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCHEMA["runs.csv"])
        for r in runs:
            w.writerow([r.fold, r.model, r.restart, r.status, _f(r.train_psnr), _f(r.test_psnr), int(r.selected)])
    with open(paths["curves.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCHEMA["curves.csv"])
        for r in runs:
            for e, (loss, p) in enumerate(zip(r.loss, r.curve), 1):
                w.writerow([r.fold, r.model, r.restart, e, _f(loss), _f(p)])
    with open(paths["summary.csv"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCHEMA["summary.csv"])
        for row in summary_rows(result, reference):
            w.writerow([row[0], row[1]] + [v if isinstance(v, str) else _f(v) for v in row[2:]])
    write_schema(paths["schema.txt"], SCHEMA)
    return paths


def summary_rows(result: ProtocolResult, reference: str) -> list:
    rows, per_model = [], {m: [] for m in result.models}
    for k in result.folds:
        rows.append([k, "noisy", "", result.noisy_test_psnr[k], ""])
        ref = result.selected(k, reference)
        for m in result.models:
            sel = result.selected(k, m)
            if sel is None:
                rows.append([k, m, "failed", "failed", ""])
                continue
            imp = improvement(sel.test_psnr, ref.test_psnr) if ref is not None else math.nan
            rows.append([k, m, sel.train_psnr, sel.test_psnr, imp])
            per_model[m].append((sel.train_psnr, sel.test_psnr, imp))
    for m, vals in per_model.items():
        if not vals:
            continue
        arr = np.array(vals)
        rows.append(["mean", m, *arr.mean(axis=0)])
        rows.append(["std", m, *arr.std(axis=0)])
    return rows


def write_schema(path, schema: dict):
    lines = []
    for fname, cols in schema.items():
        lines.append(f"[{fname}]")
        lines.extend(f"{c}: {d}" for c, d in cols.items())
        lines.append("")
    Path(path).write_text("\n".join(lines))


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("ONN_WORKERS", "1")))
    except ValueError:
        return 1
