"""Experiment configuration: INI file plus command-line overrides.

Every key has a default, so an empty file is a valid configuration for the
2x12 impulse-noise experiment. Validation happens up front, before any
computation starts.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .denoise import NoiseModel, ProtocolConfig
from .network import build_spec, cnn_spec
from .operators import ACTIVATION, OperatorSet, parse_library
from .optim import OPTIMIZERS
from .spm import SpmConfig, hidden_spec
from .train import TrainConfig

MAX_EPOCHS = 1000


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


DEFAULTS = {
    "data": {"dataset": "", "images": "1000", "noise": "impulse", "p": "0.4", "m": "1"},
    "network": {"hidden": "12,12", "kernel": "3", "cnn_activation": "tanh"},
    "operators": {"library": "*-*-*"},
    "spm": {
        "gamma": "80", "runs": "4", "top_k": "3", "iterations": "160", "confinement": "2",
        "window_average": "false", "probe_images": "30", "batch_size": "1",
        "optimizer": "vadam", "lr": "0.001",
    },
    "train": {
        "folds": "10", "run_folds": "all", "restarts": "3", "epochs": "100", "batch_size": "10",
        "models": "onn,cnn", "onn_optimizer": "vadam", "cnn_optimizer": "adam", "lr": "0.001",
        "beta1": "0.9", "beta2": "0.999", "eps": "1e-8",
    },
    "run": {"seed": "0", "workers": "1", "out": "runs/experiment"},
}


@dataclass
class ExperimentConfig:
    dataset: Optional[Path]
    images: int
    noise: NoiseModel
    hidden: tuple
    kernel: tuple
    cnn_activation: str
    library: list
    spm: SpmConfig
    probe_images: int
    n_folds: int
    run_folds: Optional[tuple]
    restarts: int
    models: tuple
    train: dict  # model -> TrainConfig
    seed: int
    workers: int
    out: Path
    raw: dict = field(default_factory=dict)  # flattened section.key -> value

    def onn_template(self):
        return hidden_spec(self.hidden, kernel=self.kernel)

    def cnn(self):
        return cnn_spec(self.hidden, self.cnn_activation, kernel=self.kernel)

    def protocol(self) -> ProtocolConfig:
        return ProtocolConfig(self.n_folds, self.run_folds, self.restarts, self.seed, self.train, self.workers)

    def spec_from_assignment(self, assignment):
        if len(assignment) != len(self.hidden) or any(len(a) != n for a, n in zip(assignment, self.hidden)):
            raise ConfigError(
                f"assignment layer sizes {[len(a) for a in assignment]} do not match hidden = {list(self.hidden)}"
            )
        return build_spec(assignment, kernel=self.kernel)


def _ints(text: str, name: str) -> tuple:
    try:
        vals = tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{name} must be comma-separated integers, got {text!r}") from None
    if not vals:
        raise ConfigError(f"{name} is empty")
    return vals


def _parser(path: Optional[Path]) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_dict(DEFAULTS)
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        try:
            cp.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
    return cp


def apply_overrides(cp: configparser.ConfigParser, overrides) -> None:
    """``section.key=value`` strings; the section must already exist."""
    for item in overrides or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        if section not in DEFAULTS or name.lower() not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {key.strip()!r}")
        cp[section][name] = value.strip()


def load_config(path=None, overrides=(), seed: Optional[int] = None, workers: Optional[int] = None,
                out=None, check_dataset: bool = True) -> ExperimentConfig:
    cp = _parser(path)
    for section in cp.sections():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        for key in cp[section]:
            if key not in DEFAULTS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
    apply_overrides(cp, overrides)
    if seed is not None:
        cp["run"]["seed"] = str(seed)
    if workers is not None:
        cp["run"]["workers"] = str(workers)
    if out is not None:
        cp["run"]["out"] = str(out)
    try:
        return _build(cp, check_dataset)
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc).strip("'\"")) from None


def _build(cp: configparser.ConfigParser, check_dataset: bool) -> ExperimentConfig:
    d, net, spm, tr, run = cp["data"], cp["network"], cp["spm"], cp["train"], cp["run"]
    dataset = Path(d["dataset"]) if d["dataset"] else None
    if check_dataset and dataset is not None and not dataset.is_dir():
        raise ConfigError(f"dataset directory {dataset} does not exist")
    seed = run.getint("seed")
    noise = NoiseModel(d["noise"], d.getfloat("p"), d.getint("m"), seed)
    images = d.getint("images")
    kernel = _ints(net["kernel"], "network.kernel")
    kernel = kernel * 2 if len(kernel) == 1 else kernel
    if len(kernel) != 2 or any(k < 1 or k % 2 == 0 for k in kernel):
        raise ConfigError(f"network.kernel must be odd sizes, got {net['kernel']!r}")
    hidden = _ints(net["hidden"], "network.hidden")
    if any(h < 1 for h in hidden):
        raise ConfigError("network.hidden widths must be positive")
    if net["cnn_activation"] not in ACTIVATION:
        raise ConfigError(f"unknown activation {net['cnn_activation']!r}")
    library = parse_library(cp["operators"]["library"])

    def train_config(section, optimizer, epochs_key="epochs", batch_key="batch_size"):
        if optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {optimizer!r}")
        epochs = section.getint(epochs_key) if epochs_key in section else 1
        if not 1 <= epochs <= MAX_EPOCHS:
            raise ConfigError(f"epochs must be in 1..{MAX_EPOCHS}, got {epochs}")
        batch = section.getint(batch_key)
        if batch < 1:
            raise ConfigError("batch_size must be >= 1")
        return TrainConfig(epochs, batch, optimizer, section.getfloat("lr"),
                           tr.getfloat("beta1"), tr.getfloat("beta2"), tr.getfloat("eps"))

    spm_cfg = SpmConfig(
        gamma=spm.getint("gamma"), runs=spm.getint("runs"), top_k=spm.getint("top_k"),
        iterations=spm.getint("iterations"), confinement=spm.getint("confinement"),
        window_average=spm.getboolean("window_average"),
        train=train_config(spm, spm["optimizer"]),
    )
    if spm_cfg.top_k > len(library):
        raise ConfigError(f"spm.top_k={spm_cfg.top_k} exceeds the library size {len(library)}")
    probe = spm.getint("probe_images")
    models = tuple(m.strip() for m in tr["models"].split(",") if m.strip())
    if not models or any(m not in ("onn", "cnn") for m in models):
        raise ConfigError(f"train.models must list onn and/or cnn, got {tr['models']!r}")
    n_folds = tr.getint("folds")
    if n_folds < 2 or images < n_folds:
        raise ConfigError(f"cannot split {images} images into {n_folds} folds")
    if not 1 <= probe <= images:
        raise ConfigError(f"spm.probe_images must be in 1..{images}")
    run_folds = None if tr["run_folds"].strip() == "all" else _ints(tr["run_folds"], "train.run_folds")
    if run_folds is not None and any(not 0 <= k < n_folds for k in run_folds):
        raise ConfigError(f"train.run_folds must lie in 0..{n_folds - 1}")
    restarts = tr.getint("restarts")
    if restarts < 1:
        raise ConfigError("train.restarts must be >= 1")
    workers = run.getint("workers")
    if workers < 1:
        raise ConfigError("run.workers must be >= 1")
    train = {m: train_config(tr, tr[f"{m}_optimizer"]) for m in ("onn", "cnn")}
    raw = {f"{s}.{k}": v for s in cp.sections() for k, v in cp[s].items()}
    return ExperimentConfig(
        dataset, images, noise, hidden, kernel, net["cnn_activation"], library, spm_cfg, probe,
        n_folds, run_folds, restarts, models, train, seed, workers, Path(run["out"]), raw,
    )


def parse_assignment(doc: dict) -> list:
    try:
        return [[OperatorSet.parse(s) for s in layer] for layer in doc["hidden"]]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed assignment file: {exc}") from None
