"""Run configuration: validated settings, named presets, architecture lookup.

Config files are sectioned key=value text (configparser syntax). Keys are
hyphenated in files and underscored on the dataclass. A preset named in
[run] fills defaults; explicit keys override it. The regularizer strengths
gamma and beta have no silent defaults: they must come from a preset or
from the file itself.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import asdict, dataclass, field
from importlib import resources

from .errors import ConfigError

MODES = ("djpq", "djpq-restrict", "two-stage", "float-baseline")

# named hyperparameter bundles; strengths, rate scales and initial
# bit-widths for the reference networks, plus the desk-scale benchmark
PRESETS = {
    "vgg7": dict(arch="vgg7", gamma=1e-6, beta=1e-9, lr=1e-3,
                 lr_scale_prune=10.0, lr_scale_quant=0.05,
                 b_init_w=6, b_init_a=6),
    "resnet18": dict(arch="resnet18", gamma=1e-5, beta=1e-10, lr=1e-3,
                     lr_scale_prune=5.0, lr_scale_quant=0.05,
                     b_init_w=6, b_init_a=8),
    "mobilenetv2": dict(arch="mobilenetv2", gamma=1e-8, beta=1e-11, lr=1e-4,
                        lr_scale_prune=1.0, lr_scale_quant=0.005,
                        b_init_w=8, b_init_a=8),
    "vgg-mini": dict(arch="vgg_mini", gamma=5e-4, beta=5e-10, lr=5e-2,
                     lr_scale_prune=1.0, lr_scale_quant=0.05,
                     b_init_w=6, b_init_a=6, pretrain_epochs=4, epochs=6,
                     batch_size=64),
}

# two-stage protocol defaults: prune-only stage then quantize-only stage
STAGE1_DEFAULTS = dict(gamma=5e-6, lr=1e-3, lr_scale_prune=5.0, epochs=20)
STAGE2_DEFAULTS = dict(beta=1e-11, lr=5e-4, lr_scale_quant=0.05, epochs=20,
                       freeze_bits=False)

_RUN_KEYS = ("preset", "mode", "arch", "seed")
_TRAIN_KEYS = ("gamma", "beta", "lr", "lr-scale-prune", "lr-scale-quant",
               "momentum", "epochs", "pretrain-epochs", "batch-size",
               "b-init-w", "b-init-a", "alpha-th", "tau", "anneal",
               "literal-sign", "flip")
_STAGE1_KEYS = ("gamma", "lr", "lr-scale-prune", "epochs")
_STAGE2_KEYS = ("beta", "lr", "lr-scale-quant", "epochs", "freeze-bits",
                "b-init-w", "b-init-a")
_SECTIONS = {"run": _RUN_KEYS, "train": _TRAIN_KEYS,
             "stage1": _STAGE1_KEYS, "stage2": _STAGE2_KEYS}

_BOOLS = {"0": False, "1": True, "false": False, "true": True,
          "no": False, "yes": True}


@dataclass(frozen=True)
class StageConfig:
    """Settings for one stage of the two-stage baseline."""

    gamma: float = 0.0
    beta: float = 0.0
    lr: float = 1e-3
    lr_scale_prune: float = 1.0
    lr_scale_quant: float = 1.0
    epochs: int = 20
    freeze_bits: bool = False


@dataclass(frozen=True)
class TrainConfig:
    """All knobs of a single run."""

    arch: str
    mode: str = "djpq"
    gamma: float = 0.0
    beta: float = 0.0
    lr: float = 1e-3
    lr_scale_prune: float = 1.0
    lr_scale_quant: float = 1.0
    momentum: float = 0.0
    epochs: int = 1
    # float epochs before compression starts; compression is meant to begin
    # from a trained model, never a fresh one
    pretrain_epochs: int = 0
    batch_size: int = 64
    b_init_w: int = 6
    b_init_a: int = 6
    alpha_th: float = 1e-3
    tau: float = 1e-2
    anneal: float = 1.0
    seed: int = 0
    literal_sign: bool = False
    flip: bool = False
    stage1: StageConfig = field(default_factory=StageConfig)
    stage2: StageConfig = field(default_factory=StageConfig)

    def validate(self) -> "TrainConfig":
        def fail(name, why):
            raise ConfigError(f"config field {name}: {why}")

        if self.mode not in MODES:
            fail("mode", f"must be one of {', '.join(MODES)}, "
                 f"got {self.mode!r}")
        if not self.arch:
            fail("arch", "no architecture named")
        if not self.gamma >= 0:
            fail("gamma", f"must be >= 0, got {self.gamma}")
        if not self.beta >= 0:
            fail("beta", f"must be >= 0, got {self.beta}")
        for name in ("lr", "lr_scale_prune", "lr_scale_quant", "anneal",
                     "alpha_th", "tau"):
            v = getattr(self, name)
            if not v > 0:
                fail(name, f"must be > 0, got {v}")
        if not 0 <= self.momentum < 1:
            fail("momentum", f"must lie in [0, 1), got {self.momentum}")
        for name in ("epochs", "batch_size"):
            v = getattr(self, name)
            if not (isinstance(v, int) and v >= 1):
                fail(name, f"must be an integer >= 1, got {v!r}")
        if not (isinstance(self.pretrain_epochs, int)
                and self.pretrain_epochs >= 0):
            fail("pretrain_epochs",
                 f"must be an integer >= 0, got {self.pretrain_epochs!r}")
        for name in ("b_init_w", "b_init_a"):
            v = getattr(self, name)
            if not (isinstance(v, int) and 2 <= v <= 32):
                fail(name, f"must be an integer in [2, 32], got {v!r}")
        if not (isinstance(self.seed, int) and self.seed >= 0):
            fail("seed", f"must be a non-negative integer, got {self.seed!r}")
        for sn, st in (("stage1", self.stage1), ("stage2", self.stage2)):
            if not st.gamma >= 0:
                fail(f"{sn}.gamma", f"must be >= 0, got {st.gamma}")
            if not st.beta >= 0:
                fail(f"{sn}.beta", f"must be >= 0, got {st.beta}")
            for k in ("lr", "lr_scale_prune", "lr_scale_quant"):
                if not getattr(st, k) > 0:
                    fail(f"{sn}.{k}", f"must be > 0, got {getattr(st, k)}")
            if not (isinstance(st.epochs, int) and st.epochs >= 1):
                fail(f"{sn}.epochs",
                     f"must be an integer >= 1, got {st.epochs!r}")
        return self


def _coerce(section, key, raw, kind):
    where = f"[{section}] {key}"
    if kind is float:
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{where} must be a number, "
                              f"got {raw!r}") from None
    if kind is int:
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{where} must be an integer, "
                              f"got {raw!r}") from None
    if kind is bool:
        if raw.lower() not in _BOOLS:
            raise ConfigError(f"{where} must be a boolean (0/1/true/false), "
                              f"got {raw!r}")
        return _BOOLS[raw.lower()]
    return raw


_TRAIN_TYPES = {"gamma": float, "beta": float, "lr": float,
                "lr-scale-prune": float, "lr-scale-quant": float,
                "momentum": float, "epochs": int, "pretrain-epochs": int,
                "batch-size": int, "b-init-w": int, "b-init-a": int,
                "alpha-th": float, "tau": float, "anneal": float,
                "literal-sign": bool, "flip": bool}
_STAGE_TYPES = {"gamma": float, "beta": float, "lr": float,
                "lr-scale-prune": float, "lr-scale-quant": float,
                "epochs": int, "freeze-bits": bool, "b-init-w": int,
                "b-init-a": int}


def parse_config(text) -> TrainConfig:
    """Parse config text into a validated TrainConfig."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None

    for section in cp.sections():
        if section not in _SECTIONS:
            raise ConfigError(
                f"unknown section [{section}]; valid sections: "
                f"{', '.join(sorted(_SECTIONS))}")
        for key in cp[section]:
            if key not in _SECTIONS[section]:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}]; valid keys: "
                    f"{', '.join(_SECTIONS[section])}")

    run = dict(cp["run"]) if cp.has_section("run") else {}
    train = dict(cp["train"]) if cp.has_section("train") else {}

    values = {}
    preset = run.get("preset")
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; available: "
                              f"{', '.join(sorted(PRESETS))}")
        values.update(PRESETS[preset])
    elif "gamma" not in train or "beta" not in train:
        raise ConfigError(
            "no preset named and gamma/beta not set; the regularizer "
            "strengths have no silent defaults")

    if "mode" in run:
        values["mode"] = run["mode"]
    if "arch" in run:
        values["arch"] = run["arch"]
    if "seed" in run:
        values["seed"] = _coerce("run", "seed", run["seed"], int)
    for key, raw in train.items():
        values[key.replace("-", "_")] = _coerce(
            "train", key, raw, _TRAIN_TYPES[key])

    def stage(section, defaults):
        vals = dict(defaults)
        if cp.has_section(section):
            for key, raw in cp[section].items():
                vals[key.replace("-", "_")] = _coerce(
                    section, key, raw, _STAGE_TYPES[key])
        vals.pop("b_init_w", None)
        vals.pop("b_init_a", None)
        return StageConfig(**vals)

    values["stage1"] = stage("stage1", STAGE1_DEFAULTS)
    values["stage2"] = stage("stage2", STAGE2_DEFAULTS)

    # stage-2 bit-width overrides land on the main config so the pruned
    # graph is rebuilt with them
    if cp.has_section("stage2"):
        for key in ("b-init-w", "b-init-a"):
            if key in cp["stage2"]:
                values[key.replace("-", "_")] = _coerce(
                    "stage2", key, cp["stage2"][key], int)

    if "arch" not in values:
        raise ConfigError("config names no architecture (arch=...) "
                          "and no preset supplies one")
    return TrainConfig(**values).validate()


def config_to_dict(cfg) -> dict:
    """Plain-dict snapshot, stable under json round-trips."""
    return asdict(cfg)


def config_from_dict(d) -> TrainConfig:
    values = dict(d)
    try:
        values["stage1"] = StageConfig(**values["stage1"])
        values["stage2"] = StageConfig(**values["stage2"])
        return TrainConfig(**values).validate()
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed config snapshot: {exc}") from None


def load_config(path) -> TrainConfig:
    """Read and validate a config file."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


_BUNDLED_ARCHS = ("vgg7", "resnet18", "vgg_mini")


def load_arch_text(arch) -> str:
    """Architecture text by bundled name or filesystem path."""
    if os.path.exists(arch):
        with open(arch, "r", encoding="utf-8") as fh:
            return fh.read()
    name = arch.replace("-", "_")
    if name in _BUNDLED_ARCHS:
        return (resources.files("djpq") / "presets"
                / f"{name}.arch").read_text()
    raise ConfigError(
        f"architecture {arch!r} is neither a file nor a bundled "
        f"architecture ({', '.join(_BUNDLED_ARCHS)})")
