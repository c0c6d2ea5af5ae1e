"""Run configuration: defaults, YAML files and flag overrides.

Precedence is defaults < file < flags.  Unknown keys are errors and come
with a "did you mean" hint.
"""

import difflib
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .errors import ConfigError


@dataclass
class DataConfig:
    root: str = "data"
    classes: list = field(default_factory=lambda: ["Non Accident", "Accident"])
    enhance: bool = True
    saturation_gain: float = 1.3
    contrast_gain: float = 1.2
    brightness_offset: float = 0.05


@dataclass
class SynthConfig:
    n: int = 32
    size: int = 64


@dataclass
class TrainConfig:
    model: str = "cnn"
    input: int = 224
    epochs: int = 50
    batch_size: int = 32
    lr: float = None          # None: 3e-4 for vit, 1e-3 otherwise
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dropout: float = 0.5
    keep_best: bool = True


@dataclass
class VitSection:
    patch: int = 16
    projection_dim: int = 64
    heads: int = 4
    layers: int = 8
    mlp_hidden: int = 128


@dataclass
class GanSection:
    latent_dim: int = 100
    epochs: int = 50
    batch_size: int = 32
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    loss: str = "bce"
    report_interval: int = 1
    save_interval: int = 10
    per_class: int = 32


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: str = None
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    vit: VitSection = field(default_factory=VitSection)
    gan: GanSection = field(default_factory=GanSection)

    def resolved_lr(self):
        if self.train.lr is not None:
            return self.train.lr
        return 3e-4 if self.train.model == "vit" else 1e-3

    def to_dict(self):
        return asdict(self)


ALIASES = {
    "learningrate": "train.lr",
    "learning_rate": "train.lr",
    "alpha": "train.lr",
    "batch": "train.batch_size",
    "batchsize": "train.batch_size",
    "patch_size": "vit.patch",
    "num_heads": "vit.heads",
    "transformer_layers": "vit.layers",
    "latent": "gan.latent_dim",
    "z_dim": "gan.latent_dim",
}

CHOICES = {"train.model": ("cnn", "ftcnn", "vit"), "gan.loss": ("bce", "lsgan")}
POSITIVE = {"train.input", "train.batch_size", "synth.n", "synth.size", "vit.patch", "vit.projection_dim",
            "vit.heads", "vit.mlp_hidden", "gan.latent_dim", "gan.batch_size", "gan.report_interval",
            "gan.save_interval"}
NON_NEGATIVE = {"train.epochs", "vit.layers", "gan.epochs", "gan.per_class", "train.lr", "gan.lr"}


def _all_keys(obj=None, prefix=""):
    obj = obj if obj is not None else RunConfig()
    out = []
    for f in fields(obj):
        val = getattr(obj, f.name)
        if is_dataclass(val):
            out += _all_keys(val, f"{prefix}{f.name}.")
        else:
            out.append(f"{prefix}{f.name}")
    return out


def suggest(key):
    """Closest known key for a misspelt one, or ``None``."""
    leaf = key.rsplit(".", 1)[-1].lower()
    if leaf in ALIASES:
        return ALIASES[leaf]
    known = _all_keys()
    hit = difflib.get_close_matches(key, known, n=1, cutoff=0.6)
    if hit:
        return hit[0]
    by_leaf = {k.rsplit(".", 1)[-1]: k for k in known}
    hit = difflib.get_close_matches(leaf, list(by_leaf), n=1, cutoff=0.6)
    return by_leaf[hit[0]] if hit else None


def _unknown(key):
    hint = suggest(key)
    return ConfigError(f"unknown config key {key!r}" + (f" (did you mean {hint!r}?)" if hint else ""))


def _coerce(key, value, default, hint_type):
    kind = hint_type if hint_type is not None else type(default)
    if value is None:
        if default is None:
            return None
        raise ConfigError(f"{key}: null is not allowed")
    if kind is bool:
        if isinstance(value, bool):
            return value
    elif kind is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif kind is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif kind is str:
        if isinstance(value, str):
            return value
    elif kind is list:
        if isinstance(value, list) and all(isinstance(v, str) for v in value):
            return list(value)
    raise ConfigError(f"{key}: expected {kind.__name__}, got {value!r}")


def _set(cfg, key, value):
    parts = key.split(".")
    target = cfg
    for part in parts[:-1]:
        if not any(f.name == part for f in fields(target)) or not is_dataclass(getattr(target, part)):
            raise _unknown(key)
        target = getattr(target, part)
    leaf = parts[-1]
    match = [f for f in fields(target) if f.name == leaf]
    if not match or is_dataclass(getattr(target, leaf)):
        raise _unknown(key)
    f = match[0]
    hint = f.type if isinstance(f.type, type) else None
    setattr(target, leaf, _coerce(key, value, getattr(target, leaf), hint))


def _flatten(tree, prefix=""):
    if not isinstance(tree, dict):
        raise ConfigError(f"{prefix.rstrip('.') or 'config'}: expected a mapping")
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        section = is_dataclass(getattr(RunConfig(), str(k), None)) if not prefix else False
        if isinstance(v, dict) and section:
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_yaml(text, source="<config>"):
    try:
        tree = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" line {mark.line + 1}" if mark is not None else ""
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"{source}:{where}: {problem}") from None
    return {} if tree is None else tree


def validate(cfg):
    flat = {k: v for k, v in _flatten(cfg.to_dict()).items()}
    for key, allowed in CHOICES.items():
        if flat[key] not in allowed:
            raise ConfigError(f"{key}: {flat[key]!r} is not one of {', '.join(allowed)}")
    for key in POSITIVE:
        if flat[key] <= 0:
            raise ConfigError(f"{key}: must be positive, got {flat[key]}")
    for key in NON_NEGATIVE:
        if flat[key] is not None and flat[key] < 0:
            raise ConfigError(f"{key}: must be >= 0, got {flat[key]}")
    if len(cfg.data.classes) != 2:
        raise ConfigError("data.classes: exactly two class names are required")
    return cfg


def load_config(path=None, overrides=None):
    """Defaults, then the YAML file at ``path``, then dotted-key ``overrides``."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        for key, value in _flatten(parse_yaml(text, str(path))).items():
            _set(cfg, key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            _set(cfg, key, value)
    return validate(cfg)


def dump_config(cfg, path):
    """Write the resolved config as YAML; loading it back gives an equal config."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
    return path
