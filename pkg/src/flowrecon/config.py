"""Experiment configuration: flat ``section.key = value`` text files.

One assignment per line; ``#`` starts a comment. Values are parsed as
booleans (true/false), ``none``, integers, floats or bare strings and
checked against the type of the field default. Unknown sections or keys
are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunSection:
    seed: int = 0
    resume: bool = False  # continue training from the last checkpoint state


@dataclass
class ProblemSection:
    kind: str = "cs"  # cs | ct | mri | toy2d


@dataclass
class OperatorSection:
    m: int = 0  # cs: measurement count, 0 means n // 4
    seed: int = 0  # cs matrix and mri mask seed
    angles: int = 30  # ct
    detectors: int = 0  # ct, 0 means ceil(diagonal) rounded up to odd
    step: float = 0.5  # ct ray sampling step in pixels
    center_fraction: float = 0.08  # mri
    acceleration: float = 4.0  # mri
    noise: str = "gaussian"  # gaussian | poisson | none
    noise_level: float = 0.1  # relative gaussian noise level
    per_component: bool = False  # per-entry relative noise instead of norm-relative
    photon_count: float = 4096.0  # poisson
    attenuation: float = 0.02  # poisson: line integrals are scaled by this before exp(-p)


@dataclass
class DataSection:
    generator: str = ""  # empty means the problem default
    count: int = 200
    test_count: int = 20
    extent: int = 16


@dataclass
class ModelSection:
    architecture: str = "multiscale"  # multiscale | iunet | cs
    scales: int = 3
    couplings: int = 2
    hidden: int = 32
    subnet_depth: int = 2
    subnet_kernel: int = 3
    coupling: str = "affine"
    clamp: float | None = 2.0
    downsample: str = "haar"
    permutation: str = "orthogonal"
    split_fraction: float = 0.5
    skip_fraction: float = 0.5
    dense_size: int = 0
    dense_couplings: int = 3
    dense_hidden: int = 64
    repeats: int = 2
    cond_channels: int = 16
    dense_cond_dim: int = 0
    base: str = "normal"
    dtype: str = "float32"


@dataclass
class ConditionerSection:
    trunk: str = "avgpool"  # avgpool | cnn | resnet | unet
    inversion: str = ""  # empty means the operator default
    hidden: int = 64
    tv_lambda: float = 0.02
    trainable: bool = True
    combine_weight: float = 0.0


@dataclass
class ReconstructSection:
    samples: int = 0  # 0 means 100 (cs, mri) or 1000 (ct)
    count: int = 0  # test measurements to reconstruct, 0 means all
    refine: float | None = None
    refine_iterations: int = 100
    refine_lr: float = 1e-4
    save_samples: bool = False
    batch_size: int = 256


@dataclass
class EvaluateSection:
    range_mode: str = "minmax"  # minmax | volume-max | a number
    reconstructions: str = ""
    references: str = ""


_TRAIN_KEYS = tuple(f.name for f in fields(TrainConfig) if f.name != "seed")
_OPTIONAL_FLOATS = {("model", "clamp"), ("reconstruct", "refine"), ("train", "time_budget")}

SECTIONS = {
    "run": RunSection,
    "problem": ProblemSection,
    "operator": OperatorSection,
    "data": DataSection,
    "model": ModelSection,
    "conditioner": ConditionerSection,
    "train": TrainConfig,
    "reconstruct": ReconstructSection,
    "evaluate": EvaluateSection,
}


@dataclass
class ExperimentConfig:
    run: RunSection = field(default_factory=RunSection)
    problem: ProblemSection = field(default_factory=ProblemSection)
    operator: OperatorSection = field(default_factory=OperatorSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    conditioner: ConditionerSection = field(default_factory=ConditionerSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    reconstruct: ReconstructSection = field(default_factory=ReconstructSection)
    evaluate: EvaluateSection = field(default_factory=EvaluateSection)

    def with_seed(self, seed):
        return replace(self, run=replace(self.run, seed=int(seed)))

    @property
    def train_config(self):
        return replace(self.train, seed=self.run.seed)

    def to_text(self):
        lines = []
        for sec in SECTIONS:
            obj = getattr(self, sec)
            for f in fields(obj):
                if sec == "train" and f.name == "seed":
                    continue
                lines.append(f"{sec}.{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def _format(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _scalar(text):
    low = text.lower()
    if low in ("true", "yes"):
        return True
    if low in ("false", "no"):
        return False
    if low == "none":
        return None
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _coerce(section, key, raw, default):
    value = _scalar(raw)
    where = f"{section}.{key}"
    if (section, key) in _OPTIONAL_FLOATS:
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number or none, got {raw!r}")
        return float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false, got {raw!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {raw!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {raw!r}")
        return float(value)
    return raw


def parse_config(text):
    """Parse dotted-key text into an :class:`ExperimentConfig`."""
    values = {sec: {} for sec in SECTIONS}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        section, dot, name = key.partition(".")
        if not dot or section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        cls = SECTIONS[section]
        allowed = _TRAIN_KEYS if section == "train" else tuple(f.name for f in fields(cls))
        if name not in allowed:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if name in values[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        default = getattr(cls(), name)
        values[section][name] = _coerce(section, name, raw, default)
    try:
        sections = {sec: SECTIONS[sec](**vals) for sec, vals in values.items()}
    except ValueError as err:
        raise ConfigError(str(err)) from None
    return ExperimentConfig(**sections)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())
