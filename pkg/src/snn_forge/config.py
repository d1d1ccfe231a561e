"""Experiment configuration: a JSON document with dotted-path overrides."""

import copy
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass

from .errors import ConfigError
from .lif import RESET_MODES
from .surrogate import MODES, SHAPES, normalize_mode, normalize_shape

RUN_MODES = ("train", "eval", "drift", "theory", "stress")
NETS = ("small", "mlp")


@dataclass
class SgSection:
    shape: str = "rectangular"
    scale_mode: str = "TrSG"
    gamma: float = 1.0


@dataclass
class MpInitSection:
    enabled: bool = True
    beta: float = 0.9


@dataclass
class OptimSection:
    epochs: int = 5
    lr: float = 0.05
    weight_decay: float = 5e-4
    momentum: float = 0.9
    batch_size: int = 64


@dataclass
class SparsitySection:
    weight: float = 0.0
    target: float = 0.0


@dataclass
class DataSection:
    kind: str = "synthetic"  # synthetic | idx
    num_classes: int = 10
    n: int = 10000
    dims: list = field(default_factory=lambda: [1, 8, 8])
    separation: float = 4.0
    noise: float = 1.0
    data_seed: int = 0
    subsample: int = 0  # 0 keeps the whole training split
    test_fraction: float = 0.2
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass
class TheorySection:
    taus: list = field(default_factory=lambda: [2.0])
    vthrs: list = field(default_factory=lambda: [1.0])
    input_dist: list = field(default_factory=lambda: ["gaussian", 1.0, 1.0])
    T: int = 10
    n_samples: int = 100_000
    u0: object = 0.0


@dataclass
class StressSection:
    modes: list = field(default_factory=lambda: ["AS", "RS", "TrSG"])
    vthrs: list = field(default_factory=lambda: [0.1, 0.5, 1.0, 1.5, 2.0])
    resets: list = field(default_factory=lambda: ["soft", "hard"])


@dataclass
class ExperimentConfig:
    mode: str = "train"
    net: str = "small"
    hidden: list = field(default_factory=lambda: [128])  # mlp only
    sg: SgSection = field(default_factory=SgSection)
    reset: str = "soft"
    init_vthr: float = 1.0
    init_tau: float = 2.0
    train_vthr: bool = False
    train_tau: bool = False
    mpinit: MpInitSection = field(default_factory=MpInitSection)
    timesteps: int = 4
    dropout: float = 0.0
    precision: str = "float32"
    optim: OptimSection = field(default_factory=OptimSection)
    sparsity: SparsitySection = field(default_factory=SparsitySection)
    data: DataSection = field(default_factory=DataSection)
    theory: TheorySection = field(default_factory=TheorySection)
    stress: StressSection = field(default_factory=StressSection)
    checkpoint: str = ""  # input checkpoint for eval / drift
    seed: int = 0

    def to_dict(self):
        return asdict(self)


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown field")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _build(type(default), value, sub) if is_dataclass(default) else value
    return cls(**kwargs)


def from_dict(data):
    cfg = _build(ExperimentConfig, data, "")
    validate(cfg)
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            data = json.load(fh)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON ({err})") from None
    return data


def parse_value(text):
    """JSON literal if it parses, else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(data, dotted, value):
    """Set ``data[a][b]... = value`` for ``dotted = "a.b..."``; returns a new dict."""
    data = copy.deepcopy(data)
    keys = dotted.split(".")
    if not all(keys):
        raise ConfigError(f"{dotted}: malformed key")
    node = data
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not an object")
    node[keys[-1]] = value
    return data


def _check(cond, name, msg):
    if not cond:
        raise ConfigError(f"{name}: {msg}")


def _number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def validate(cfg):
    """Field-level checks mirroring the preconditions of each module."""
    _check(cfg.mode in RUN_MODES, "mode", f"must be one of {RUN_MODES}")
    _check(cfg.net in NETS, "net", f"must be one of {NETS}")
    try:
        cfg.sg.shape = normalize_shape(cfg.sg.shape)
    except ValueError:
        raise ConfigError(f"sg.shape: must be one of {SHAPES}") from None
    try:
        cfg.sg.scale_mode = normalize_mode(cfg.sg.scale_mode)
    except ValueError:
        raise ConfigError(f"sg.scale_mode: must be one of {MODES}") from None
    _check(_number(cfg.sg.gamma) and cfg.sg.gamma > 0, "sg.gamma", "must be a positive number")
    _check(cfg.reset in RESET_MODES, "reset", f"must be one of {RESET_MODES}")
    _check(_number(cfg.init_vthr) and cfg.init_vthr > 0, "init_vthr", "must be positive")
    _check(_number(cfg.init_tau) and cfg.init_tau > 1, "init_tau", "must exceed 1")
    for name in ("train_vthr", "train_tau"):
        _check(isinstance(getattr(cfg, name), bool), name, "must be true or false")
    _check(isinstance(cfg.mpinit.enabled, bool), "mpinit.enabled", "must be true or false")
    _check(_number(cfg.mpinit.beta) and 0 <= cfg.mpinit.beta <= 1, "mpinit.beta", "must lie in [0, 1]")
    _check(isinstance(cfg.timesteps, int) and cfg.timesteps >= 1, "timesteps", "must be an integer >= 1")
    _check(_number(cfg.dropout) and 0 <= cfg.dropout < 1, "dropout", "must lie in [0, 1)")
    _check(cfg.precision in ("float32", "float64"), "precision", "must be float32 or float64")
    o = cfg.optim
    _check(isinstance(o.epochs, int) and o.epochs >= 0, "optim.epochs", "must be an integer >= 0")
    _check(_number(o.lr) and o.lr > 0, "optim.lr", "must be positive")
    _check(_number(o.weight_decay) and o.weight_decay >= 0, "optim.weight_decay", "must be >= 0")
    _check(_number(o.momentum) and 0 <= o.momentum < 1, "optim.momentum", "must lie in [0, 1)")
    _check(isinstance(o.batch_size, int) and o.batch_size >= 1, "optim.batch_size", "must be an integer >= 1")
    _check(_number(cfg.sparsity.weight) and cfg.sparsity.weight >= 0, "sparsity.weight", "must be >= 0")
    _check(_number(cfg.sparsity.target) and 0 <= cfg.sparsity.target <= 1, "sparsity.target", "must lie in [0, 1]")
    d = cfg.data
    _check(d.kind in ("synthetic", "idx"), "data.kind", "must be synthetic or idx")
    if d.kind == "synthetic":
        _check(isinstance(d.num_classes, int) and d.num_classes >= 2, "data.num_classes", "must be >= 2")
        _check(isinstance(d.n, int) and d.n >= d.num_classes, "data.n", "must be >= num_classes")
        _check(isinstance(d.dims, list) and len(d.dims) == 3, "data.dims", "must be [C, H, W]")
    else:
        _check(bool(d.train_images and d.train_labels), "data.train_images", "idx data needs image and label paths")
    _check(isinstance(d.subsample, int) and d.subsample >= 0, "data.subsample", "must be an integer >= 0")
    _check(_number(d.test_fraction) and 0 < d.test_fraction < 1, "data.test_fraction", "must lie in (0, 1)")
    th = cfg.theory
    _check(th.taus and all(_number(t) and t > 1 for t in th.taus), "theory.taus", "needs values > 1")
    _check(th.vthrs and all(_number(v) and v > 0 for v in th.vthrs), "theory.vthrs", "needs positive values")
    _check(isinstance(th.T, int) and th.T >= 4, "theory.T", "must be an integer >= 4")
    _check(isinstance(th.n_samples, int) and th.n_samples >= 1000, "theory.n_samples", "must be >= 1000")
    _check(_number(th.u0) or th.u0 == "stationary-mean", "theory.u0", "must be a number or 'stationary-mean'")
    _check(isinstance(th.input_dist, list) and len(th.input_dist) == 3
           and th.input_dist[0] in ("gaussian", "uniform"), "theory.input_dist",
           "must be [gaussian, mean, std] or [uniform, a, b]")
    s = cfg.stress
    try:
        s.modes = [normalize_mode(m) for m in s.modes]
    except ValueError:
        raise ConfigError(f"stress.modes: entries must be in {MODES}") from None
    _check(s.vthrs and all(_number(v) and v > 0 for v in s.vthrs), "stress.vthrs", "needs positive values")
    _check(s.resets and all(r in RESET_MODES for r in s.resets), "stress.resets", f"entries must be in {RESET_MODES}")
    if cfg.mode == "eval":
        _check(bool(cfg.checkpoint), "checkpoint", "eval mode needs a checkpoint path")
    _check(isinstance(cfg.seed, int), "seed", "must be an integer")
    return cfg
