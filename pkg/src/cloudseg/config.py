"""Network and training configuration.

A flat dataclass tree mirroring the YAML config file layout. Everything is
validated eagerly so bad configs fail before any compute starts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import yaml

COMBINE_OPS = ("hadamard", "add", "subtract")
OPTIMIZER_KINDS = ("sgd", "adam")


class ConfigError(ValueError):
    """Raised for invalid configuration; the CLI maps it to exit code 2."""


@dataclass
class PGAConfig:
    enabled: bool = True
    eta: float = 1.0
    theta: float = 1.0 / 16.0
    k: int = 16

    def validate(self):
        if self.eta < 0 or self.theta < 0:
            raise ConfigError("pga: eta and theta must be non-negative")
        if self.k < 1:
            raise ConfigError("pga: k must be >= 1")


@dataclass
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 1e-2
    momentum: float = 0.9
    steps: int = 300
    decay_at: float = 0.7       # fraction of steps after which lr drops
    decay_factor: float = 0.1
    checkpoint_every: int = 100

    def validate(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigError(f"optimizer: unknown kind {self.kind!r}")
        if self.lr < 0:
            raise ConfigError("optimizer: lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("optimizer: momentum must be in [0, 1)")
        if self.steps < 0:
            raise ConfigError("optimizer: steps must be non-negative")
        if not 0.0 < self.decay_at <= 1.0:
            raise ConfigError("optimizer: decay_at must be in (0, 1]")
        if self.checkpoint_every < 0:
            raise ConfigError("optimizer: checkpoint_every must be >= 0 "
                              "(0 disables periodic checkpoints)")


@dataclass
class NetworkConfig:
    """Full model and training recipe.

    Layer widths follow base_width * 2^layer. Per-layer subsample cells start
    at cell_0 and double; each layer's neighborhood radius is
    radius_multiplier times its cell. kernel_a/kernel_b are (point count,
    radius fraction of the layer radius) for the two fused convolution units.
    """

    n_classes: int = 19
    n_features: int = 2
    n_layers: int = 5
    base_width: int = 64
    cell_0: float = 0.06
    radius_multiplier: float = 2.5
    neighbor_cap: int = 40
    kernel_a: tuple = (9, 0.75)
    kernel_b: tuple = (15, 1.0)
    kernel_sigma_ratio: float = 0.3
    combine_op: str = "hadamard"
    use_second_conv: bool = True
    use_attention: bool = True
    use_global_final: bool = True   # global attention in the last encoder
    constant_feature: bool = False  # prepend an all-ones feature channel
    pga: PGAConfig = field(default_factory=PGAConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sphere_radius: float = 4.0
    min_crop_points: int = 64
    votes: int = 1
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.pga, dict):
            self.pga = PGAConfig(**self.pga)
        if isinstance(self.optimizer, dict):
            self.optimizer = OptimizerConfig(**self.optimizer)
        self.kernel_a = tuple(self.kernel_a)
        self.kernel_b = tuple(self.kernel_b)
        self.validate()

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.n_features < 1:
            raise ConfigError("n_features must be >= 1")
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.base_width < 4 or self.base_width % 4 != 0:
            raise ConfigError("base_width must be a positive multiple of 4")
        if self.cell_0 <= 0:
            raise ConfigError("cell_0 must be positive")
        if self.radius_multiplier <= 0:
            raise ConfigError("radius_multiplier must be positive")
        if self.neighbor_cap < 1:
            raise ConfigError("neighbor_cap must be >= 1")
        for name, pair in (("kernel_a", self.kernel_a), ("kernel_b", self.kernel_b)):
            if len(pair) != 2 or int(pair[0]) < 1 or not 0 < float(pair[1]) <= 1:
                raise ConfigError(f"{name} must be (count >= 1, radius fraction in (0, 1])")
        if not 0 < self.kernel_sigma_ratio <= 1:
            raise ConfigError("kernel_sigma_ratio must be in (0, 1]")
        if self.combine_op not in COMBINE_OPS:
            raise ConfigError(f"combine_op must be one of {COMBINE_OPS}")
        if self.use_global_final and not self.use_attention:
            raise ConfigError("global attention in the final encoder requires "
                              "the attention branch to be enabled")
        if self.sphere_radius <= 0:
            raise ConfigError("sphere_radius must be positive")
        if self.min_crop_points < 1:
            raise ConfigError("min_crop_points must be >= 1")
        if self.votes < 1:
            raise ConfigError("votes must be >= 1")
        self.pga.validate()
        self.optimizer.validate()

    # derived per-layer schedule

    def layer_width(self, layer: int) -> int:
        return self.base_width * (2 ** layer)

    def layer_cell(self, layer: int) -> float:
        return self.cell_0 * (2 ** layer)

    def layer_radius(self, layer: int) -> float:
        return self.radius_multiplier * self.layer_cell(layer)

    def input_width(self) -> int:
        return self.n_features + (1 if self.constant_feature else 0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kernel_a"] = list(self.kernel_a)
        d["kernel_b"] = list(self.kernel_b)
        return d


def _coerce_leaf(key: str, default, value):
    """Match a new value against the type of the default it replaces.
    Ints widen to float; bool is not a number here."""
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        if ok:
            value = float(value)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, (list, tuple)):
        ok = isinstance(value, (list, tuple))
    else:
        ok = True
    if not ok:
        raise ConfigError(
            f"{key} expects {type(default).__name__}, got {value!r}")
    return value


def _set_dotted(tree: dict, key: str, value):
    parts = key.split(".")
    node = tree
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    node[parts[-1]] = _coerce_leaf(key, node[parts[-1]], value)


def config_from_dict(tree: dict) -> NetworkConfig:
    known = {f.name for f in NetworkConfig.__dataclass_fields__.values()}
    unknown = set(tree) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return NetworkConfig(**tree)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | None = None, overrides: list[str] | None = None) -> NetworkConfig:
    """Build a config from an optional YAML file plus dotted-key overrides
    like optimizer.lr=0.001. Override values parse as YAML scalars."""
    tree = NetworkConfig().to_dict()
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        for key, value in loaded.items():
            if isinstance(value, dict) and isinstance(tree.get(key), dict):
                for sub, sub_value in value.items():
                    _set_dotted(tree, f"{key}.{sub}", sub_value)
            else:
                _set_dotted(tree, key, value)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like key=value")
        key, _, raw = item.partition("=")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: bad value: {exc}") from exc
        _set_dotted(tree, key.strip(), value)
    return config_from_dict(tree)
