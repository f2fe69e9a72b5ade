"""Experiment configuration: a small sectioned key-value format.

Files look like:

    # comment
    [train]
    objective = local
    learning_rate = 5e-4

Every key is declared in the schema below with a type and default; unknown
sections or keys, duplicates, and type errors are rejected with the file and
line number. `canonical_text` re-serializes a config into one fixed form
(schema order, normalized value spelling), which is what gets hashed into
checkpoints and written next to experiment outputs.
"""

import hashlib
from dataclasses import dataclass

from .encoders import ImageEncoderConfig, TextEncoderConfig
from .errors import ConfigError
from .world import GaussianPairConfig, WorldConfig


@dataclass(frozen=True)
class Field:
    name: str
    kind: str  # int | float | bool | str | int_list | float_list | int_or_auto
    default: object
    choices: tuple = None


SCHEMA = {
    "world": (
        Field("n_regions", "int", 4),
        Field("hidden_states", "int", 3),
        Field("image_noise_states", "int", 2),
        Field("text_noise_states", "int", 2),
        Field("signal_strength", "float", 0.5),
        Field("patch_symbols", "int", 6),
        Field("vocab_size", "int", 16),
        Field("sentence_length", "int", 3),
        Field("covered_regions", "int", 4),
        Field("tile_pixels", "int", 16),
        Field("render_noise", "float", 0.25),
    ),
    "data": (
        Field("n_train", "int", 20000),
        Field("n_test", "int", 2000),
        Field("n_labeled", "int", 2000),
    ),
    "encoder": (
        Field("image_size", "int", 32),
        Field("grid_channels", "int_list", (8, 16, 32)),
        Field("global_channels", "int", 64),
        Field("global_dim", "int", 64),
        Field("embed_dim", "int", 32),
        Field("text_hidden", "int", 64),
        Field("text_dim", "int", 32),
        Field("critic_hidden", "int_list", (64, 32)),
        Field("activation", "str", "relu", choices=("relu", "tanh")),
    ),
    "train": (
        Field("objective", "str", "local", choices=("local", "global")),
        Field("bound", "str", "mine_dv", choices=("mine_dv", "cpc")),
        Field("batch_size", "int", 64),
        Field("epochs_pretrain", "int", 5),
        Field("epochs_probe", "int", 50),
        Field("learning_rate", "float", 5e-4),
        Field("seed", "int", 0),
        Field("ema_correction", "bool", False),
        Field("ema_decay", "float", 0.99),
        Field("k_negatives", "int_or_auto", "auto"),
    ),
    "gaussian": (
        Field("dim", "int", 1),
        Field("rho", "float_list", (0.9,)),
        Field("n_samples", "int", 20000),
        Field("steps", "int", 1500),
        Field("batch_size", "int", 256),
        Field("k_negatives", "int", 16),
        Field("critic_hidden", "int_list", (64, 32)),
        Field("learning_rate", "float", 5e-4),
    ),
    "output": (
        Field("dir", "str", "out"),
        Field("seeds", "int_list", (0, 1, 2, 3, 4)),
    ),
}

_FIELDS = {(s, f.name): f for s, fields in SCHEMA.items() for f in fields}


def _convert(field: Field, raw: str, path: str, line: int):
    def bad(why):
        return ConfigError(f"key {field.name!r}: {why}", path=path, line=line)

    raw = raw.strip()
    if raw == "":
        raise bad("empty value")
    try:
        if field.kind == "int":
            return int(raw)
        if field.kind == "float":
            val = float(raw)
            if val != val or val in (float("inf"), float("-inf")):
                raise ValueError
            return val
        if field.kind == "bool":
            if raw not in ("true", "false"):
                raise bad("expected true or false")
            return raw == "true"
        if field.kind == "str":
            if field.choices and raw not in field.choices:
                raise bad(f"expected one of {', '.join(field.choices)}")
            return raw
        if field.kind == "int_list":
            return tuple(int(p.strip()) for p in raw.split(","))
        if field.kind == "float_list":
            return tuple(float(p.strip()) for p in raw.split(","))
        if field.kind == "int_or_auto":
            return "auto" if raw == "auto" else int(raw)
    except ConfigError:
        raise
    except ValueError:
        raise bad(f"cannot parse {raw!r} as {field.kind}") from None
    raise AssertionError(f"unhandled field kind {field.kind}")


def _render(field: Field, value) -> str:
    if field.kind == "bool":
        return "true" if value else "false"
    if field.kind in ("int_list", "float_list"):
        return ", ".join(repr(v) if field.kind == "float_list" else str(v)
                         for v in value)
    if field.kind == "float":
        return repr(float(value))
    return str(value)


class Config:
    """Fully populated, validated configuration values."""

    def __init__(self, values: dict):
        self.values = {s: dict(v) for s, v in values.items()}
        for section, fields in SCHEMA.items():
            sec = self.values.setdefault(section, {})
            for f in fields:
                sec.setdefault(f.name, f.default)

    def get(self, section: str, key: str):
        try:
            return self.values[section][key]
        except KeyError:
            raise ConfigError(f"no such config key [{section}] {key}") from None

    def with_updates(self, updates) -> "Config":
        """updates: {(section, key): value}; returns a new Config."""
        values = {s: dict(v) for s, v in self.values.items()}
        for (section, key), value in updates.items():
            if (section, key) not in _FIELDS:
                raise ConfigError(f"no such config key [{section}] {key}")
            values[section][key] = value
        return Config(values)

    def canonical_text(self) -> str:
        chunks = []
        for section, fields in SCHEMA.items():
            chunks.append(f"[{section}]")
            for f in fields:
                chunks.append(f"{f.name} = {_render(f, self.values[section][f.name])}")
            chunks.append("")
        return "\n".join(chunks)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()[:16]

    def __eq__(self, other):
        return isinstance(other, Config) and self.values == other.values


def parse_config_text(text: str, path: str = "<config>") -> Config:
    values = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError("unterminated section header", path=path, line=lineno)
            name = line[1:-1].strip()
            if name not in SCHEMA:
                raise ConfigError(f"unknown section [{name}]", path=path, line=lineno)
            if name in values:
                raise ConfigError(f"duplicate section [{name}]", path=path, line=lineno)
            values[name] = {}
            section = name
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}",
                              path=path, line=lineno)
        key, _, raw_val = line.partition("=")
        key = key.strip()
        if section is None:
            raise ConfigError(f"key {key!r} appears before any section",
                              path=path, line=lineno)
        field = _FIELDS.get((section, key))
        if field is None:
            raise ConfigError(f"unknown key {key!r} in section [{section}]",
                              path=path, line=lineno)
        if key in values[section]:
            raise ConfigError(f"duplicate key {key!r}", path=path, line=lineno)
        values[section][key] = _convert(field, raw_val, path, lineno)
    return Config(values)


def load_config(path) -> Config:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", path=str(path)) from exc
    return parse_config_text(text, path=str(path))


# ---------------------------------------------------------------------------
# Typed views over a parsed config
# ---------------------------------------------------------------------------

def world_config(cfg: Config) -> WorldConfig:
    w = cfg.values["world"]
    return WorldConfig(
        n_regions=w["n_regions"], hidden_states=w["hidden_states"],
        image_noise_states=w["image_noise_states"],
        text_noise_states=w["text_noise_states"],
        signal_strength=w["signal_strength"], patch_symbols=w["patch_symbols"],
        vocab_size=w["vocab_size"], sentence_length=w["sentence_length"],
        covered_regions=w["covered_regions"], tile_pixels=w["tile_pixels"],
        render_noise=w["render_noise"])


def image_encoder_config(cfg: Config) -> ImageEncoderConfig:
    e = cfg.values["encoder"]
    icfg = ImageEncoderConfig(
        image_size=e["image_size"], channels=tuple(e["grid_channels"]),
        global_channels=e["global_channels"], global_dim=e["global_dim"],
        activation=e["activation"])
    wcfg = world_config(cfg)
    if wcfg.image_pixels != icfg.image_size:
        raise ConfigError(
            f"world renders {wcfg.image_pixels} px images but the encoder expects "
            f"{icfg.image_size}")
    return icfg


def text_encoder_config(cfg: Config) -> TextEncoderConfig:
    e = cfg.values["encoder"]
    return TextEncoderConfig(
        vocab_size=cfg.get("world", "vocab_size"), embed_dim=e["embed_dim"],
        hidden_dim=e["text_hidden"], text_dim=e["text_dim"],
        activation=e["activation"])


def gaussian_config(cfg: Config) -> GaussianPairConfig:
    g = cfg.values["gaussian"]
    return GaussianPairConfig(dim=g["dim"], rho=tuple(g["rho"]),
                              n_samples=g["n_samples"])


def resolve_k_negatives(raw, bound: str, batch_size: int) -> int:
    """'auto' keys to the bound: all batch partners for cpc, one for mine_dv."""
    if raw == "auto":
        return batch_size - 1 if bound == "cpc" else 1
    k = int(raw)
    if not 1 <= k <= batch_size - 1:
        raise ConfigError(
            f"k_negatives = {k} must lie in [1, batch_size - 1 = {batch_size - 1}]")
    return k
