"""INI experiment config: schema, parsing with defaults, lossless serialization.

Sections and keys (every key optional, defaults shown by ``fedtsdp defaults``):

    [data]        scheme, beta, classes_per_client, concepts, classes, features,
                  per_class, public_per_class, separation, test_fraction, csv_path
    [model]       hidden                      comma-separated hidden widths
    [train]       learning_rate, momentum, lr_decay, local_epochs, batch_size
    [federation]  seed, client_count, connect_ratio, rounds, hopkins_sample_count,
                  hopkins_threshold, eps1, eps2, min_pts, dampening, public_batch,
                  initial_shared_layers, strategy, upsilon, js_variant,
                  shared_floor, prox_mu, fedper_split
    [output]      path, record_timing

Optional values accept ``none``.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .clustering import DbscanParams
from .data import DataSpec
from .divergence import HopkinsConfig
from .nn_core import TrainConfig
from .orchestrator import FedConfig


class ConfigParseError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataSpec = field(default_factory=lambda: DataSpec(
        classes=10, features=20, per_class=240, public_per_class=25, separation=3.0))
    hidden: tuple[int, ...] = (32, 32, 32)
    train: TrainConfig = field(default_factory=TrainConfig)
    fed: FedConfig = field(default_factory=FedConfig)
    seed: int = 0
    output: str | None = None
    record_timing: bool = False


def _opt(conv):
    def parse(text):
        return None if text.strip().lower() in ("none", "") else conv(text)
    parse.optional = True
    return parse


def _bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int(text):
    value = float(text)
    if value != int(value):
        raise ValueError(f"not an integer: {text!r}")
    return int(value)


def _widths(text):
    parts = [p for p in text.replace(" ", "").split(",") if p]
    widths = tuple(_int(p) for p in parts)
    if any(w < 1 for w in widths):
        raise ValueError("hidden widths must be >= 1")
    return widths


# section -> key -> parser
SCHEMA = {
    "data": {
        "scheme": str, "beta": _opt(float), "classes_per_client": _opt(_int), "concepts": _int,
        "classes": _int, "features": _int, "per_class": _int, "public_per_class": _int,
        "separation": float, "test_fraction": float, "csv_path": _opt(str),
    },
    "model": {"hidden": _widths},
    "train": {
        "learning_rate": float, "momentum": float, "lr_decay": float,
        "local_epochs": _int, "batch_size": _int,
    },
    "federation": {
        "seed": _int, "client_count": _int, "connect_ratio": float, "rounds": _int,
        "hopkins_sample_count": _opt(_int), "hopkins_threshold": float, "eps1": float,
        "eps2": float, "min_pts": _int, "dampening": float, "public_batch": _int,
        "initial_shared_layers": _opt(float), "strategy": str, "upsilon": float,
        "js_variant": str, "shared_floor": float, "prox_mu": float, "fedper_split": _opt(_int),
    },
    "output": {"path": _opt(str), "record_timing": _bool},
}


def to_flat(cfg: ExperimentConfig) -> dict[str, dict[str, object]]:
    """Config as section -> key -> python value."""
    f = cfg.fed
    return {
        "data": {x.name: getattr(cfg.data, x.name) for x in fields(DataSpec)},
        "model": {"hidden": cfg.hidden},
        "train": {k: getattr(cfg.train, k) for k in SCHEMA["train"]},
        "federation": {
            "seed": cfg.seed, "client_count": f.client_count, "connect_ratio": f.connect_ratio,
            "rounds": f.rounds, "hopkins_sample_count": f.hopkins.sample_count,
            "hopkins_threshold": f.hopkins.threshold, "eps1": f.dbscan1.eps, "eps2": f.dbscan2.eps,
            "min_pts": f.dbscan1.min_pts, "dampening": f.dampening, "public_batch": f.public_batch,
            "initial_shared_layers": f.initial_shared_layers, "strategy": f.strategy,
            "upsilon": f.upsilon, "js_variant": f.js_variant, "shared_floor": f.shared_floor,
            "prox_mu": f.prox_mu, "fedper_split": f.fedper_split,
        },
        "output": {"path": cfg.output, "record_timing": cfg.record_timing},
    }


def from_flat(flat: dict[str, dict[str, object]]) -> ExperimentConfig:
    """Build and validate a config from (partial) section -> key -> value maps."""
    merged = to_flat(ExperimentConfig())
    for section, values in flat.items():
        for key, value in values.items():
            merged[section][key] = value
    d, m, t, fd, o = (merged[s] for s in ("data", "model", "train", "federation", "output"))
    section = "data"
    try:
        data = DataSpec(**d)
        data.partition_spec(1)  # scheme / beta / classes_per_client / test_fraction checks
        section = "train"
        train = TrainConfig(**t)
        section = "federation"
        fed = FedConfig(
            client_count=fd["client_count"], connect_ratio=fd["connect_ratio"], rounds=fd["rounds"],
            hopkins=HopkinsConfig(fd["hopkins_sample_count"], fd["hopkins_threshold"]),
            dbscan1=DbscanParams(fd["eps1"], fd["min_pts"]), dbscan2=DbscanParams(fd["eps2"], fd["min_pts"]),
            dampening=fd["dampening"], public_batch=fd["public_batch"],
            initial_shared_layers=fd["initial_shared_layers"], strategy=fd["strategy"],
            upsilon=fd["upsilon"], js_variant=fd["js_variant"], shared_floor=fd["shared_floor"],
            prox_mu=fd["prox_mu"], fedper_split=fd["fedper_split"])
        if fed.js_variant not in ("textbook", "as_printed"):
            raise ValueError(f"js_variant must be textbook or as_printed, got {fed.js_variant!r}")
        if fd["seed"] < 0:
            raise ValueError("seed must be >= 0")
    except (ValueError, TypeError) as exc:
        raise ConfigParseError(f"[{section}] {exc}") from exc
    return ExperimentConfig(data, tuple(m["hidden"]), train, fed, fd["seed"], o["path"], o["record_timing"])


def parse_text(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigParseError(f"{source}: {exc}") from exc
    flat: dict[str, dict[str, object]] = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigParseError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            flat.setdefault(section, {})[key] = parse_value(section, key, raw)
    return from_flat(flat)


def parse_value(section: str, key: str, raw: str):
    if key not in SCHEMA.get(section, {}):
        raise ConfigParseError(f"unknown key {section}.{key}")
    try:
        return SCHEMA[section][key](raw.strip())
    except ValueError as exc:
        raise ConfigParseError(f"{section}.{key}: {exc}") from exc


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigParseError(f"config file not found: {path}")
    return parse_text(path.read_text(), str(path))


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``section.key=value`` strings on top of ``cfg``."""
    flat = to_flat(cfg)
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigParseError(f"override must look like section.key=value, got {item!r}")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        if section not in SCHEMA:
            raise ConfigParseError(f"unknown section in override {item!r}")
        flat[section][key] = parse_value(section, key, raw)
    return from_flat(flat)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(cfg: ExperimentConfig) -> str:
    buf = io.StringIO()
    for section, values in to_flat(cfg).items():
        buf.write(f"[{section}]\n")
        for key, value in values.items():
            buf.write(f"{key} = {_fmt(value)}\n")
        buf.write("\n")
    return buf.getvalue()


def with_fed(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return replace(cfg, fed=replace(cfg.fed, **changes))
