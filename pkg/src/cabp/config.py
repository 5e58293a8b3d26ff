"""INI-style run configuration with typed keys, defaults and flag overrides.

Sections and keys (defaults in brackets)::

    [model]        arch [resnet8c], num_classes [10], resolution [native],
                   dtype [f32], seed [0], zero_init_residual [false]
    [train]        batch_size [64], epochs [10], lr [0.1], momentum [0.9],
                   gamma [0.1], decay_interval [30], weight_decay [0],
                   seed [0], fixed_order [true], augment [false],
                   log_interval [1]
    [compression]  k [off], exempt [], overrides []
    [data]         kind [synthetic], path [$CABP_DATA_DIR], limit [all],
                   samples [5000], seed [0], mean [], std []

Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, TextIO

from cabp.data import CIFAR10_MEAN, CIFAR10_STD, Dataset, load_dataset
from cabp.models import ARCHITECTURES, CompressionPolicy, ResNet, build_network
from cabp.static_model import parse_kernel
from cabp.tensor import DTYPES
from cabp.train import TrainConfig

__all__ = ["ConfigError", "RunConfig", "SCHEMA", "DATA_ENV", "load_config", "parse_resolution"]

DATA_ENV = "CABP_DATA_DIR"


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{text}'")


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none", "all") else int(text)


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def parse_resolution(text: str) -> tuple[int, int] | None:
    text = text.strip().lower()
    if text in ("", "native", "none"):
        return None
    parts = text.split("x")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise ValueError(f"bad resolution '{text}'; expected HxW")
    h, w = int(parts[0]), int(parts[1])
    if h < 1 or w < 1:
        raise ValueError(f"bad resolution '{text}'")
    return h, w


def _overrides(text: str) -> tuple[tuple[str, tuple[int, int] | None], ...]:
    out = []
    for item in _names(text):
        pattern, sep, k = item.rpartition(":")
        if not sep or not pattern:
            raise ValueError(f"override '{item}' must look like pattern:KxK")
        out.append((pattern, parse_kernel(k)))
    return tuple(out)


def _choice(options) -> Callable[[str], str]:
    def parse(text: str) -> str:
        v = text.strip()
        if v not in options:
            raise ValueError(f"'{v}' is not one of {', '.join(options)}")
        return v
    return parse


def _kernel_text(text: str) -> str:
    parse_kernel(text)
    return text.strip().lower()


# section -> key -> (parser, default text)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], str]]] = {
    "model": {
        "arch": (_choice(ARCHITECTURES), "resnet8c"),
        "num_classes": (int, "10"),
        "resolution": (parse_resolution, "native"),
        "dtype": (_choice(tuple(DTYPES)), "f32"),
        "seed": (int, "0"),
        "zero_init_residual": (_bool, "false"),
    },
    "train": {
        "batch_size": (int, "64"),
        "epochs": (int, "10"),
        "lr": (float, "0.1"),
        "momentum": (float, "0.9"),
        "gamma": (float, "0.1"),
        "decay_interval": (int, "30"),
        "weight_decay": (float, "0"),
        "seed": (int, "0"),
        "fixed_order": (_bool, "true"),
        "augment": (_bool, "false"),
        "log_interval": (int, "1"),
    },
    "compression": {
        "k": (_kernel_text, "off"),
        "exempt": (_names, ""),
        "overrides": (_overrides, ""),
    },
    "data": {
        "kind": (_choice(("synthetic", "gaussian", "cifar10", "mnist")), "synthetic"),
        "path": (str, ""),
        "limit": (_opt_int, "all"),
        "samples": (int, "5000"),
        "seed": (int, "0"),
        "mean": (_floats, ""),
        "std": (_floats, ""),
    },
}


@dataclass
class RunConfig:
    """Raw text values per section; typed access through :meth:`get`."""

    values: dict[str, dict[str, str]] = field(
        default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})
    source: str = "<defaults>"

    def set(self, section: str, key: str, text: str) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown key '{key}' in [{section}]")
        parser = SCHEMA[section][key][0]
        try:
            parser(str(text))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
        self.values[section][key] = str(text).strip()

    def get(self, section: str, key: str):
        return SCHEMA[section][key][0](self.values[section][key])

    # -- derived objects --------------------------------------------------
    def policy(self) -> CompressionPolicy:
        return CompressionPolicy(parse_kernel(self.get("compression", "k")), self.get("compression", "exempt"),
                                 self.get("compression", "overrides"))

    def train_config(self) -> TrainConfig:
        t = {k: self.get("train", k) for k in SCHEMA["train"]}
        mean, std = self.get("data", "mean") or None, self.get("data", "std") or None
        if mean is None and self.get("data", "kind") in ("cifar10", "synthetic"):
            mean, std = CIFAR10_MEAN, CIFAR10_STD
        try:
            return TrainConfig(dtype=self.get("model", "dtype"), mean=mean, std=std, **t)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def build_network(self, policy: CompressionPolicy | None = None, in_channels: int = 3) -> ResNet:
        return build_network(self.get("model", "arch"), policy=policy if policy is not None else self.policy(),
                             seed=self.get("model", "seed"), num_classes=self.get("model", "num_classes"),
                             resolution=self.get("model", "resolution"), in_channels=in_channels,
                             dtype=self.get("model", "dtype"),
                             zero_init_residual=self.get("model", "zero_init_residual"))

    def network_factory(self, in_channels: int = 3) -> Callable[[CompressionPolicy], ResNet]:
        return lambda policy: self.build_network(policy, in_channels)

    def data_path(self) -> str | None:
        return self.get("data", "path") or os.environ.get(DATA_ENV) or None

    def dataset(self, train: bool = True) -> Dataset:
        return load_dataset(self.data_path(), self.get("data", "kind"), train=train,
                            limit=self.get("data", "limit"), seed=self.get("data", "seed"),
                            synthetic_samples=self.get("data", "samples"))

    # -- serialisation ------------------------------------------------------
    def write(self, fh: TextIO) -> None:
        fh.write(f"# effective configuration (source: {self.source})\n")
        for section, keys in self.values.items():
            fh.write(f"[{section}]\n")
            for key, value in keys.items():
                fh.write(f"{key} = {value}\n")
            fh.write("\n")


def load_config(path: str | Path | None) -> RunConfig:
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {str(exc).splitlines()[0]}") from None
    for section in parser.sections():
        for key, value in parser.items(section):
            cfg.set(section, key, value)
    cfg.source = str(path)
    return cfg
