"""``key = value`` run configuration with a closed schema.

Every section and key is declared in :data:`SCHEMA`; anything else is
rejected. Each run writes the fully resolved config next to its outputs.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .exceptions import ConfigError
from .model import ModelConfig
from .training import TrainConfig


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.replace(" ", "").split(",") if p]


def _opt_int_list(text: str) -> list[int] | None:
    return None if text.strip().lower() in ("", "none") else _int_list(text)


def _opt_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "none") else float(text)


def _fmt(value) -> str:
    if isinstance(value, list):
        return ", ".join(str(v) for v in value)
    if value is None:
        return "none"
    return str(value).lower() if isinstance(value, bool) else str(value)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {"seed": (int, 0), "out": (str, "run")},
    "model": {
        "preset": (str, "desk"),
        "input_size": (_opt_int, None),
        "num_classes": (int, 2),
        "block_conv_counts": (_int_list, [2, 2, 2, 3, 3]),
        "block_channels": (_opt_int_list, None),
        "classifier_widths": (_int_list, [256, 128, 64]),
        "dtype": (str, "float32"),
    },
    "train": {
        "learning_rate": (float, 1e-3),
        "batch_size": (int, 2),
        "epochs": (int, 15),
        "alpha": (float, 0.5),
        "rec_loss": (str, "mse"),
        "lr_decay_gamma": (_opt_float, None),
        "lr_decay_every": (int, 10),
        "augment": (_bool, True),
        "balance": (_bool, True),
        "validation_fraction": (float, 0.2),
    },
    "data": {
        "n": (int, 200),
        "scheme": (str, "two_class"),
        "path": (str, ""),
        "test_fraction": (float, 0.2),
    },
    "explain": {
        "method": (str, "gradcam"),
        "class": (int, -1),
        "index": (int, 0),
        "patch": (int, 0),
        "stride": (int, 0),
        "baseline": (float, 0.5),
        "rectify": (_bool, False),
        "layer": (str, "last_conv"),
    },
    "attack": {
        "steps": (int, 20),
        "step_size": (float, 0.01),
        "radius": (float, 0.13),
        "target": (int, -1),
        "index": (int, 0),
        "random_start": (_bool, False),
    },
    "perturb": {"n": (int, 100)},
    "bench": {"runs": (int, 50), "index": (int, 0)},
}


@dataclass
class RunConfig:
    values: dict[str, dict] = field(default_factory=lambda: {
        s: {k: (list(d) if isinstance(d, list) else d) for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()
    })

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def set(self, section: str, key: str, raw) -> None:
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigError(f"unknown config key {key!r} in [{section}]")
        parser = SCHEMA[section][key][0]
        if isinstance(raw, str):
            try:
                raw = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from exc
        self.values[section][key] = raw

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        cfg = cls()
        for section in parser.sections():
            for key, raw in parser.items(section):
                cfg.set(section, key, raw)
        return cfg

    def to_text(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            lines += [f"{k} = {_fmt(v)}" for k, v in keys.items()]
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    def model_config(self) -> ModelConfig:
        """Build the model config; preset-dependent keys left as ``none`` are resolved in place."""
        m = self["model"]
        kw = {k: m[k] for k in ("input_size", "num_classes", "block_conv_counts", "block_channels",
                                "classifier_widths", "dtype") if m[k] is not None}
        config = ModelConfig.from_preset(m["preset"], **kw)
        m["input_size"] = config.input_size
        m["block_channels"] = list(config.block_channels)
        return config

    def absorb_model(self, config: ModelConfig) -> None:
        """Record a loaded model's configuration as the resolved [model] section."""
        m = self["model"]
        for key in ("preset", "input_size", "num_classes", "block_conv_counts", "block_channels",
                    "classifier_widths", "dtype"):
            value = getattr(config, key)
            m[key] = list(value) if isinstance(value, list) else value

    def train_config(self) -> TrainConfig:
        kw = dict(self["train"])
        kw["seed"] = self["run"]["seed"]
        return TrainConfig(**kw)
