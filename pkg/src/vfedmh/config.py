"""Flat key-value experiment configuration.

Files hold one ``key = value`` pair per line, with ``#`` comments and blank
lines ignored.  Dotted keys group related settings; per-party settings use
``party.<index>.<field>``.  Unknown keys and malformed values are rejected
with their line number so typos cannot silently change an experiment.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .protocol import PartyConfig, SessionConfig


class ConfigError(ValueError):
    pass


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "on", "1"):
        return True
    if lowered in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (parser, default); None default means "not set"
_SCHEMA = {
    "method": (str, "vfedmh"),
    "seed": (int, 0),
    "output_dir": (str, "out"),
    "dataset.kind": (str, "synthetic"),
    "dataset.n": (int, 4000),
    "dataset.n_test": (int, 1000),
    "dataset.classes": (int, 10),
    "dataset.features": (int, 64),
    "dataset.spread": (float, 0.5),
    "dataset.scale": (float, 2.3),
    "dataset.images": (str, None),
    "dataset.labels": (str, None),
    "dataset.test_images": (str, None),
    "dataset.test_labels": (str, None),
    "dataset.limit": (int, 2000),
    "dataset.test_limit": (int, 1000),
    "dataset.csv": (str, None),
    "dataset.test_csv": (str, None),
    "parties.count": (int, 3),
    "training.epochs": (int, 20),
    "training.batch_size": (int, 128),
    "training.d_emb": (int, 64),
    "secure.mode": (str, "masked"),
    "secure.group": (str, "safe256"),
    "secure.scale_bits": (int, 16),
    "secure.test_mode": (_parse_bool, False),
    "transport.kind": (str, "inmem"),
    "transport.host": (str, "127.0.0.1"),
    "transport.port": (int, 0),
    "bound.model": (str, "linear"),
    "bound.n": (int, 256),
    "bound.classes": (int, 4),
    "bound.features": (int, 16),
    "bound.spread": (float, 0.5),
    "bound.scale": (float, 2.3),
    "bound.epochs": (int, 40),
    "bound.lr": (float, 0.5),
    "bound.clamp_lr": (_parse_bool, True),
    "bound.l2": (float, 0.1),
    "bound.seeds": (int, 20),
    "bound.d_emb": (int, 8),
    "bound.parties": (int, 2),
}

_PARTY_KEY = re.compile(r"^party\.(\d+)\.(model|optimizer|lr)$")


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)
    party_overrides: dict = field(default_factory=dict)  # (index, field) -> value

    def __getitem__(self, key):
        if key in self.values:
            return self.values[key]
        if key not in _SCHEMA:
            raise KeyError(key)
        return _SCHEMA[key][1]

    @property
    def n_passive(self) -> int:
        return self["parties.count"]

    def party(self, index: int) -> PartyConfig:
        return PartyConfig(
            model=self.party_overrides.get((index, "model"), "mlp3"),
            optimizer=self.party_overrides.get((index, "optimizer"), "sgd"),
            lr=self.party_overrides.get((index, "lr"), 0.05),
        )

    def session(self) -> SessionConfig:
        n_parties = self.n_passive + 1
        return SessionConfig(
            n_passive=self.n_passive,
            epochs=self["training.epochs"],
            batch_size=self["training.batch_size"],
            d_emb=self["training.d_emb"],
            seed=self["seed"],
            parties=[self.party(k) for k in range(n_parties)],
            secure_mode=self["secure.mode"],
            group=self["secure.group"],
            scale_bits=self["secure.scale_bits"],
            allow_test_groups=self["secure.test_mode"],
        )


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    cfg = ExperimentConfig()
    max_party = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        party_match = _PARTY_KEY.match(key)
        if party_match:
            index, fld = int(party_match.group(1)), party_match.group(2)
            try:
                parsed = float(value) if fld == "lr" else value
            except ValueError as exc:
                raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}")
            if (index, fld) in cfg.party_overrides:
                raise ConfigError(f"{source}:{lineno}: duplicate key {key}")
            cfg.party_overrides[(index, fld)] = parsed
            max_party = max(max_party or 0, index)
            continue
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in cfg.values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key}")
        parser = _SCHEMA[key][0]
        try:
            cfg.values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}")
    if cfg["method"] not in ("vfedmh", "local", "aggvfl"):
        raise ConfigError(f"{source}: unknown method {cfg['method']!r}")
    if cfg["dataset.kind"] not in ("synthetic", "idx", "csv"):
        raise ConfigError(f"{source}: unknown dataset.kind {cfg['dataset.kind']!r}")
    if cfg["transport.kind"] not in ("inmem", "tcp"):
        raise ConfigError(f"{source}: unknown transport.kind {cfg['transport.kind']!r}")
    if max_party is not None and max_party > cfg.n_passive:
        raise ConfigError(
            f"{source}: party.{max_party}.* configured but parties.count is {cfg.n_passive} "
            f"(party indices run 0..{cfg.n_passive})"
        )
    if cfg["dataset.kind"] == "idx" and not (cfg["dataset.images"] and cfg["dataset.labels"]):
        raise ConfigError(f"{source}: dataset.kind=idx needs dataset.images and dataset.labels")
    if cfg["dataset.kind"] == "csv" and not cfg["dataset.csv"]:
        raise ConfigError(f"{source}: dataset.kind=csv needs dataset.csv")
    return cfg


def load_config(path: str) -> ExperimentConfig:
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    return parse_config(text, source=path)
