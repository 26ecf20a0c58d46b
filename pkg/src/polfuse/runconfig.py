"""JSON run configuration: every :class:`TrainConfig` field plus run-level options.

Unknown keys are rejected and values are type-checked before any work starts.
``cifem`` / ``tpc`` / ``augment`` also accept the strings "on" and "off".
"""

import dataclasses
import json

from .train import TrainConfig


class ConfigError(ValueError):
    pass


_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
RUN_FIELDS = {"repeats": 1}
_BOOL_WORDS = {"on": True, "off": False, "true": True, "false": False}


def _coerce(name, value, default):
    if isinstance(default, bool):
        if isinstance(value, str) and value.lower() in _BOOL_WORDS:
            return _BOOL_WORDS[value.lower()]
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{name} must be a boolean or on/off, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple) or name == "bands":
        if value is None and name == "bands":
            return None
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{name} must be a list of integers, got {value!r}")
        return tuple(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name} must be a string, got {value!r}")
    return value


@dataclasses.dataclass
class RunConfig:
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    repeats: int = 1

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("run configuration must be a JSON object")
        unknown = sorted(set(doc) - set(_TRAIN_FIELDS) - set(RUN_FIELDS))
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
        train_kw = {}
        for name, value in doc.items():
            if name in _TRAIN_FIELDS:
                train_kw[name] = _coerce(name, value, _TRAIN_FIELDS[name].default)
        repeats = _coerce("repeats", doc.get("repeats", 1), 1)
        if repeats < 1:
            raise ConfigError("repeats must be >= 1")
        try:
            return cls(TrainConfig(**train_kw), repeats)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from None
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as f:
            return cls.from_json(f.read())

    def to_dict(self):
        doc = self.train.to_dict()
        doc["repeats"] = self.repeats
        return doc

    def with_overrides(self, pairs):
        """Apply ``key=value`` strings (values parsed as JSON, falling back to bare strings)."""
        doc = self.to_dict()
        for pair in pairs:
            key, sep, raw = pair.partition("=")
            if not sep:
                raise ConfigError(f"override {pair!r} is not key=value")
            try:
                doc[key.strip()] = json.loads(raw)
            except json.JSONDecodeError:
                doc[key.strip()] = raw
        return RunConfig.from_dict(doc)


def default_config_json():
    return json.dumps(RunConfig().to_dict(), indent=2)
