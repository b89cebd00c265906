"""Plain-text ``key = value`` run configuration.

Every key has a typed parser and a default; unknown keys are rejected.
``dump()`` writes every key in a fixed order and its output parses back
to an equal config.  Stage keys look like ``stages[2].kind`` (1-based).
"""

from __future__ import annotations

import re
from pathlib import Path
from typing import Optional

from pixsub.cascade import CascadeConfig
from pixsub.degrade import DegradeSpec
from pixsub.metrics import PROTOCOLS
from pixsub.refine import REFINER_KINDS, RefinerSpec


class ConfigError(ValueError):
    pass


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _opt(parser):
    def parse(v: str):
        v = v.strip()
        return None if v in ("", "auto", "none") else parser(v)
    return parse


def _choice(*options):
    def parse(v: str):
        v = v.strip()
        if v not in options:
            raise ValueError(f"{v!r} not one of {options}")
        return v
    return parse


def _str(v: str) -> str:
    return v.strip()


GLOBAL_KEYS = {
    "scale": (int, 2),
    "degrade.mode": (_choice("bicubic", "gaussian"), "bicubic"),
    "degrade.sigma": (_opt(float), None),
    "degrade.kernel_size": (_opt(int), None),
    "degrade.noise": (float, 0.0),
    "degrade.seed": (int, 0),
    "cascade.T": (int, 3),
    "cascade.shared_weights": (_bool, False),
    "train.lr": (float, 1e-4),
    "train.beta1": (float, 0.9),
    "train.beta2": (float, 0.999),
    "train.eps": (float, 1e-8),
    "train.epochs": (int, 1),
    "train.patch": (int, 48),
    "train.seed": (int, 0),
    "train.loss": (_choice("hard", "soft"), "hard"),
    "train.lambda": (float, 0.01),
    "eval.protocol": (_choice(*PROTOCOLS), "y-channel-shaved"),
    "eval.lr_mode": (_choice("float", "8bit"), "float"),
    "io.input": (_str, ""),
    "io.output": (_str, ""),
    "io.gt": (_str, ""),
    "io.lr": (_str, ""),
    "io.weights": (_str, ""),
}

STAGE_KEYS = {
    "kind": (_choice(*REFINER_KINDS), "toynet"),
    "iters": (int, 20),
    "step": (float, 1.0),
    "lambda_prior": (float, 0.01),
    "weights": (_str, ""),
    "features": (int, 16),
    "blocks": (int, 2),
}

_STAGE_RE = re.compile(r"^stages\[(\d+)\]\.(\w+)$")


def _fmt(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig:
    def __init__(self):
        self.values = {k: d for k, (_, d) in GLOBAL_KEYS.items()}
        self.stage_values: dict = {}  # (index, field) -> value, only explicit entries

    def __eq__(self, other):
        return (
            isinstance(other, RunConfig)
            and self.values == other.values
            and self._stage_table() == other._stage_table()
        )

    def __getitem__(self, key):
        m = _STAGE_RE.match(key)
        if m:
            i, f = int(m.group(1)), m.group(2)
            return self.stage_values.get((i, f), STAGE_KEYS[f][1])
        return self.values[key]

    def set(self, key: str, raw: str):
        key = key.strip()
        m = _STAGE_RE.match(key)
        try:
            if m:
                i, f = int(m.group(1)), m.group(2)
                if f not in STAGE_KEYS or i < 1:
                    raise ConfigError(f"unknown config key {key!r}")
                self.stage_values[(i, f)] = STAGE_KEYS[f][0](raw)
            elif key in GLOBAL_KEYS:
                self.values[key] = GLOBAL_KEYS[key][0](raw)
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from exc

    def update_text(self, text: str, origin: str = "<config>"):
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{origin}:{lineno}: expected key = value")
            key, raw = line.split("=", 1)
            self.set(key, raw)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        cfg.update_text(text)
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = cls()
        cfg.update_text(text, str(path))
        return cfg

    @property
    def T(self) -> int:
        return self.values["cascade.T"]

    def _stage_table(self):
        return {(i, f): self[f"stages[{i}].{f}"] for i in range(1, self.T + 1) for f in STAGE_KEYS}

    def dump(self) -> str:
        lines = [f"{k} = {_fmt(v)}" for k, v in self.values.items()]
        for i in range(1, self.T + 1):
            for f in STAGE_KEYS:
                lines.append(f"stages[{i}].{f} = {_fmt(self[f'stages[{i}].{f}'])}")
        return "\n".join(lines) + "\n"

    def validate(self):
        if self.T < 1:
            raise ConfigError(f"cascade.T must be >= 1, got {self.T}")
        extra = sorted({i for i, _ in self.stage_values if i > self.T})
        if extra:
            raise ConfigError(f"stage entries {extra} exceed cascade.T = {self.T}")
        self.degrade_spec()
        self.cascade_config()

    # -- builders -----------------------------------------------------------

    def degrade_spec(self) -> DegradeSpec:
        v = self.values
        try:
            return DegradeSpec(
                mode=v["degrade.mode"],
                scale=v["scale"],
                sigma=v["degrade.sigma"],
                kernel_size=v["degrade.kernel_size"],
                noise_level=v["degrade.noise"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def stage_weights_path(self, i: int) -> Optional[str]:
        explicit = self[f"stages[{i}].weights"]
        if explicit:
            return explicit
        if self.values["io.weights"]:
            return str(Path(self.values["io.weights"]) / f"stage{i}.pxw")
        return None

    def refiner_spec(self, i: int) -> RefinerSpec:
        try:
            return RefinerSpec(
                kind=self[f"stages[{i}].kind"],
                iters=self[f"stages[{i}].iters"],
                step=self[f"stages[{i}].step"],
                lambda_prior=self[f"stages[{i}].lambda_prior"],
                weights_path=self.stage_weights_path(i),
                features=self[f"stages[{i}].features"],
                blocks=self[f"stages[{i}].blocks"],
            )
        except ValueError as exc:
            raise ConfigError(f"stage {i}: {exc}") from exc

    def cascade_config(self) -> CascadeConfig:
        try:
            return CascadeConfig(
                T=self.T,
                degrade=self.degrade_spec(),
                stages=tuple(self.refiner_spec(i) for i in range(1, self.T + 1)),
                shared_weights=self.values["cascade.shared_weights"],
            )
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
