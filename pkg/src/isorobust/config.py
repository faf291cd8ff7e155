"""Flat ``key = value`` experiment configs with dotted section prefixes.

Example::

    # comments start with '#'
    model = shifted-identity(c=1, d=2)
    lipschitz.S = 200
    bounds.eps = 0.5, 1.0
    classifier.sign.kind = halfspace
    classifier.sign.w = -1, 0

A report written by ``run`` embeds the fully resolved config between
``BEGIN RESOLVED CONFIG`` / ``END RESOLVED CONFIG`` marker lines; passing the
report itself back to ``run`` replays that block.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

BEGIN_MARK = "# ----- BEGIN RESOLVED CONFIG -----"
END_MARK = "# ----- END RESOLVED CONFIG -----"

DEFAULTS: dict[str, str] = {
    "seed": "0",
    "output": "isorobust-out",
    "model": "",
    "model_id": "",
    "preset": "",
    "lipschitz.S": "1000",
    "lipschitz.N": "2000",
    "lipschitz.r": "0.5",
    "lipschitz.delta": "0.001",
    "lipschitz.values": "",
    "lipschitz.file": "",
    "bounds.variant": "tilde",
    "bounds.alpha": "0.05",
    "bounds.alpha_min": "",
    "bounds.alpha_max": "",
    "bounds.steps": "1",
    "bounds.eps": "1.0",
    "bounds.delta": "",
    "bounds.priors": "",
    "attack.pgd.loss": "cross-entropy",
    "attack.pgd.step": "",
    "attack.pgd.steps": "100",
    "attack.pgd.random_starts": "0",
    "attack.manifold.init": "optimize",
    "attack.manifold.loss": "cw-margin",
    "attack.manifold.optimizer": "adam",
    "attack.manifold.rounds": "5",
    "attack.manifold.lambda_init": "1.0",
    "attack.manifold.lr": "0.01",
    "attack.manifold.max_iterations": "10000",
    "attack.manifold.patience": "200",
    "eval.n": "1000",
    "eval.in_distribution": "true",
}

CLASSIFIER_FIELDS = {
    "kind": "", "w": "", "b": "0", "label": "0", "classes": "", "path": "",
    "arch": "linear", "method": "erm", "lr": "0.05", "epochs": "20", "batch_size": "64",
    "train_size": "2000", "eps_train": "0.5", "pgd_step": "0.1", "pgd_steps": "10", "seed": "",
}

_INT = ("seed", "lipschitz.S", "lipschitz.N", "bounds.steps", "attack.pgd.steps", "attack.pgd.random_starts",
        "attack.manifold.rounds", "attack.manifold.max_iterations", "attack.manifold.patience", "eval.n")
_FLOAT = ("lipschitz.r", "lipschitz.delta", "bounds.alpha", "bounds.alpha_min", "bounds.alpha_max", "bounds.delta",
          "attack.pgd.step", "attack.manifold.lambda_init", "attack.manifold.lr")
_FLOATS = ("bounds.eps", "lipschitz.values")
_CHOICES = {
    "bounds.variant": ("alpha", "tilde"),
    "attack.pgd.loss": ("cross-entropy", "cw-margin"),
    "attack.manifold.loss": ("cross-entropy", "cw-margin"),
    "attack.manifold.init": ("optimize", "recorded-z"),
    "attack.manifold.optimizer": ("adam", "gd"),
    "eval.in_distribution": ("true", "false", "yes", "no", "1", "0", "on", "off"),
}
_CLF_INT = ("label", "epochs", "batch_size", "train_size", "pgd_steps", "seed", "classes")
_CLF_FLOAT = ("b", "lr", "eps_train", "pgd_step")
_CLF_CHOICES = {"kind": ("halfspace", "constant", "file", "train"), "method": ("erm", "adv-train")}

PRESETS = {
    "table3-mnist": {
        "lipschitz.file": "@acgan_mnist_lipschitz.csv",
        "bounds.alpha": "0.015", "bounds.delta": "0.001", "bounds.eps": "1.0, 2.0, 3.0",
        "bounds.variant": "tilde", "lipschitz.r": "0.5", "lipschitz.delta": "0.001", "model_id": "acgan-mnist",
    },
    "table3-imagenet10": {
        "lipschitz.file": "@biggan_imagenet10_lipschitz.csv",
        "bounds.alpha": "0.15", "bounds.delta": "0.001", "bounds.eps": "1.0, 2.0, 3.0",
        "bounds.variant": "tilde", "lipschitz.r": "0.5", "lipschitz.delta": "0.001", "model_id": "biggan-imagenet10",
    },
}

_LINE_RE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_.\-]*)\s*=\s*(.*?)\s*$")
_CLF_RE = re.compile(r"^classifier\.([A-Za-z0-9_\-]+)\.([a-z_]+)$")


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        loc = []
        if line is not None:
            loc.append(f"line {line}")
        if key is not None:
            loc.append(f"key {key!r}")
        super().__init__(f"{', '.join(loc)}: {message}" if loc else message)
        self.line, self.key = line, key


@dataclass
class Config:
    values: dict[str, str]
    lines: dict[str, int] = field(default_factory=dict)
    base_dir: Path = Path(".")

    def raw(self, key: str) -> str:
        return self.values[key]

    def _fail(self, key, msg):
        raise ConfigError(msg, self.lines.get(key), key)

    def str(self, key: str) -> str:
        return self.values[key]

    def int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError:
            self._fail(key, f"expected an integer, got {self.values[key]!r}")

    def float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError:
            self._fail(key, f"expected a number, got {self.values[key]!r}")

    def optional_float(self, key: str):
        return None if self.values[key] == "" else self.float(key)

    def floats(self, key: str) -> list[float]:
        text = self.values[key].strip()
        if not text:
            return []
        try:
            return [float(t) for t in text.split(",")]
        except ValueError:
            self._fail(key, f"expected comma-separated numbers, got {text!r}")

    def bool(self, key: str) -> bool:
        v = self.values[key].lower()
        if v in ("true", "yes", "1", "on"):
            return True
        if v in ("false", "no", "0", "off"):
            return False
        self._fail(key, f"expected a boolean, got {self.values[key]!r}")

    def classifier_ids(self) -> list[str]:
        ids = []
        for key in self.values:
            m = _CLF_RE.match(key)
            if m and m.group(1) not in ids:
                ids.append(m.group(1))
        return sorted(ids)

    def classifier(self, cid: str) -> dict[str, str]:
        out = dict(CLASSIFIER_FIELDS)
        for k, v in self.values.items():
            m = _CLF_RE.match(k)
            if m and m.group(1) == cid:
                out[m.group(2)] = v
        return out

    def resolve_path(self, text: str) -> Path:
        """``@name`` refers to a packaged data file; otherwise relative to the config's directory.

        The ``output`` key is the exception: it is relative to the working directory.
        """
        if text.startswith("@"):
            return Path(str(resources.files("isorobust") / "data" / text[1:]))
        p = Path(text)
        return p if p.is_absolute() else self.base_dir / p

    def snapshot(self) -> str:
        lines = [BEGIN_MARK]
        lines += [f"{k} = {self.values[k]}" for k in sorted(self.values)]
        lines.append(END_MARK)
        return "\n".join(lines) + "\n"


def _extract_block(text: str) -> tuple[list[str], int]:
    lines = text.splitlines()
    if BEGIN_MARK in lines:
        start = lines.index(BEGIN_MARK) + 1
        try:
            end = lines.index(END_MARK, start)
        except ValueError:
            raise ConfigError("resolved-config block is not terminated", start) from None
        return lines[start:end], start
    return lines, 0


def parse_config(text: str, base_dir: Path | str = ".", overrides: dict | None = None) -> Config:
    raw: dict[str, str] = {}
    where: dict[str, int] = {}
    lines, offset = _extract_block(text)
    for i, line in enumerate(lines, start=offset + 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        m = _LINE_RE.match(line)
        if not m:
            raise ConfigError(f"cannot parse {stripped!r}; expected 'key = value'", i)
        key, value = m.group(1), m.group(2)
        if "#" in value:
            value = value.split("#", 1)[0].strip()
        if key in raw:
            raise ConfigError("duplicate key", i, key)
        cm = _CLF_RE.match(key)
        if cm:
            if cm.group(2) not in CLASSIFIER_FIELDS:
                raise ConfigError(f"unknown classifier field {cm.group(2)!r}", i, key)
        elif key not in DEFAULTS:
            raise ConfigError("unknown key", i, key)
        raw[key] = value
        where[key] = i
    for k, v in (overrides or {}).items():
        raw[k] = str(v)
    values = dict(DEFAULTS)
    preset = raw.get("preset", "")
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}", where.get("preset"), "preset")
        values.update(PRESETS[preset])
    values.update(raw)
    for cid in {m.group(1) for k in raw if (m := _CLF_RE.match(k))}:
        for fld, default in CLASSIFIER_FIELDS.items():
            values.setdefault(f"classifier.{cid}.{fld}", default)
    base = Path(base_dir)
    # file references are pinned to absolute paths so the snapshot replays from anywhere
    for key, value in values.items():
        if not value or value.startswith("@"):
            continue
        if key == "lipschitz.file" or key.endswith(".path") or (key == "model" and (base / value).is_file()):
            values[key] = str((base / value).resolve())
    cfg = Config(values, where, base)
    _validate(cfg)
    return cfg


def _validate(cfg: Config) -> None:
    for key in _INT:
        if cfg.values[key] != "":
            cfg.int(key)
    for key in _FLOAT:
        cfg.optional_float(key)
    for key in _FLOATS:
        cfg.floats(key)
    for key, choices in _CHOICES.items():
        if cfg.values[key].lower() not in choices:
            cfg._fail(key, f"expected one of {list(choices)}, got {cfg.values[key]!r}")
    for cid in cfg.classifier_ids():
        prefix = f"classifier.{cid}."
        for fld in _CLF_INT:
            if cfg.values[prefix + fld] != "":
                cfg.int(prefix + fld)
        for fld in _CLF_FLOAT:
            cfg.float(prefix + fld)
        for fld, choices in _CLF_CHOICES.items():
            if cfg.values[prefix + fld] not in choices:
                cfg._fail(prefix + fld, f"expected one of {list(choices)}, got {cfg.values[prefix + fld]!r}")
        if cfg.values[prefix + "w"]:
            cfg.floats(prefix + "w")


def load_config(path, overrides: dict | None = None) -> Config:
    path = Path(path)
    return parse_config(path.read_text(), path.parent, overrides)
