"""INI run-config files mapped onto :class:`TrainConfig`."""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

from .sampling import ConfigError
from .trainer import TrainConfig


def _ints(text):
    return tuple(int(v) for v in re.split(r"[,\s]+", text.strip()) if v)


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt(conv):
    def parse(text):
        return None if text.strip().lower() in ("", "none", "auto") else conv(text)
    return parse


# section -> key -> (TrainConfig field, parser)
SCHEMA = {
    "problem": {
        "name": ("problem", str),
        "dim": ("dim", int),
        "seed": ("problem_seed", int),
        "nu": ("nu", float),
        "T": ("T", float),
        "n_mc": ("n_mc", int),
    },
    "model": {
        "hidden": ("hidden", _ints),
        "activation": ("activation", str),
    },
    "smoothing": {
        "sigma_x": ("sigma_x", float),
        "sigma_t": ("sigma_t", _opt(float)),
        "K_train": ("K_train", int),
        "K_test": ("K_test", int),
        "antithetic": ("antithetic", _bool),
    },
    "optimizer": {
        "base_lr": ("base_lr", float),
        "decay_coefficient": ("decay_coefficient", float),
        "lr_schedule": ("lr_schedule", str),
    },
    "schedule": {
        "mode": ("mode", str),
        "transition_epoch": ("transition_epoch", _opt(int)),
        "post_mode": ("post_mode", _opt(str)),
        "auto_transition": ("auto_transition", _bool),
        "plateau_window": ("plateau_window", int),
        "plateau_tol": ("plateau_tol", float),
        "epochs": ("epochs", int),
        "batch_size": ("batch_size", int),
        "seeds": ("seeds", _ints),
        "test_set_size": ("test_set_size", int),
        "eval_interval": ("eval_interval", int),
    },
    "reporting": {
        "out_dir": ("out_dir", str),
        "plots": ("plots", _bool),
    },
}


class ConfigFileError(ConfigError):
    def __init__(self, path, line, message):
        self.path, self.line = path, line
        where = f"{path}:{line}" if line else str(path)
        super().__init__(f"{where}: {message}")


@dataclass
class RunFile:
    """A parsed run config: training settings plus reporting options."""

    train: TrainConfig
    out_dir: str = "runs"
    plots: bool = True
    path: str = None


def _key_lines(text):
    """(section, key) -> 1-based line number, from a plain line scan."""
    lines, section = {}, None
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[(.+)\]$", line)
        if m:
            section = m.group(1).strip()
            lines[(section, None)] = no
            continue
        m = re.match(r"([^=:]+?)\s*[=:]", line)
        if m and section is not None:
            lines[(section, m.group(1).strip())] = no
    return lines


def parse_run_config(text, path="<string>"):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=str(path))
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigFileError(path, line, "malformed line") from exc
    except configparser.Error as exc:
        raise ConfigFileError(path, getattr(exc, "lineno", None), exc.message) from exc
    lines = _key_lines(text)
    kwargs, report = {}, {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigFileError(path, lines.get((section, None)),
                                  f"unknown section [{section}]; expected one of {', '.join(SCHEMA)}")
        for key, raw in parser.items(section):
            line = lines.get((section, key))
            if key not in SCHEMA[section]:
                raise ConfigFileError(path, line, f"unknown key {key!r} in [{section}]")
            name, conv = SCHEMA[section][key]
            try:
                value = conv(raw)
            except ValueError as exc:
                raise ConfigFileError(path, line, f"bad value for {key}: {exc}") from exc
            (report if section == "reporting" else kwargs)[name] = value
    try:
        train = TrainConfig(**kwargs)
        train.validate(train.build_problem())
    except ConfigError as exc:
        raise ConfigFileError(path, _blame(exc, lines, kwargs), str(exc)) from exc
    return RunFile(train, path=str(path), **report)


def _blame(exc, lines, kwargs):
    """Best-effort line of the key an error message talks about."""
    msg = str(exc)
    hits = []
    for section, keys in SCHEMA.items():
        for key, (name, _) in keys.items():
            if name in kwargs and (section, key) in lines:
                if key in msg or name in msg or str(kwargs[name]) in msg:
                    hits.append(lines[(section, key)])
    return min(hits) if hits else None


def load_run_config(path):
    path = Path(path)
    if not path.exists():
        bundled = bundled_config_path(str(path))
        if bundled is None:
            raise ConfigFileError(path, None, "no such file or bundled config")
        path = bundled
    return parse_run_config(path.read_text(encoding="utf-8"), path)


def bundled_configs():
    root = resources.files("rspinn") / "configs"
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".ini"))


def bundled_config_path(name):
    stem = name[:-4] if name.endswith(".ini") else name
    if stem in bundled_configs():
        return Path(str(resources.files("rspinn") / "configs" / f"{stem}.ini"))
    return None


def field_names():
    return [f.name for f in fields(TrainConfig)]
