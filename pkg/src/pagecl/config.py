"""INI configuration for experiments and the CLI.

Every key lives in a ``[section]`` and can be overridden from the command
line as ``section.key=value``.  Lists are comma separated; an empty value
means "unset" for optional keys.

    [experiment]
    strategy = page
    seed = 0
    domain_files = data/domain1.csv, data/domain2.csv

    [sgd]
    epochs = 50
"""

from __future__ import annotations

import configparser
import io
from dataclasses import fields
from pathlib import Path

from pagecl.bench import BenchmarkSpec
from pagecl.conformal import CertaintyThresholds, DsConfig
from pagecl.errors import ConfigError
from pagecl.experiment import ExperimentConfig
from pagecl.gmm import EmConfig
from pagecl.nn import SgdConfig
from pagecl.sdg import SdgConfig


def _list(cast):
    def parse(text: str):
        return tuple(cast(t.strip()) for t in text.split(",") if t.strip())
    return parse


def _optional(cast):
    def parse(text: str):
        return cast(text) if text.strip() and text.strip().lower() != "none" else None
    return parse


SCHEMA: dict[str, dict] = {
    "experiment": {"strategy": str, "seed": int, "domain_files": _list(str),
                   "healthy_class": int, "select_by": str, "pca_k": _optional(int),
                   "smote_k": _optional(int), "temporal": _list(float)},
    "model": {"hidden": _list(int)},
    "sgd": {"learning_rate": float, "momentum": float, "batch_size": int, "epochs": int},
    "sdg": {"c_max": int, "synth_fraction": float},
    "em": {"max_iter": int, "tol": float, "cov_reg": float},
    "ds": {"p_lower": float, "p_upper": float},
    "conformal": {"gamma": float, "min_confidence": float, "min_credibility": float},
}

_BENCH_CASTS = {"subjects_per_class": _list(int), "windows_per_subject": int, "dim": int,
                "n_classes": int, "components_per_class": int, "seed": int}
SCHEMA["bench"] = {f.name: _BENCH_CASTS.get(f.name, float) for f in fields(BenchmarkSpec)}


def parse_override(text: str) -> tuple[str, str, str]:
    """``"sgd.epochs=50"`` -> ``("sgd", "epochs", "50")``."""
    key, sep, value = text.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not section or not name:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    return section, name, value.strip()


def read_ini(path=None, overrides=()) -> dict[str, dict]:
    """Parse and type-check an INI file plus overrides into nested plain values."""
    parser = configparser.ConfigParser(interpolation=None)
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            parser.read(p, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    raw = {s: dict(parser[s]) for s in parser.sections()}
    for item in overrides:
        section, name, value = parse_override(item)
        raw.setdefault(section, {})[name] = value

    out: dict[str, dict] = {}
    for section, items in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for name, text in items.items():
            cast = SCHEMA[section].get(name)
            if cast is None:
                raise ConfigError(f"unknown config key {section}.{name}")
            try:
                out.setdefault(section, {})[name] = cast(text)
            except ValueError as exc:
                raise ConfigError(f"{section}.{name}: {exc}") from exc
    return out


def build_config(values: dict[str, dict]) -> ExperimentConfig:
    """Assemble an :class:`ExperimentConfig` from :func:`read_ini` output."""
    exp = dict(values.get("experiment", {}))
    con = values.get("conformal", {})
    try:
        sgd = SgdConfig(**values.get("sgd", {}))
        sdg = SdgConfig(**values.get("sdg", {}), em=EmConfig(**values.get("em", {})))
        ds = DsConfig(**values.get("ds", {}))
        thresholds = CertaintyThresholds(**{k: v for k, v in con.items() if k != "gamma"})
        files = list(exp.pop("domain_files", ()))
        # without input files the run falls back to the synthetic benchmark
        bench = None if files else BenchmarkSpec(**values.get("bench", {}))
        if "hidden" in values.get("model", {}):
            exp["hidden"] = values["model"]["hidden"]
        if "temporal" in exp and len(exp["temporal"]) != 3:
            raise ConfigError("experiment.temporal needs three fractions")
        return ExperimentConfig(domain_files=files, bench=bench,
                                sgd=sgd, sdg=sdg, ds=ds, thresholds=thresholds,
                                gamma=con.get("gamma", 2.0), **exp)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides=()) -> ExperimentConfig:
    return build_config(read_ini(path, overrides))


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (list, tuple)):
        return ", ".join(str(v) for v in value)
    return str(value)


def to_ini(cfg: ExperimentConfig) -> str:
    """Render a config back to INI text that :func:`load_config` reads unchanged."""
    parser = configparser.ConfigParser(interpolation=None)
    parser["experiment"] = {
        "strategy": cfg.strategy, "seed": str(cfg.seed),
        "domain_files": _fmt(cfg.domain_files), "healthy_class": str(cfg.healthy_class),
        "select_by": cfg.select_by, "pca_k": _fmt(cfg.pca_k), "smote_k": _fmt(cfg.smote_k),
        "temporal": _fmt(cfg.temporal),
    }
    parser["model"] = {"hidden": _fmt(cfg.hidden)}
    parser["sgd"] = {k: _fmt(getattr(cfg.sgd, k)) for k in SCHEMA["sgd"]}
    parser["sdg"] = {k: _fmt(getattr(cfg.sdg, k)) for k in SCHEMA["sdg"]}
    parser["em"] = {k: _fmt(getattr(cfg.sdg.em, k)) for k in SCHEMA["em"]}
    parser["ds"] = {k: _fmt(getattr(cfg.ds, k)) for k in SCHEMA["ds"]}
    parser["conformal"] = {"gamma": _fmt(cfg.gamma),
                           "min_confidence": _fmt(cfg.thresholds.min_confidence),
                           "min_credibility": _fmt(cfg.thresholds.min_credibility)}
    if cfg.bench is not None:
        parser["bench"] = {f.name: _fmt(getattr(cfg.bench, f.name)) for f in fields(BenchmarkSpec)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
