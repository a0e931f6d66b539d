"""Sectioned ``key = value`` experiment configuration.

Every key has a declared type and default. Unknown sections or keys, bad
values and out-of-range settings are rejected with ``file:line [section] key``
diagnostics before anything runs.
"""
from __future__ import annotations

import configparser
import hashlib
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, PhotonError
from .noise_model import NoiseParams
from .optical_matmul import CoreGeometry
from .robust_training import CCTConfig
from .vit.model import ViTConfig


def _int_list(text):
    text = text.strip()
    if text in ("", "default"):
        return None
    return tuple(int(v) for v in text.split(","))


def _float_list(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _str(text):
    return text.strip()


# section -> key -> (parser, default)
SCHEMA = {
    "run": {"seed": (int, 0), "output_dir": (_str, "out")},
    "noise": {
        "sigma_fab": (float, 0.4), "sigma_thermal": (float, 0.1), "sigma_laser": (float, 0.05),
        "regime": (_str, "pre_trim"), "jitter_std_pm": (float, 32.0), "jitter_bias_pm": (float, 0.0),
        "laser_mode": (_str, "channel"),
    },
    "device": {
        "gamma_nm": (float, 1.2), "delta_max_nm": (float, 2.2), "lut_bits": (int, 32),
        "arms": (int, 64), "rings_per_arm": (int, 32), "wavelengths": (int, 32), "cores": (int, 5),
        "noise_on_padding": (_bool, False),
    },
    "variation": {
        "width_mm": (float, 10.0), "height_mm": (float, 10.0), "cell_mm": (float, 0.05),
        "l_w_mm": (float, 1.0), "amplitude_nm": (float, 0.96), "n_rings": (int, 15), "placements": (int, 100),
    },
    "vit": {
        "image_size": (int, 32), "patch_size": (int, 8), "channels": (int, 1), "d_model": (int, 64),
        "n_heads": (int, 4), "n_layers": (int, 4), "ffn_mult": (int, 4), "n_classes": (int, 4),
    },
    "data": {
        "n_train_per_class": (int, 100), "n_test_per_class": (int, 100), "separation": (float, 1.0),
        "train_csv": (_str, ""), "test_csv": (_str, ""),
    },
    "train": {
        "epochs": (int, 30), "batch_size": (int, 32), "lr": (float, 1e-3), "weight_decay": (float, 0.01),
        "beta1": (float, 0.9), "beta2": (float, 0.999),
    },
    "finetune": {"epochs": (int, 10), "lr": (float, 5e-4)},
    "cct": {
        "tau_start": (float, 0.80), "tau_end": (float, 0.95), "anneal_epochs": (int, 8), "k": (int, 4),
        "lambda_cct": (float, 0.1), "active_layers": (_int_list, None), "active_heads": (_int_list, None),
    },
    "naln": {"eps": (float, 1e-5)},
    "eval": {"trials": (int, 10), "kind": (_str, "emulated")},
    "sweep": {"sigma_fab_list": (_float_list, (0.05, 0.1, 0.2, 0.4, 0.7))},
    "matmul": {"m": (int, 40), "k": (int, 70), "n": (int, 130), "trials": (int, 200)},
    "energy": {"eo_overhead": (float, 0.20), "eo_period": (int, 5), "eo_scope": (_str, "tuning"),
               "coeffs_path": (_str, "")},
}


@dataclass
class ExperimentConfig:
    values: dict = field(default_factory=dict)
    source: str = "<defaults>"

    def __getitem__(self, section):
        return self.values[section]

    # -- typed views ---------------------------------------------------
    @property
    def seed(self):
        return self.values["run"]["seed"]

    @property
    def output_dir(self):
        return Path(self.values["run"]["output_dir"])

    @property
    def noise(self) -> NoiseParams:
        n = self.values["noise"]
        return NoiseParams(n["sigma_fab"], n["sigma_thermal"], n["sigma_laser"], n["regime"],
                           n["jitter_std_pm"], n["jitter_bias_pm"], self.values["device"]["gamma_nm"],
                           n["laser_mode"])

    @property
    def geometry(self) -> CoreGeometry:
        d = self.values["device"]
        return CoreGeometry(d["arms"], d["rings_per_arm"], d["wavelengths"], d["cores"])

    @property
    def vit(self) -> ViTConfig:
        return ViTConfig(**self.values["vit"])

    @property
    def cct(self) -> CCTConfig:
        return CCTConfig(**self.values["cct"])

    def canonical(self):
        """Fully expanded config text; identical settings give identical text."""
        lines = []
        for section in SCHEMA:
            lines.append(f"[{section}]")
            for key in SCHEMA[section]:
                lines.append(f"{key} = {_format(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def sha256(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def with_output_dir(self, path):
        values = {s: dict(v) for s, v in self.values.items()}
        values["run"]["output_dir"] = str(path)
        return ExperimentConfig(values, self.source)


def _format(value):
    if value is None:
        return "default"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]")
_KEY_RE = re.compile(r"^\s*([^=:#;\s][^=:]*?)\s*[=:]")


def _line_index(text):
    """``(section, key) -> line number`` for diagnostics."""
    index, section = {}, None
    for lineno, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, None), lineno)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None and not line[:1].isspace():
            index.setdefault((section, m.group(1).strip().lower()), lineno)
    return index


def defaults() -> ExperimentConfig:
    values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
    cfg = ExperimentConfig(values)
    validate(cfg)
    return cfg


def parse_config(text, source="<string>") -> ExperimentConfig:
    lines = _line_index(text)

    def where(section, key=None):
        line = lines.get((section, key)) or lines.get((section, None))
        loc = f"{source}:{line}" if line else source
        return f"{loc} [{section}]" + (f" {key}" if key else "")

    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                       default_section="\x00unused")
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(str(exc).replace("\n", " "), source) from None
    cfg = defaults()
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section (expected one of {', '.join(SCHEMA)})", where(section))
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key (expected one of {', '.join(SCHEMA[section])})",
                                  where(section, key))
            conv = SCHEMA[section][key][0]
            try:
                cfg.values[section][key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value {raw!r}: {exc}", where(section, key)) from None
    cfg.source = source
    validate(cfg, where)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
    return parse_config(text, str(path))


def validate(cfg: ExperimentConfig, where=None):
    """Build every typed view once so domain errors surface at load time."""
    where = where or (lambda s, k=None: f"[{s}]" + (f" {k}" if k else ""))
    checks = [
        ("noise", None, lambda: cfg.noise),
        ("device", None, lambda: cfg.geometry),
        ("vit", None, lambda: cfg.vit),
        ("cct", None, lambda: cfg.cct),
    ]
    for section, key, build in checks:
        try:
            build()
        except (PhotonError, ValueError, TypeError) as exc:
            raise ConfigError(str(exc), where(section, key)) from None
    v = cfg.values
    positive = [("device", "lut_bits"), ("train", "epochs"), ("train", "batch_size"), ("eval", "trials"),
                ("matmul", "m"), ("matmul", "k"), ("matmul", "n"), ("matmul", "trials"),
                ("variation", "n_rings"), ("variation", "placements"), ("energy", "eo_period"),
                ("data", "n_train_per_class"), ("data", "n_test_per_class")]
    for section, key in positive:
        if v[section][key] < 1:
            raise ConfigError("must be >= 1", where(section, key))
    for section, key in [("finetune", "epochs"), ("train", "lr"), ("finetune", "lr"), ("train", "weight_decay"),
                         ("energy", "eo_overhead"), ("data", "separation")]:
        if v[section][key] < 0:
            raise ConfigError("must be >= 0", where(section, key))
    if not 1 <= v["device"]["lut_bits"] <= 32:
        raise ConfigError("must be in 1..32", where("device", "lut_bits"))
    if not v["device"]["delta_max_nm"] > 0:
        raise ConfigError("must be > 0", where("device", "delta_max_nm"))
    if v["eval"]["kind"] not in ("emulated", "injected"):
        raise ConfigError("must be 'emulated' or 'injected'", where("eval", "kind"))
    if v["energy"]["eo_scope"] not in ("tuning", "total"):
        raise ConfigError("must be 'tuning' or 'total'", where("energy", "eo_scope"))
    if not v["naln"]["eps"] > 0:
        raise ConfigError("must be > 0", where("naln", "eps"))
    if any(s < 0 for s in v["sweep"]["sigma_fab_list"]) or not v["sweep"]["sigma_fab_list"]:
        raise ConfigError("needs at least one value, all >= 0", where("sweep", "sigma_fab_list"))
    return cfg
