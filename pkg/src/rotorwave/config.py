"""Flat ``section.key = value`` run configuration.

Lines hold one dotted key and a value; ``#`` starts a comment. Values are
numbers, booleans (true/false), bare or quoted strings, or bracketed
comma-separated lists. Every key has a default, so an empty file is the
SO2 weak-field setup.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass

SEED_MAX = (1 << 64) - 1


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def _positive(v):
    return v > 0


def _non_negative(v):
    return v >= 0


def _unit_open(v):
    return 0 < v < 1


def _window_pairs(v):
    return len(v) % 2 == 0 and all(lo < hi for lo, hi in zip(v[::2], v[1::2]))


def _all_positive(v):
    return len(v) > 0 and all(x > 0 for x in v)


# key -> (kind, default, check, description of the check)
SCHEMA = {
    "molecule.A_cm1": ("float", 2.028, _positive, "must be positive"),
    "molecule.B_cm1": ("float", 0.3442, _positive, "must be positive"),
    "molecule.C_cm1": ("float", 0.2935, _positive, "must be positive"),
    "molecule.mu_debye": ("float", 1.62, _non_negative, "must be non-negative"),
    "ensemble.temperature_K": ("float", 10.0, _positive, "must be positive"),
    "ensemble.population_cutoff": ("float", 1e-3, _unit_open, "must lie in (0, 1)"),
    "ensemble.jmax_ceiling": ("int", 120, _positive, "must be positive"),
    "ensemble.count_criterion": ("str", "energy", lambda v: v in ("energy", "population"), "must be energy or population"),
    "ensemble.count_threshold": ("float", 1.0, _positive, "must be positive"),
    "pulse.peak_field_MV_cm": ("float", None, _non_negative, "must be non-negative"),
    "pulse.intensity_W_cm2": ("float", None, _non_negative, "must be non-negative"),
    "pulse.carrier_THz": ("float", 0.5, _non_negative, "must be non-negative"),
    "pulse.fwhm_ps": ("float", 1.0, _positive, "must be positive"),
    "pulse.center_ps": ("float", -7.0, None, ""),
    "propagation.dt_ps": ("float", 0.002, _positive, "must be positive"),
    "propagation.t_start_ps": ("float", -15.0, None, ""),
    "propagation.t_end_ps": ("float", 125.0, None, ""),
    "propagation.method": ("str", "split-step-order2", lambda v: v in ("split-step-order2", "split", "rk4"),
                           "must be split-step-order2 or rk4"),
    "propagation.sample_every_ps": ("float", 0.05, _positive, "must be positive"),
    "propagation.j_buffer": ("int", 20, _non_negative, "must be non-negative"),
    "propagation.norm_drift_tolerance": ("float", 1e-8, _positive, "must be positive"),
    "propagation.leakage_tolerance": ("float", 1e-6, _positive, "must be positive"),
    "propagation.max_exact_states": ("int", 2000, _positive, "must be positive"),
    "rpwf.n_realizations": ("int", 100, _non_negative, "must be non-negative"),
    "rpwf.master_seed": ("int", 20240601, lambda v: 0 <= v <= SEED_MAX, "must be an unsigned 64-bit integer"),
    "rpwf.batches": ("int", 100, _positive, "must be positive"),
    "rpwf.mode": ("str", "auto", lambda v: v in ("auto", "superposition", "direct"),
                  "must be auto, superposition or direct"),
    "dynamics.run_exact": ("bool", True, None, ""),
    "dynamics.T_rev_ps": ("float", 120.0, _positive, "must be positive"),
    "dynamics.epsilon_start_ps": ("float", 0.0, None, ""),
    "dynamics.flatness_windows_ps": ("floats", [], _window_pairs,
                                     "must list lo, hi pairs with lo < hi (empty disables the flatness report)"),
    "levels.temperatures_K": ("floats", [0.01, 20.0, 30.0, 40.0, 50.0, 75.0, 100.0, 150.0, 200.0, 250.0, 300.0],
                              _all_positive, "must be a non-empty list of positive values"),
    "levels.fit_range_K": ("floats", [20.0, 200.0], lambda v: len(v) == 2 and 0 < v[0] < v[1],
                           "must be [lo, hi] with 0 < lo < hi"),
    "levels.energy_fit_range_K": ("floats", [50.0, 300.0], lambda v: len(v) == 2 and 0 < v[0] < v[1],
                                  "must be [lo, hi] with 0 < lo < hi"),
    "static.temperatures_K": ("floats", [10.0], _all_positive, "must be a non-empty list of positive values"),
    "scaling.temperatures_K": ("floats", [5.0, 10.0, 20.0, 50.0, 100.0], _all_positive,
                               "must be a non-empty list of positive values"),
    "scaling.n_realizations": ("ints", [8, 16, 32, 64, 128, 256], _all_positive,
                               "must be a non-empty list of positive values"),
    "scaling.dynamic": ("bool", False, None, ""),
    "scaling.dynamic_temperatures_K": ("floats", [10.0, 30.0, 75.0], _all_positive,
                                       "must be a non-empty list of positive values"),
    "scaling.dynamic_n_realizations": ("ints", [25, 100, 400, 1600], _all_positive,
                                       "must be a non-empty list of positive values"),
    "scaling.dynamic_seeds": ("int", 4, _positive, "must be positive"),
    "scaling.dynamic_fixed_n_realizations": ("int", 100, _positive, "must be positive"),
    "output.directory": ("str", "rotorwave-out", lambda v: len(v) > 0, "must be non-empty"),
    "output.format": ("str", "csv", lambda v: v == "csv", "only csv is supported"),
}


def _parse_scalar(text):
    t = text.strip()
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "\"'":
        return t[1:-1]
    low = t.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(t)
        except ValueError:
            pass
    return t


def _parse_value(text):
    t = text.strip()
    if t.startswith("["):
        if not t.endswith("]"):
            raise ValueError("unterminated list")
        inner = t[1:-1].strip()
        return [_parse_scalar(x) for x in inner.split(",")] if inner else []
    return _parse_scalar(t)


def _coerce(key, kind, value):
    def num(x, integer):
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise ConfigError(key, f"expected a number, got {x!r}")
        if integer:
            if isinstance(x, float) and not x.is_integer():
                raise ConfigError(key, f"expected an integer, got {x!r}")
            return int(x)
        if not math.isfinite(float(x)):
            raise ConfigError(key, "must be finite")
        return float(x)

    if kind == "float":
        return num(value, False)
    if kind == "int":
        return num(value, True)
    if kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected true or false, got {value!r}")
        return value
    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    if kind in ("floats", "ints"):
        if not isinstance(value, list):
            value = [value]
        return [num(x, kind == "ints") for x in value]
    raise AssertionError(kind)


@dataclass(frozen=True)
class RunConfig:
    values: tuple  # sorted (key, value) pairs, lists stored as tuples

    def __getitem__(self, key):
        return dict(self.values)[key]

    def get(self, key, default=None):
        return dict(self.values).get(key, default)

    def as_dict(self):
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.values}

    def with_overrides(self, overrides):
        """New config with some dotted keys replaced (and re-validated)."""
        d = self.as_dict()
        if "pulse.intensity_W_cm2" in overrides:
            d["pulse.peak_field_MV_cm"] = None
        if "pulse.peak_field_MV_cm" in overrides:
            d["pulse.intensity_W_cm2"] = None
        d.update(overrides)
        return build_config(d)

    def to_text(self):
        lines = []
        for k, v in self.values:
            if v is None:
                continue
            lines.append(f"{k} = {_format(v)}")
        return "\n".join(lines) + "\n"

    def hash(self):
        """sha256 of the canonical physics settings (the output location is excluded)."""
        d = {k: v for k, v in self.as_dict().items() if not k.startswith("output.")}
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    # convenient typed views

    def rotor(self):
        from .angular import RotorConstants
        return RotorConstants(self["molecule.A_cm1"], self["molecule.B_cm1"], self["molecule.C_cm1"],
                              self["molecule.mu_debye"])

    def pulse(self):
        from .constants import intensity_to_field
        from .dynamics import PulseSpec
        E0 = self["pulse.peak_field_MV_cm"]
        if E0 is None:
            E0 = intensity_to_field(self["pulse.intensity_W_cm2"])
        return PulseSpec.from_fwhm(E0, self["pulse.carrier_THz"], self["pulse.fwhm_ps"], self["pulse.center_ps"])

    def propagation(self):
        from .dynamics import PropagationConfig
        return PropagationConfig(
            dt=self["propagation.dt_ps"], t_start=self["propagation.t_start_ps"], t_end=self["propagation.t_end_ps"],
            method=self["propagation.method"], norm_drift_tolerance=self["propagation.norm_drift_tolerance"],
            sample_every=self["propagation.sample_every_ps"], j_buffer=self["propagation.j_buffer"],
            leakage_tolerance=self["propagation.leakage_tolerance"],
            max_exact_states=self["propagation.max_exact_states"])


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_format(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, str):
        return json.dumps(v)
    return str(v)


def build_config(raw):
    """Validate a {dotted key: value} mapping and fill defaults."""
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    out = {}
    for key, (kind, default, check, why) in SCHEMA.items():
        if key in raw and raw[key] is not None:
            v = _coerce(key, kind, raw[key])
        else:
            v = list(default) if isinstance(default, list) else default
        if v is not None and check is not None and not check(v):
            raise ConfigError(key, why)
        out[key] = v
    field_given = raw.get("pulse.peak_field_MV_cm") is not None
    inten_given = raw.get("pulse.intensity_W_cm2") is not None
    if field_given and inten_given:
        raise ConfigError("pulse.intensity_W_cm2", "give either pulse.peak_field_MV_cm or pulse.intensity_W_cm2, not both")
    if not field_given and not inten_given:
        out["pulse.peak_field_MV_cm"] = 1.2
    if not out["molecule.A_cm1"] >= out["molecule.B_cm1"] >= out["molecule.C_cm1"]:
        raise ConfigError("molecule.B_cm1", "rotational constants must satisfy A >= B >= C")
    if not out["propagation.t_end_ps"] > out["propagation.t_start_ps"]:
        raise ConfigError("propagation.t_end_ps", "must exceed propagation.t_start_ps")
    ratio = out["propagation.sample_every_ps"] / out["propagation.dt_ps"]
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ConfigError("propagation.sample_every_ps", "must be an integer multiple of propagation.dt_ps")
    values = tuple(sorted((k, tuple(v) if isinstance(v, list) else v) for k, v in out.items()))
    return RunConfig(values)


def parse_config_text(text):
    raw = {}
    for n, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0].strip() if not _quoted_hash(line) else line.strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {n}", "expected 'key = value'")
        key, value = (s.strip() for s in body.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        if key in raw:
            raise ConfigError(key, "given more than once")
        try:
            raw[key] = _parse_value(value)
        except ValueError as err:
            raise ConfigError(key, str(err)) from None
    return build_config(raw)


def _quoted_hash(line):
    # a '#' inside a quoted string value is not a comment
    head, _, tail = line.partition("=")
    t = tail.strip()
    return bool(t) and t[0] in "\"'" and "#" in t and not head.strip().startswith("#")


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())
