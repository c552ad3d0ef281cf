"""Experiment configuration: strict TOML schema, defaults and protocol construction.

Unknown sections or keys, wrong types and out-of-range values are all
reported together, each anchored to a line of the source file.
"""
from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .errors import ConfigError
from .protocols import (KINDS, AspirationScaled, AspirationUniform, CustomTable, Dissatisfaction,
                        PairwiseProportional, PayoffGame, RevisionProtocol)

AUTO = "auto"
GAME_KINDS = ("PairwiseProportional", "AspirationUniform", "AspirationScaled", "Dissatisfaction")


@dataclass(frozen=True)
class Key:
    kind: str                      # int, float, bool, str, list_int, list_float, matrix, table, auto_float
    default: object = None         # None = required (or conditionally required)
    lo: float | None = None
    hi: float | None = None
    lo_open: bool = False
    choices: tuple = ()


SCHEMA: dict[str, dict[str, Key]] = {
    "model": {
        "d": Key("int", None, 2, 64),
        "protocol": Key("str", None, choices=KINDS),
        "scale": Key("float", 0.5, 0.0, 1.0, lo_open=True),
        "payoff": Key("matrix", AUTO),
        "margin_low": Key("float", 1.0, 0.0, None, lo_open=True),
        "margin_high": Key("float", 1.0, 0.0, None, lo_open=True),
        "alpha": Key("list_float", AUTO),
        "beta": Key("list_float", AUTO),
        "low": Key("float", 0.0),
        "high": Key("float", 1.0),
        "rates": Key("table", AUTO),
        "interior_noisy": Key("bool", False),
    },
    "grid": {
        "N": Key("int", 20, 2, 10**6),
        "N_list": Key("list_int", [20, 40, 60, 80, 100, 120, 140, 160], 2, 10**6),
    },
    "qsd": {
        "tol": Key("float", 1e-12, 0.0, 1e-2, lo_open=True),
        "max_iter": Key("int", 1_000_000, 1, 10**9),
        "center": Key("list_float", AUTO, 0.0, 1.0),
        "eps": Key("float", 0.1, 0.0, None, lo_open=True),
        "invariance_t": Key("float", 1.0, 0.0, None),
        "polish": Key("bool", True),
    },
    "flow": {
        "T": Key("float", 50.0, 0.0, None, lo_open=True),
        "h": Key("float", 0.01, 0.0, None, lo_open=True),
        "transient_T": Key("float", 200.0, 0.0, None, lo_open=True),
        "window_T": Key("float", 50.0, 0.0, None, lo_open=True),
        "checkpoint": Key("float", 5.0, 0.0, None, lo_open=True),
        "x0": Key("list_float", AUTO, 0.0, 1.0),
    },
    "sim": {
        "n_samples": Key("int", 1000, 1, 10**8),
        "seed": Key("int", 12345, 0, 2**63 - 1),
        "step_cap": Key("int", 10**9, 1, 2**62),
        "T": Key("float", 5.0, 0.0, None, lo_open=True),
        "eps": Key("list_float", [0.1], 0.0, None),
        "N_list": Key("list_int", [50, 100, 200], 2, 10**6),
        "x0": Key("list_float", AUTO, 0.0, 1.0),
    },
    "ldp": {
        "M": Key("int", AUTO, 10, 10**4),
        "tau_bounds": Key("list_float", [0.05, 50.0], 0.0, None),
        "eps_class": Key("auto_float", AUTO, 0.0, None, lo_open=True),
        "alpha_margin": Key("auto_float", AUTO, 0.0, 1.0),
        "refine": Key("bool", False),
    },
    "recurrence": {
        "delta": Key("auto_float", AUTO, 0.0, None, lo_open=True),
        "T": Key("float", 50.0, 0.0, None, lo_open=True),
        "T_max": Key("float", 100.0, 0.0, None, lo_open=True),
        "eta": Key("float", 0.1, 0.0, None, lo_open=True),
    },
    "output": {
        "directory": Key("str", "out"),
        "formats": Key("list_str", ["csv", "json", "svg"]),
        "timing": Key("bool", True),
    },
}

_SECTION_RE = re.compile(r"^\s*\[\s*([A-Za-z0-9_.\-]+)\s*\]")
_KEY_RE = re.compile(r'^\s*("?[A-Za-z0-9_,\- ]+"?)\s*=')


def _locate(text: str) -> dict:
    """Map ``section`` and ``(section, key)`` to 1-based line numbers."""
    where: dict = {}
    section = None
    for n, line in enumerate(text.splitlines(), start=1):
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1)
            where.setdefault(section, n)
            continue
        m = _KEY_RE.match(line)
        if m and section is not None:
            key = m.group(1).strip().strip('"')
            where.setdefault((section, key), n)
    return where


class _Errors:
    def __init__(self, source: str, where: dict):
        self.source = source
        self.where = where
        self.items: list[str] = []

    def add(self, section, key, msg):
        line = self.where.get((section, key)) or self.where.get(section) or 1
        name = f"{section}.{key}" if key else section
        self.items.append(f"{self.source}:{line}: {name}: {msg}")


def _number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check_range(err, sec, key, spec: Key, v):
    if spec.lo is not None and (v < spec.lo or (spec.lo_open and v == spec.lo)):
        err.add(sec, key, f"value {v} out of range (must be {'>' if spec.lo_open else '>='} {spec.lo})")
        return False
    if spec.hi is not None and v > spec.hi:
        err.add(sec, key, f"value {v} out of range (must be <= {spec.hi})")
        return False
    return True


def _coerce(err, sec, key, spec: Key, v):
    k = spec.kind
    if isinstance(v, str) and v == AUTO and spec.default == AUTO:
        return AUTO
    if k == "int":
        if not isinstance(v, int) or isinstance(v, bool):
            err.add(sec, key, f"expected an integer, got {type(v).__name__}")
            return None
        return v if _check_range(err, sec, key, spec, v) else None
    if k in ("float", "auto_float"):
        if not _number(v):
            err.add(sec, key, f"expected a number, got {type(v).__name__}")
            return None
        return float(v) if _check_range(err, sec, key, spec, v) else None
    if k == "bool":
        if not isinstance(v, bool):
            err.add(sec, key, "expected true or false")
            return None
        return v
    if k == "str":
        if not isinstance(v, str):
            err.add(sec, key, "expected a string")
            return None
        if spec.choices and v not in spec.choices:
            err.add(sec, key, f"unknown value {v!r}; expected one of {', '.join(spec.choices)}")
            return None
        return v
    if k in ("list_int", "list_float", "list_str"):
        if not isinstance(v, list) or not v:
            err.add(sec, key, "expected a nonempty array")
            return None
        out = []
        for item in v:
            if k == "list_str":
                if not isinstance(item, str):
                    err.add(sec, key, "expected an array of strings")
                    return None
                out.append(item)
                continue
            if k == "list_int" and (not isinstance(item, int) or isinstance(item, bool)):
                err.add(sec, key, "expected an array of integers")
                return None
            if not _number(item):
                err.add(sec, key, "expected an array of numbers")
                return None
            if not _check_range(err, sec, key, spec, item):
                return None
            out.append(item if k == "list_int" else float(item))
        return out
    if k == "matrix":
        if (not isinstance(v, list) or not v or not all(isinstance(r, list) for r in v)
                or not all(_number(x) for r in v for x in r)):
            err.add(sec, key, "expected a square array of number arrays")
            return None
        if any(len(r) != len(v) for r in v):
            err.add(sec, key, "payoff matrix must be square")
            return None
        return [[float(x) for x in r] for r in v]
    if k == "table":
        if not isinstance(v, dict):
            err.add(sec, key, 'expected a table of "i,j" = "expression" entries')
            return None
        out = {}
        for pair, expr in v.items():
            m = re.fullmatch(r"\s*(\d+)\s*,\s*(\d+)\s*", pair)
            if not m or not isinstance(expr, str):
                err.add(sec, key, f'bad rate entry {pair!r}; use "i,j" = "expression"')
                return None
            out[f"{int(m.group(1))},{int(m.group(2))}"] = expr
        return out
    raise AssertionError(k)


def _cross_checks(err, cfg):
    m = cfg["model"]
    d = m.get("d")
    kind = m.get("protocol")
    if d is None or kind is None:
        return
    if kind in GAME_KINDS:
        if m["payoff"] == AUTO:
            err.add("model", "payoff", f"payoff matrix is required for {kind}")
        elif len(m["payoff"]) != d:
            err.add("model", "payoff", f"payoff matrix must be {d}x{d}")
    if kind == "AspirationScaled":
        for key in ("alpha", "beta"):
            if m[key] == AUTO:
                err.add("model", key, "required for AspirationScaled")
            elif len(m[key]) != d:
                err.add("model", key, f"needs {d} entries")
        if m["alpha"] != AUTO and m["beta"] != AUTO and len(m["alpha"]) == len(m["beta"]) == d:
            if not all(a < 1.0 < b for a, b in zip(m["alpha"], m["beta"])):
                err.add("model", "alpha", "need alpha_i < 1 < beta_i")
    if kind == "Dissatisfaction" and not m["high"] > m["low"]:
        err.add("model", "high", "need high > low")
    if kind == "CustomTable":
        if m["rates"] == AUTO:
            err.add("model", "rates", "rate table is required for CustomTable")
        else:
            for pair in m["rates"]:
                i, j = (int(t) for t in pair.split(","))
                if not (1 <= i <= d and 1 <= j <= d) or i == j:
                    err.add("model", "rates", f"pair {pair} invalid for d={d} (1-based, i != j)")
    for sec, key in (("qsd", "center"), ("flow", "x0"), ("sim", "x0")):
        v = cfg[sec][key]
        if v != AUTO and (len(v) != d or abs(sum(v) - 1.0) > 1e-9):
            err.add(sec, key, f"must be a point of the {d}-simplex")
    tb = cfg["ldp"]["tau_bounds"]
    if tb is not None and (len(tb) != 2 or not 0 < tb[0] < tb[1]):
        err.add("ldp", "tau_bounds", "need [tau_min, tau_max] with 0 < tau_min < tau_max")
    r = cfg["recurrence"]
    if r["T"] is not None and r["T_max"] is not None and not r["T"] < r["T_max"]:
        err.add("recurrence", "T_max", "need T < T_max")
    for f in cfg["output"]["formats"] or []:
        if f not in ("csv", "json", "svg"):
            err.add("output", "formats", f"unknown format {f!r}")


def normalize(raw: dict, source: str = "<config>", text: str = "") -> dict:
    """Validate a parsed config and fill defaults; raises :class:`ConfigError`."""
    err = _Errors(source, _locate(text))
    cfg: dict = {}
    for sec in raw:
        if sec not in SCHEMA:
            err.add(sec, None, f"unknown section [{sec}]")
    for sec, keys in SCHEMA.items():
        given = raw.get(sec, {})
        if not isinstance(given, dict):
            err.add(sec, None, "must be a table")
            given = {}
        for key in given:
            if key not in keys:
                err.add(sec, key, "unknown key")
        out = {}
        for key, spec in keys.items():
            if key in given:
                out[key] = _coerce(err, sec, key, spec, given[key])
            elif spec.default is None:
                err.add(sec, key, "required field is missing")
                out[key] = None
            else:
                out[key] = copy.deepcopy(spec.default)
        cfg[sec] = out
    if not err.items:
        _cross_checks(err, cfg)
    if err.items:
        raise ConfigError(err.items)
    return cfg


def loads(text: str, source: str = "<config>") -> dict:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        m = re.search(r"line (\d+)", str(exc))
        line = m.group(1) if m else "1"
        raise ConfigError([f"{source}:{line}: syntax error: {exc}"]) from None
    return normalize(raw, source, text)


def load(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return loads(text, str(path))


def dumps(cfg: dict) -> str:
    """TOML echo of a normalized config (fixed section and key order)."""
    ordered = {sec: {k: cfg[sec][k] for k in SCHEMA[sec]} for sec in SCHEMA}
    return tomli_w.dumps(ordered)


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def apply_overrides(cfg: dict, N=None, seed=None, out=None, d=None) -> dict:
    cfg = copy.deepcopy(cfg)
    if N is not None:
        if N < 2:
            raise ConfigError([f"--N: value {N} out of range (must be >= 2)"])
        cfg["grid"]["N"] = int(N)
    if seed is not None:
        cfg["sim"]["seed"] = int(seed)
    if out is not None:
        cfg["output"]["directory"] = str(out)
    if d is not None:
        cfg["model"]["d"] = int(d)
    return cfg


def build_protocol(cfg: dict) -> RevisionProtocol:
    m = cfg["model"]
    kind, s = m["protocol"], m["scale"]
    if kind == "CustomTable":
        table = {}
        for pair, expr in m["rates"].items():
            i, j = (int(t) - 1 for t in pair.split(","))
            table[(i, j)] = expr
        return CustomTable(m["d"], table, scale=s, interior_noisy=m["interior_noisy"])
    game = PayoffGame(m["payoff"])
    if kind == "PairwiseProportional":
        return PairwiseProportional(game, scale=s)
    if kind == "AspirationUniform":
        return AspirationUniform(game, m["margin_low"], m["margin_high"], scale=s)
    if kind == "AspirationScaled":
        return AspirationScaled(game, tuple(m["alpha"]), tuple(m["beta"]), scale=s)
    return Dissatisfaction(game, m["low"], m["high"], scale=s)


def resolved(cfg: dict, key: str, fallback):
    section, name = key.split(".")
    v = cfg[section][name]
    return fallback if v == AUTO else v
