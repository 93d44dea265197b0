"""JSON scenario files: validation, defaults and conversion to library objects."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .funcalg import ScalarFn
from .simulate import InitialCondition
from .spectrum_distinct import CascadeConfig, Measurement

__all__ = ["SCHEMA_VERSION", "ScenarioError", "Scenario", "fn_from_spec", "default_initial"]

SCHEMA_VERSION = 1

_TOP = {"schema", "regime", "a", "delta", "measurement", "initial", "T", "dt", "orders",
        "kmax", "k_sim", "seed", "sweep", "gap_tol"}
_SWEEP_AXES = ("delta", "xi", "n")


class ScenarioError(ValueError):
    """The scenario file does not satisfy the schema."""


def _num(v, name, positive=False):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ScenarioError(f"{name} must be a finite number")
    if positive and v <= 0:
        raise ScenarioError(f"{name} must be positive")
    return float(v)


def _int(v, name, minimum=0):
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ScenarioError(f"{name} must be an integer >= {minimum}")
    return v


def fn_from_spec(spec):
    """``{"poly": [...], "cos": [[amp, k], ...]}`` -> ScalarFn; ``{"samples": [...]}`` -> array."""
    if not isinstance(spec, dict) or not spec:
        raise ScenarioError("function spec must be a non-empty object")
    unknown = set(spec) - {"poly", "cos", "samples"}
    if unknown:
        raise ScenarioError(f"unknown function atoms {sorted(unknown)}")
    if "samples" in spec:
        if len(spec) > 1:
            raise ScenarioError("samples cannot be combined with other atoms")
        arr = np.asarray([_num(v, "sample") for v in spec["samples"]], float)
        if arr.size < 2:
            raise ScenarioError("samples need at least two values")
        return arr
    f = ScalarFn.zero()
    if "poly" in spec:
        f = f + ScalarFn.poly([_num(v, "poly coefficient") for v in spec["poly"]])
    for item in spec.get("cos", []):
        if not isinstance(item, (list, tuple)) or len(item) != 2:
            raise ScenarioError("cos atoms are [amplitude, k] pairs")
        f = f + ScalarFn.cos(_int(item[1], "cos frequency"), _num(item[0], "cos amplitude"))
    return f


def default_initial(N: int) -> dict:
    """Smooth profile compatible with the couplings at ``u0 = 0``."""
    profiles = []
    for j in range(1, N + 1):
        amp = 0.5 + 0.25 * j
        profiles.append({"poly": [amp - 0.3], "cos": [[amp, 1], [-0.3, 3]]})
    return {"profiles": profiles, "u0": 0.0}


@dataclass
class Scenario:
    data: dict

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ScenarioError(f"cannot read scenario: {exc}") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "Scenario":
        if not isinstance(raw, dict):
            raise ScenarioError("scenario must be a JSON object")
        unknown = set(raw) - _TOP
        if unknown:
            raise ScenarioError(f"unknown scenario keys {sorted(unknown)}")
        if raw.get("schema") != SCHEMA_VERSION:
            raise ScenarioError(f"schema must be {SCHEMA_VERSION}")
        d = copy.deepcopy(raw)
        if d.get("regime") not in ("distinct", "identical"):
            raise ScenarioError("regime must be 'distinct' or 'identical'")
        a = d.get("a")
        if not isinstance(a, list) or not a:
            raise ScenarioError("a must be a non-empty list")
        d["a"] = [_num(v, "a_j") for v in a]
        N = len(d["a"])
        d["delta"] = _num(d.get("delta"), "delta", positive=True)
        meas = d.get("measurement")
        if not isinstance(meas, dict) or meas.get("kind") not in ("distributed", "dirichlet", "neumann"):
            raise ScenarioError("measurement.kind must be distributed, dirichlet or neumann")
        if meas["kind"] == "distributed":
            if set(meas) - {"kind", "c"} or "c" not in meas:
                raise ScenarioError("distributed measurement takes exactly a weight 'c'")
            if "samples" in meas["c"]:
                raise ScenarioError("the output weight must be given by poly/cos atoms")
            fn_from_spec(meas["c"])
        else:
            if set(meas) - {"kind", "xi"}:
                raise ScenarioError("pointwise measurement takes exactly 'xi'")
            xi = _num(meas.get("xi"), "xi")
            if not 0.0 <= xi <= 1.0:
                raise ScenarioError("xi must lie in [0, 1]")
            meas["xi"] = xi
        init = d.get("initial")
        if init is None:
            init = default_initial(N)
        if not isinstance(init, dict) or set(init) - {"profiles", "u0"}:
            raise ScenarioError("initial takes 'profiles' and 'u0'")
        init.setdefault("u0", 0.0)
        init["u0"] = _num(init["u0"], "u0")
        profs = init.get("profiles", [{"poly": [0.0]}] * N)
        if not isinstance(profs, list) or len(profs) != N:
            raise ScenarioError(f"initial.profiles needs {N} entries")
        for p in profs:
            fn_from_spec(p)
        init["profiles"] = profs
        d["initial"] = init
        d["T"] = _num(d["T"], "T", positive=True) if d.get("T") is not None else 10.0 / d["delta"]
        d["dt"] = _num(d["dt"], "dt", positive=True) if d.get("dt") is not None else min(0.05, d["T"] / 200.0)
        if d["dt"] > d["T"]:
            raise ScenarioError("dt exceeds T")
        orders = d.get("orders") or {}
        if set(orders) - {"n0", "n", "cap"}:
            raise ScenarioError("orders takes n0, n, cap")
        for key in ("n0", "n"):
            v = orders.get(key)
            if v is None:
                orders[key] = None
            elif isinstance(v, list):
                orders[key] = [_int(x, f"orders.{key}") for x in v]
            else:
                orders[key] = _int(v, f"orders.{key}")
        orders["cap"] = _int(orders.get("cap", 512), "orders.cap", 1)
        d["orders"] = orders
        d["kmax"] = _int(d.get("kmax", 20), "kmax")
        d["k_sim"] = None if d.get("k_sim") is None else _int(d["k_sim"], "k_sim", 1)
        d["seed"] = _int(d.get("seed", 0), "seed")
        d["gap_tol"] = _num(d.get("gap_tol", 1e-6), "gap_tol", positive=True)
        sweep = d.get("sweep") or {}
        if not isinstance(sweep, dict):
            raise ScenarioError("sweep must be an object of axis -> values")
        for name, vals in sweep.items():
            if name not in _SWEEP_AXES and not (name.startswith("a") and name[1:].isdigit()):
                raise ScenarioError(f"unknown sweep axis {name!r}")
            if not isinstance(vals, list):
                raise ScenarioError(f"sweep axis {name!r} needs a list of values")
        d["sweep"] = sweep
        d["schema"] = SCHEMA_VERSION
        return cls(d)

    @property
    def N(self) -> int:
        return len(self.data["a"])

    def resolved(self) -> dict:
        return copy.deepcopy(self.data)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")

    def measurement(self) -> Measurement:
        m = self.data["measurement"]
        if m["kind"] == "distributed":
            return Measurement("distributed", c=fn_from_spec(m["c"]))
        return Measurement(m["kind"], xi=m["xi"])

    def config(self) -> CascadeConfig:
        d = self.data
        return CascadeConfig(tuple(d["a"]), d["regime"], d["delta"], self.measurement(), gap_tol=d["gap_tol"])

    def initial_condition(self) -> InitialCondition:
        init = self.data["initial"]
        return InitialCondition(tuple(fn_from_spec(p) for p in init["profiles"]), init["u0"])

    def channel_orders(self, key: str, channels: list[int]) -> dict | None:
        v = self.data["orders"][key]
        if v is None:
            return None
        if isinstance(v, list):
            if len(v) != len(channels):
                raise ScenarioError(f"orders.{key} needs {len(channels)} entries")
            return dict(zip(channels, v))
        return {ch: v for ch in channels}

    def with_axis(self, name: str, value) -> "Scenario":
        d = self.resolved()
        d["sweep"] = {}
        if name == "delta":
            # horizons that were defaulted follow delta
            if math.isclose(d["T"], 10.0 / d["delta"]):
                if math.isclose(d["dt"], min(0.05, d["T"] / 200.0)):
                    d["dt"] = min(0.05, 10.0 / value / 200.0)
                d["T"] = 10.0 / value
            d["delta"] = value
        elif name == "xi":
            d["measurement"]["xi"] = value
        elif name == "n":
            d["orders"]["n"] = value
        else:
            if not (name.startswith("a") and name[1:].isdigit()):
                raise ScenarioError(f"unknown sweep axis {name!r}")
            j = int(name[1:])
            if not 1 <= j <= len(d["a"]):
                raise ScenarioError(f"sweep axis {name!r} outside 1..N")
            d["a"][j - 1] = value
        return Scenario.from_dict(d)
