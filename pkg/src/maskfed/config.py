"""Declarative experiment configs: YAML in, validated blocks out.

A config file fully determines a run.  Validation is strict: unknown keys
and out-of-range values are rejected with the offending field path in the
message, before anything executes.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Any

import numpy as np
import yaml

from .core import ConfigError, DomainBall
from .data import KINDS, ObjectiveSpec, gen_clients
from .masking import MaskPlan
from .trainer import ETA_PRESETS, TrainConfig

SWEEPABLE = (
    "plan.p", "plan.s", "data.heterogeneity", "data.samples", "data.dim",
    "trainer.eta", "trainer.rounds", "trainer.epochs", "trainer.local_steps",
)


def _fail(path: str, msg: str):
    raise ConfigError(f"{path}: {msg}")


def _require(block: dict, path: str, key: str):
    if key not in block:
        _fail(f"{path}.{key}", "missing required field")
    return block[key]


def _as_int(val, path: str, minimum: int | None = None) -> int:
    if isinstance(val, bool) or not isinstance(val, int):
        _fail(path, f"expected an integer, got {val!r}")
    if minimum is not None and val < minimum:
        _fail(path, f"must be >= {minimum}, got {val}")
    return val


def _as_float(val, path: str, minimum=None, maximum=None, strict_min=False) -> float:
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        _fail(path, f"expected a number, got {val!r}")
    val = float(val)
    if minimum is not None and (val <= minimum if strict_min else val < minimum):
        op = ">" if strict_min else ">="
        _fail(path, f"must be {op} {minimum}, got {val}")
    if maximum is not None and val > maximum:
        _fail(path, f"must be <= {maximum}, got {val}")
    return val


def _check_keys(block: dict, path: str, allowed: set[str]):
    if not isinstance(block, dict):
        _fail(path, f"expected a mapping, got {type(block).__name__}")
    for key in block:
        if key not in allowed:
            _fail(f"{path}.{key}", "unknown field")


def _probability_list(val, path: str, n: int) -> list[float]:
    vals = val if isinstance(val, list) else [val] * n
    if len(vals) != n:
        _fail(path, f"expected {n} entries, got {len(vals)}")
    return [_as_float(v, path, minimum=0.0, maximum=1.0, strict_min=True) for v in vals]


@dataclass
class ExperimentConfig:
    """Validated config; `raw` keeps the normalized mapping for echo/rebuild."""

    raw: dict[str, Any]

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = copy.deepcopy(doc)
        _check_keys(doc, "config", {"objective", "data", "plan", "trainer", "sweep", "stability", "output"})

        obj = _require(doc, "config", "objective")
        _check_keys(obj, "objective", {"kind", "ridge", "hidden"})
        kind = _require(obj, "objective", "kind")
        if kind not in KINDS:
            _fail("objective.kind", f"must be one of {list(KINDS)}, got {kind!r}")
        _as_float(obj.setdefault("ridge", 0.0), "objective.ridge", minimum=0.0)
        _as_int(obj.setdefault("hidden", 4), "objective.hidden", minimum=1)

        dat = _require(doc, "config", "data")
        _check_keys(dat, "data", {"clients", "samples", "dim", "heterogeneity", "seed", "noise_std"})
        _as_int(_require(dat, "data", "clients"), "data.clients", minimum=1)
        _as_int(_require(dat, "data", "samples"), "data.samples", minimum=1)
        _as_int(_require(dat, "data", "dim"), "data.dim", minimum=1)
        _as_float(dat.setdefault("heterogeneity", 0.0), "data.heterogeneity", minimum=0.0, maximum=1.0)
        _as_int(_require(dat, "data", "seed"), "data.seed")
        _as_float(dat.setdefault("noise_std", 0.0), "data.noise_std", minimum=0.0)

        plan = _require(doc, "config", "plan")
        _check_keys(plan, "plan", {"mode", "p", "s"})
        mode = _require(plan, "plan", "mode")
        if mode not in ("random", "rolling", "full"):
            _fail("plan.mode", f"must be random, rolling, or full, got {mode!r}")
        N = dat["clients"]
        if mode in ("random", "full"):
            if "s" in plan:
                _fail("plan.s", "only used by rolling plans")
            if mode == "full":
                plan.setdefault("p", 1.0)
            p = _probability_list(_require(plan, "plan", "p"), "plan.p", N)
            if mode == "full" and any(v != 1.0 for v in p):
                _fail("plan.p", "full mode requires every p_i = 1")
            plan["p"] = p
        else:
            if "p" in plan:
                _fail("plan.p", "only used by random plans")
            s_val = _require(plan, "plan", "s")
            s_list = s_val if isinstance(s_val, list) else [s_val] * N
            if len(s_list) != N:
                _fail("plan.s", f"expected {N} entries, got {len(s_list)}")
            plan["s"] = [_as_int(v, "plan.s", minimum=1) for v in s_list]

        tr = _require(doc, "config", "trainer")
        _check_keys(tr, "trainer", {
            "local_steps", "rounds", "epochs", "eta", "radius", "seed",
            "record_every", "constants_trials",
        })
        _as_int(_require(tr, "trainer", "local_steps"), "trainer.local_steps", minimum=1)
        _as_int(_require(tr, "trainer", "rounds"), "trainer.rounds", minimum=1)
        _as_int(tr.setdefault("epochs", 1), "trainer.epochs", minimum=1)
        eta = _require(tr, "trainer", "eta")
        if isinstance(eta, str):
            if eta not in ETA_PRESETS:
                _fail("trainer.eta", f"unknown preset {eta!r}; presets: {list(ETA_PRESETS)}")
        else:
            _as_float(eta, "trainer.eta", minimum=0.0, strict_min=True)
        _as_float(_require(tr, "trainer", "radius"), "trainer.radius", minimum=0.0, strict_min=True)
        _as_int(_require(tr, "trainer", "seed"), "trainer.seed")
        _as_int(tr.setdefault("record_every", 0), "trainer.record_every", minimum=0)
        _as_int(tr.setdefault("constants_trials", 64), "trainer.constants_trials", minimum=1)
        if mode == "rolling":
            for s_i in plan["s"]:
                d_model = dat["dim"] if kind != "mlp" else obj["hidden"] * (dat["dim"] + 1)
                if s_i > d_model:
                    _fail("plan.s", f"sub-model size {s_i} exceeds model dim {d_model}")
        elif tr["epochs"] != 1:
            _fail("trainer.epochs", "must be 1 for random or full plans")

        if "sweep" in doc:
            sw = doc["sweep"]
            _check_keys(sw, "sweep", {"parameter", "values", "seeds"})
            param = _require(sw, "sweep", "parameter")
            if param not in SWEEPABLE:
                _fail("sweep.parameter", f"must be one of {list(SWEEPABLE)}, got {param!r}")
            values = _require(sw, "sweep", "values")
            if not isinstance(values, list) or not values:
                _fail("sweep.values", "must be a nonempty list")
            _as_int(sw.setdefault("seeds", 1), "sweep.seeds", minimum=1)

        if "stability" in doc:
            st = doc["stability"]
            _check_keys(st, "stability", {"n_values", "p_values", "seeds", "rounds", "test_samples"})
            n_values = _require(st, "stability", "n_values")
            if not isinstance(n_values, list) or not n_values:
                _fail("stability.n_values", "must be a nonempty list")
            st["n_values"] = [_as_int(v, "stability.n_values", minimum=2) for v in n_values]
            if "p_values" in st:
                if mode == "rolling":
                    _fail("stability.p_values", "only used with random plans")
                st["p_values"] = [
                    _as_float(v, "stability.p_values", minimum=0.0, maximum=1.0, strict_min=True)
                    for v in st["p_values"]
                ]
            _as_int(st.setdefault("seeds", 1), "stability.seeds", minimum=1)
            rounds = st.setdefault("rounds", "auto")
            if rounds != "auto":
                _as_int(rounds, "stability.rounds", minimum=1)
            _as_int(st.setdefault("test_samples", 200), "stability.test_samples", minimum=1)

        if "output" in doc:
            _check_keys(doc["output"], "output", {"dir"})
            if not isinstance(doc["output"].get("dir"), str):
                _fail("output.dir", "must be a string")

        return cls(raw=doc)

    @classmethod
    def from_yaml(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}")
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        return cls.from_dict(doc)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)

    def with_override(self, path: str, value) -> "ExperimentConfig":
        """New validated config with one dotted field replaced."""
        doc = copy.deepcopy(self.raw)
        node = doc
        parts = path.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
        return ExperimentConfig.from_dict(doc)

    # --- builders ---------------------------------------------------------

    @property
    def objective(self) -> ObjectiveSpec:
        o = self.raw["objective"]
        return ObjectiveSpec(kind=o["kind"], ridge=o["ridge"], hidden=o["hidden"])

    @property
    def ball(self) -> DomainBall:
        return DomainBall(self.raw["trainer"]["radius"])

    def plan(self) -> MaskPlan:
        p = self.raw["plan"]
        if p["mode"] in ("random", "full"):
            return MaskPlan(mode=p["mode"], p=np.asarray(p["p"], dtype=np.float64))
        return MaskPlan(mode="rolling", s=np.asarray(p["s"], dtype=np.int64), R=self.raw["trainer"]["rounds"])

    def datasets(self, seed: int | None = None, n: int | None = None, split: int = 0):
        d = self.raw["data"]
        return gen_clients(
            N=d["clients"], n=n if n is not None else d["samples"], d=d["dim"],
            heterogeneity=d["heterogeneity"], kind=self.raw["objective"]["kind"],
            seed=seed if seed is not None else d["seed"], split=split,
            noise_std=d["noise_std"],
        )

    def train_config(self, datasets=None, seed: int | None = None, **overrides) -> TrainConfig:
        tr = self.raw["trainer"]
        kwargs = dict(
            spec=self.objective,
            datasets=datasets if datasets is not None else self.datasets(),
            plan=self.plan(),
            K=tr["local_steps"],
            rounds=tr["rounds"],
            epochs=tr["epochs"],
            eta=tr["eta"],
            ball=self.ball,
            seed=seed if seed is not None else tr["seed"],
            record_every=tr["record_every"],
            const_trials=tr["constants_trials"],
        )
        kwargs.update(overrides)
        return TrainConfig(**kwargs)
