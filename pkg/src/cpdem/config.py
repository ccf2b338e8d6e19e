"""Run configuration: problem presets, TOML loading and validation.

A config file names a ``problem`` and overrides any preset field.  Every
field is checked (and the full problem assembled) before a command does any
work, so a bad file never leaves partial output behind.
"""
from __future__ import annotations

import copy
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .constitutive import EnergyModel
from .domain import DirichletAnsatz, build_grid
from .errors import ConfigError
from .loss import ExpectedEnergy, ParameterDistribution, Problem
from .network import ModelArchitecture
from .optim import TrainSchedule

PROBLEMS = ("bar1d_linear", "bar1d_neohookean", "beam2d_linear", "beam2d_neohookean",
            "beam3d_neohookean")

PROBLEM_DIMS = {"bar1d_linear": 1, "bar1d_neohookean": 1, "beam2d_linear": 2,
                "beam2d_neohookean": 2, "beam3d_neohookean": 3}

SEED_ENV = "CPDEM_SEED"

_BAR = {
    "geometry": {"L": 1.0, "H": 0.0, "W": 0.0, "A": 1.0},
    "grid": {"counts": [101], "rule": "trapezoid"},
    "material": {"model": "linear_elastic", "params": ["E"], "fixed": {"nu": 0.0}},
    "loading": {"body_force": "x1", "face": "", "traction": []},
    "ansatz": {"kind": "multiply_by_X"},
    "network": {"coord_widths": [1, 20, 20], "param_widths": [1, 10, 10],
                "manifold_widths": [30, 20, 1], "activation": "tanh", "output_scale": 1.0},
    "distribution": {"kind": "uniform_box", "low": [0.5], "high": [3.0],
                     "mean": [], "cov": []},
    "schedule": {"adam_epochs": 2000, "lbfgs_epochs": 100, "lbfgs_iters": 20, "lr": 0.01,
                 "n_samples": 32, "n_frozen": 32, "m_hist": 10},
    "validate": {"n_eta": 26, "oracle_elements": 200, "points": 101},
    "finetune": {"steps": 50},
}

_BEAM2D = {
    "geometry": {"L": 3.0, "H": 1.0, "W": 0.0, "A": 1.0},
    "grid": {"counts": [60, 20], "rule": "trapezoid"},
    "material": {"model": "linear_elastic", "params": ["E", "nu"], "fixed": {}},
    "loading": {"body_force": "none", "face": "x1_max", "traction": [0.0, -5.0]},
    "ansatz": {"kind": "multiply_by_x1"},
    "network": {"coord_widths": [2, 20, 20], "param_widths": [2, 10, 10],
                "manifold_widths": [30, 20, 2], "activation": "tanh", "output_scale": 1.0},
    "distribution": {"kind": "uniform_box", "low": [100.0, 0.25], "high": [500.0, 0.35],
                     "mean": [], "cov": []},
    "schedule": {"adam_epochs": 1000, "lbfgs_epochs": 150, "lbfgs_iters": 20, "lr": 0.005,
                 "n_samples": 16, "n_frozen": 64, "m_hist": 10},
    "validate": {"n_eta": 3, "oracle_elements": 0, "points": 0},
    "finetune": {"steps": 50},
}

PRESETS = {
    "bar1d_linear": _BAR,
    "bar1d_neohookean": {**_BAR, "material": {"model": "neo_hookean", "params": ["E"],
                                              "fixed": {"nu": 0.0}}},
    "beam2d_linear": _BEAM2D,
    "beam2d_neohookean": {
        **_BEAM2D,
        "material": {"model": "neo_hookean", "params": ["E", "nu"], "fixed": {}},
        "distribution": {"kind": "uniform_box", "low": [800.0, 0.25], "high": [1200.0, 0.35],
                     "mean": [], "cov": []},
        "network": {**_BEAM2D["network"], "output_scale": 0.1},
        "schedule": {**_BEAM2D["schedule"], "adam_epochs": 96, "lbfgs_epochs": 24, "lr": 0.01,
                     "n_frozen": 16},
    },
    "beam3d_neohookean": {
        "geometry": {"L": 3.0, "H": 1.0, "W": 1.0, "A": 1.0},
        "grid": {"counts": [30, 10, 10], "rule": "trapezoid"},
        "material": {"model": "neo_hookean", "params": ["E", "nu"], "fixed": {}},
        "loading": {"body_force": "none", "face": "x1_max", "traction": [0.0, 0.0, -5.0]},
        "ansatz": {"kind": "multiply_by_x1"},
        "network": {"coord_widths": [3, 20, 20], "param_widths": [2, 10, 10],
                    "manifold_widths": [30, 20, 3], "activation": "tanh", "output_scale": 0.1},
        "distribution": {"kind": "uniform_box", "low": [800.0, 0.25], "high": [1200.0, 0.35],
                     "mean": [], "cov": []},
        "schedule": {"adam_epochs": 200, "lbfgs_epochs": 10, "lbfgs_iters": 20, "lr": 0.01,
                     "n_samples": 8, "n_frozen": 8, "m_hist": 10},
        "validate": {"n_eta": 3, "oracle_elements": 0, "points": 0},
        "finetune": {"steps": 50},
    },
}

TOP_LEVEL = ("problem", "seed", "out")


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"{where}: unknown field")
        if isinstance(out[key], dict) and key != "fixed":
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a table")
            out[key] = _merge(out[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def _check(cond, field, msg):
    if not cond:
        raise ConfigError(f"{field}: {msg}")


def _positive_int(rec, section, key, minimum=1):
    v = rec[section][key]
    _check(isinstance(v, int) and not isinstance(v, bool) and v >= minimum,
           f"{section}.{key}", f"must be an integer >= {minimum}, got {v!r}")
    return v


def _real(rec, section, key, positive=False):
    v = rec[section][key]
    _check(isinstance(v, (int, float)) and not isinstance(v, bool) and np.isfinite(v),
           f"{section}.{key}", f"must be a finite number, got {v!r}")
    if positive:
        _check(v > 0, f"{section}.{key}", f"must be positive, got {v!r}")
    return float(v)


@dataclass
class RunConfig:
    """Validated run configuration; ``record`` is the merged plain-dict form."""

    record: dict

    @classmethod
    def from_dict(cls, data: dict, *, env=None) -> RunConfig:
        env = os.environ if env is None else env
        data = dict(data)
        problem = data.get("problem")
        _check(problem in PROBLEMS, "problem", f"must be one of {', '.join(PROBLEMS)}, got {problem!r}")
        rec = _merge(PRESETS[problem], {k: v for k, v in data.items() if k not in TOP_LEVEL})
        rec["problem"] = problem
        rec["seed"] = data.get("seed", 0)
        rec["out"] = data.get("out", f"runs/{problem}")
        if env.get(SEED_ENV):
            try:
                rec["seed"] = int(env[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV}: must be an integer, got {env[SEED_ENV]!r}") from None
        cfg = cls(rec)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, *, env=None) -> RunConfig:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: TOML syntax error: {exc}") from None
        return cls.from_dict(data, env=env)

    @classmethod
    def preset(cls, problem, **overrides) -> RunConfig:
        return cls.from_dict({"problem": problem, **overrides}, env={})

    # --- accessors -----------------------------------------------------
    @property
    def problem_name(self) -> str:
        return self.record["problem"]

    @property
    def seed(self) -> int:
        return self.record["seed"]

    @property
    def dim(self) -> int:
        return PROBLEM_DIMS[self.problem_name]

    @property
    def box(self):
        g = self.record["geometry"]
        return [(0.0, g["L"]), (0.0, g["H"]), (0.0, g["W"])][: self.dim]

    @property
    def param_box(self):
        d = self.record["distribution"]
        return tuple((float(a), float(b)) for a, b in zip(d["low"], d["high"]))

    @property
    def param_names(self):
        return tuple(self.record["material"]["params"])

    def hash(self) -> str:
        blob = json.dumps(self.record, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # --- builders ------------------------------------------------------
    def architecture(self) -> ModelArchitecture:
        n = self.record["network"]
        return ModelArchitecture(
            coord_encoder_widths=tuple(n["coord_widths"]),
            param_encoder_widths=tuple(n["param_widths"]),
            manifold_widths=tuple(n["manifold_widths"]),
            coord_box=tuple(self.box),
            param_box=self.param_box,
            activation=n["activation"],
            output_scale=float(n["output_scale"]),
        )

    def energy_model(self) -> EnergyModel:
        m = self.record["material"]
        area = float(self.record["geometry"]["A"])
        body = None
        if self.record["loading"]["body_force"] == "x1":
            # uniaxial bar: dividing the line load by A keeps the minimizer of A*U - W
            def body(X):
                return X[:, :1] / area
        return EnergyModel(m["model"], self.dim, tuple(m["params"]),
                           {k: float(v) for k, v in m["fixed"].items()}, body)

    def domain(self, counts=None):
        g = self.record["grid"]
        dom = build_grid(self.dim, self.box, counts or g["counts"], g["rule"])
        ld = self.record["loading"]
        if ld["face"]:
            dom.add_traction(ld["face"], ld["traction"])
        return dom

    def ansatz(self) -> DirichletAnsatz:
        a = self.record["ansatz"]
        return DirichletAnsatz(a["kind"], tuple(a.get("coeffs", ())), float(a.get("constant", 0.0)),
                               tuple(a.get("offset", ())))

    def distribution(self) -> ParameterDistribution:
        d = self.record["distribution"]
        mean = tuple(d["mean"]) if d["mean"] else None
        cov = tuple(tuple(r) for r in d["cov"]) if d["cov"] else None
        return ParameterDistribution(d["kind"], tuple(d["low"]), tuple(d["high"]), mean, cov,
                                     seed=self.seed)

    def schedule(self) -> TrainSchedule:
        s = self.record["schedule"]
        return TrainSchedule(adam_epochs=s["adam_epochs"], lbfgs_epochs=s["lbfgs_epochs"],
                             lr=float(s["lr"]), lbfgs_iters=s["lbfgs_iters"], m_hist=s["m_hist"])

    def build_problem(self, counts=None) -> Problem:
        return Problem(self.architecture(), self.domain(counts), self.ansatz(), self.energy_model())

    def objective(self, problem=None) -> ExpectedEnergy:
        problem = problem or self.build_problem()
        s = self.record["schedule"]
        return ExpectedEnergy(problem, self.distribution(), s["n_samples"], s["n_frozen"])

    # --- validation ----------------------------------------------------
    def validate(self):
        rec = self.record
        _check(isinstance(rec["seed"], int) and not isinstance(rec["seed"], bool) and rec["seed"] >= 0,
               "seed", f"must be a non-negative integer, got {rec['seed']!r}")
        _check(isinstance(rec["out"], str) and rec["out"], "out", "must be a non-empty path")
        for key in ("L", "A"):
            _real(rec, "geometry", key, positive=True)
        if self.dim >= 2:
            _real(rec, "geometry", "H", positive=True)
        if self.dim == 3:
            _real(rec, "geometry", "W", positive=True)

        counts = rec["grid"]["counts"]
        _check(isinstance(counts, list) and len(counts) == self.dim, "grid.counts",
               f"must list {self.dim} integers")
        _check(all(isinstance(c, int) and c >= 2 for c in counts), "grid.counts",
               f"every count must be an integer >= 2, got {counts}")

        s = "schedule"
        for key in ("adam_epochs", "lbfgs_epochs"):
            _positive_int(rec, s, key, minimum=0)
        _check(rec[s]["adam_epochs"] + rec[s]["lbfgs_epochs"] > 0, s,
               "adam_epochs + lbfgs_epochs must be positive")
        for key in ("lbfgs_iters", "n_samples", "n_frozen", "m_hist"):
            _positive_int(rec, s, key)
        _real(rec, s, "lr", positive=True)
        _positive_int(rec, "validate", "n_eta")
        _positive_int(rec, "finetune", "steps", minimum=0)

        d = rec["distribution"]
        p = len(rec["material"]["params"])
        _check(len(d["low"]) == p and len(d["high"]) == p, "distribution.low/high",
               f"must have {p} entries, one per material parameter")
        _real(rec, "network", "output_scale", positive=True)
        _check(rec["loading"]["body_force"] in ("none", "x1"), "loading.body_force",
               "must be 'none' or 'x1'")

        # delegate the rest to the owning modules, tagging the section
        for section, build in (("distribution", self.distribution), ("network", self.architecture),
                               ("material", self.energy_model), ("ansatz", self.ansatz),
                               ("grid", self.domain), ("schedule", self.schedule)):
            try:
                build()
            except ConfigError as exc:
                raise ConfigError(f"{section}: {exc}") from None
            except (TypeError, KeyError, ValueError) as exc:
                raise ConfigError(f"{section}: {exc}") from None
        model = self.energy_model()
        for corner in (d["low"], d["high"]):
            try:
                model.validate_eta(corner)
            except ConfigError as exc:
                raise ConfigError(f"distribution: box corner {corner}: {exc}") from None
        try:
            self.build_problem()
        except ConfigError as exc:
            raise ConfigError(f"problem assembly: {exc}") from None


def reference_toml() -> str:
    """Documented defaults for every problem, as TOML text."""
    lines = ["# Defaults per problem. A run config sets `problem` and overrides any field.", ""]
    for name in PROBLEMS:
        lines.append(f"# --- problem = \"{name}\"")
        for section, table in PRESETS[name].items():
            lines.append(f"# [{section}]")
            for key, value in table.items():
                lines.append(f"#   {key} = {json.dumps(value)}")
        lines.append("")
    return "\n".join(lines)
