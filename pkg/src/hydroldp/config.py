"""Experiment configuration files.

Configurations are TOML documents with these tables::

    seed = 7                  # required by every stochastic task
    out = "runs/demo"         # output directory (the CLI --out flag overrides it)

    [model]                   # kind, n and the model parameters
    [noise]                   # covariance spectrum and noise intensity
    [integrator]              # dt, eps, T, blowup_cap, save_stride
    [initial]                 # initial state
    [task]                    # name plus task parameters
    [task.event]              # terminal event (action-min, mc-ldp)

Every key is checked: unknown keys and keys that do not apply to the chosen
kind are errors.  Omitted keys take the defaults below and are listed in the
run manifest, so a manifest together with its configuration reproduces a
run.

Tilted sampling convention: with ``tilt = "auto"`` the minimizing control
``h*`` is added to the drift as ``sigma h* dt`` while the noise stays
``sqrt(eps) sigma dW``; the weight is the Girsanov density of the Brownian
shift ``h* / sqrt(eps)``.
"""
from __future__ import annotations

import copy
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .galerkin import IntegratorConfig
from .ldp import ActionProblem, Event
from .models import RTilde, make_model, Model
from .noise import ControlPath, CovarianceSpec, Rho, SigmaSpec

TASKS = ("check-conditions", "simulate", "skeleton", "action-min", "mc-ldp", "increment-stat", "weak-scan")

REQUIRED = object()

MODEL_KEYS = {
    "common": {"kind": REQUIRED, "n": REQUIRED, "shift": False, "rotation": 0.0},
    "goy": {"nu": 1.0, "k0": 1.0, "mu": 2.0, "a": 1.0, "b": -0.5},
    "sabra": {"nu": 1.0, "k0": 1.0, "mu": 2.0, "a": 1.0, "b": -0.5},
    "dyadic": {"nu": 1.0, "lam": 2.0, "alpha": 1.0},
    "nse2d": {"nu": 1.0},
    "linear": {"weights": REQUIRED},
}

NOISE_KEYS = {
    "common": {"K": 8, "spectrum": "power_law", "sigma": "additive", "scale": 1.0},
    "power_law": {"exponent": 2.0},
    "explicit": {"q": REQUIRED},
    "additive": {},
    "diagonal": {"rho_intercept": 1.0, "rho_slope": 0.0, "rho_cap": 1.0},
    "time_modulated": {"c_mod": 0.0, "gamma": 1.0},
}

INTEGRATOR_KEYS = {"dt": 1e-3, "eps": 0.0, "T": 1.0, "blowup_cap": 1e6, "save_stride": 1}

INITIAL_KEYS = {
    "common": {"kind": "zeros"},
    "zeros": {},
    "basis": {"mode": 0, "amplitude": 1.0},
    "values": {"values": REQUIRED},
    "random": {"amplitude": 1.0},
}

_ACTION_KEYS = {
    "n_cells": 32,
    "mu_schedule": [10.0, 100.0, 1e3, 1e4],
    "restarts": 1,
    "max_iter": 2000,
    "violation_tol": 1e-3,
}

TASK_KEYS = {
    "check-conditions": {"n_samples": 200},
    "simulate": {"n_reps": 1, "record_noise": False},
    "skeleton": {"control": None, "h": None, "budget": None},
    "action-min": dict(_ACTION_KEYS),
    "mc-ldp": dict(_ACTION_KEYS, eps_list=REQUIRED, n_samples=1000, tilt="auto"),
    "increment-stat": {"n_reps": 200, "levels": [2, 3, 4, 5, 6], "quantile": 0.9, "N": None, "c": None},
    "weak-scan": {"eps_list": REQUIRED, "n_reps": 100, "control": None, "h": None},
}

EVENT_KEYS = {
    "common": {"kind": REQUIRED},
    "halfspace": {"direction": REQUIRED, "threshold": REQUIRED},
    "point": {"target": REQUIRED, "radius": 0.0},
    "free": {},
}

# tasks that draw random numbers; simulate and weak-scan only when eps > 0
STOCHASTIC_TASKS = ("check-conditions", "mc-ldp", "increment-stat", "weak-scan")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass
class ExperimentConfig:
    task: str
    seed: int | None
    out: str
    model: dict
    noise: dict
    integrator: dict
    initial: dict
    params: dict
    event: dict | None = None
    defaults_applied: list = field(default_factory=list)
    source: str | None = None

    # -- echo -----------------------------------------------------------
    def as_dict(self) -> dict:
        d = dict(
            task=self.task, seed=self.seed, out=self.out, model=self.model, noise=self.noise,
            integrator=self.integrator, initial=self.initial, params=self.params,
        )
        if self.event is not None:
            d["event"] = self.event
        return copy.deepcopy(d)

    # -- builders -------------------------------------------------------
    def build_model(self) -> Model:
        m = dict(self.model)
        kind, n = m.pop("kind"), m.pop("n")
        shift, rotation = m.pop("shift"), m.pop("rotation")
        complex_state = kind in ("goy", "sabra", "nse2d")
        r = RTilde.rotation(rotation, n, complex_state) if rotation else None
        if r is not None and kind == "nse2d":
            raise ConfigError("model.rotation: rotation-type R~ is not available for nse2d")
        try:
            return make_model(kind, n, shift=shift, r_tilde=r, **m)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"model: {exc}") from None

    def build_noise(self, model: Model) -> tuple[CovarianceSpec, SigmaSpec]:
        c = self.noise
        K = c["K"]
        cap = 2 * model.n if model.complex_state and model.kind != "nse2d" else model.n
        if K > cap:
            raise ConfigError(f"noise.K = {K} exceeds the {cap} available noise directions of this model")
        if c["spectrum"] == "power_law":
            cov = CovarianceSpec.power_law(K, c["exponent"])
        else:
            q = np.asarray(c["q"], dtype=float)
            if q.size != K:
                raise ConfigError(f"noise.q has {q.size} entries but noise.K = {K}")
            try:
                cov = CovarianceSpec(q)
            except ValueError as exc:
                raise ConfigError(f"noise.q: {exc}") from None
        phi = c["scale"] * model.noise_basis(K)
        try:
            if c["sigma"] == "additive":
                s = SigmaSpec("additive", phi)
            elif c["sigma"] == "diagonal":
                rho = Rho("clipped_linear", c["rho_intercept"], c["rho_slope"], c["rho_cap"])
                s = SigmaSpec("diagonal", phi, rho=rho)
            else:
                s = SigmaSpec("time_modulated", phi, c_mod=c["c_mod"], gamma=c["gamma"])
        except ValueError as exc:
            raise ConfigError(f"noise: {exc}") from None
        return cov, s

    def build_integrator(self, eps: float | None = None, save_stride: int | None = None) -> IntegratorConfig:
        c = self.integrator
        try:
            cfg = IntegratorConfig(
                c["dt"], c["eps"] if eps is None else eps, c["blowup_cap"],
                c["save_stride"] if save_stride is None else save_stride,
            )
            cfg.n_steps(c["T"])
        except ValueError as exc:
            raise ConfigError(f"integrator: {exc}") from None
        return cfg

    @property
    def T(self) -> float:
        return float(self.integrator["T"])

    def build_initial(self, model: Model) -> np.ndarray:
        c = self.initial
        kind = c["kind"]
        if kind == "zeros":
            return model.zeros()
        if kind == "basis":
            if not 0 <= c["mode"] < model.n:
                raise ConfigError(f"initial.mode = {c['mode']} is outside 0..{model.n - 1}")
            u = c["amplitude"] * model.basis_vector(c["mode"])
            if model.kind == "nse2d":
                u[model.partner[c["mode"]]] = c["amplitude"]
            return u
        if kind == "random":
            if self.seed is None:
                raise ConfigError("seed: a random initial state needs a seed")
            rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(2**31,)))
            return c["amplitude"] * model.random_state(rng)
        u = _vector(c["values"], "initial.values", model)
        return u

    def build_event(self, model: Model) -> Event:
        if self.event is None:
            raise ConfigError(f"task.event: task {self.task!r} needs a [task.event] table")
        e = self.event
        if e["kind"] == "halfspace":
            return Event.halfspace(_vector(e["direction"], "task.event.direction", model), e["threshold"])
        if e["kind"] == "point":
            return Event.point(_vector(e["target"], "task.event.target", model), e["radius"])
        return Event("free")

    def build_control(self, cov: CovarianceSpec) -> ControlPath | None:
        p = self.params
        if p.get("control") is not None and p.get("h") is not None:
            raise ConfigError("task.control and task.h are mutually exclusive")
        budget = p.get("budget")
        if p.get("control") is not None:
            path = Path(p["control"])
            if not path.is_absolute() and self.source is not None:
                path = Path(self.source).parent / path
            try:
                h = ControlPath.load(path, budget)
            except (OSError, ValueError) as exc:
                raise ConfigError(f"task.control: {exc}") from None
        elif p.get("h") is not None:
            v = np.asarray(p["h"], dtype=float)
            try:
                h = ControlPath.constant(v, self.T, 1, budget)
            except ValueError as exc:
                raise ConfigError(f"task.h: {exc}") from None
        else:
            return None
        if h.K != cov.K:
            raise ConfigError(f"task control has {h.K} coordinates but noise.K = {cov.K}")
        if abs(h.T - self.T) > 1e-9 * max(1.0, self.T):
            raise ConfigError(f"task control horizon {h.T} differs from integrator.T = {self.T}")
        return h

    def build_problem(self) -> ActionProblem:
        m = self.build_model()
        cov, s = self.build_noise(m)
        self.build_integrator()
        p = self.params
        try:
            return ActionProblem(
                m, s, cov, self.build_initial(m), self.T, self.build_event(m),
                dt=self.integrator["dt"], n_cells=p["n_cells"], mu_schedule=tuple(p["mu_schedule"]),
                max_iter=p["max_iter"], violation_tol=p["violation_tol"], restarts=p["restarts"],
                seed=0 if self.seed is None else self.seed, blowup_cap=self.integrator["blowup_cap"],
            )
        except ValueError as exc:
            raise ConfigError(f"task: {exc}") from None


def _vector(raw, key, model: Model) -> np.ndarray:
    """Real list, or list of ``[re, im]`` pairs for complex models."""
    try:
        arr = np.asarray(raw, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected a list of numbers or [re, im] pairs") from None
    if arr.ndim == 2 and arr.shape[1] == 2:
        if not model.complex_state:
            raise ConfigError(f"{key}: complex entries for a real-valued model")
        arr = arr[:, 0] + 1j * arr[:, 1]
    elif arr.ndim != 1:
        raise ConfigError(f"{key}: expected a list of numbers or [re, im] pairs")
    if arr.size != model.n:
        raise ConfigError(f"{key}: {arr.size} entries for a model with {model.n} modes")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(f"{key}: entries must be finite")
    return arr.astype(model.dtype)


def _typecheck(key, value, default):
    if default is REQUIRED or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true or false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return value


def _fill(section: str, table: dict, schema: dict, defaults_applied: list) -> dict:
    unknown = sorted(set(table) - set(schema))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    out = {}
    for key, default in schema.items():
        full = f"{section}.{key}"
        if key in table:
            out[key] = _typecheck(full, table[key], default)
        elif default is REQUIRED:
            raise ConfigError(f"missing required key {full}")
        else:
            out[key] = copy.deepcopy(default)
            defaults_applied.append(full)
    return out


def _two_level(section, table, schema, selector, defaults_applied, kind_default=None):
    if not isinstance(table, dict):
        raise ConfigError(f"[{section}] must be a table")
    kind = table.get(selector, kind_default)
    if kind is None:
        raise ConfigError(f"missing required key {section}.{selector}")
    if kind not in schema:
        choices = ", ".join(k for k in schema if k != "common")
        raise ConfigError(f"{section}.{selector}: unknown value {kind!r} (expected one of {choices})")
    merged = dict(schema["common"], **schema[kind])
    return _fill(section, table, merged, defaults_applied)


def _positive(key, v):
    if not v > 0:
        raise ConfigError(f"{key} must be positive (got {v})")


def parse_config_text(text: str, source: str | None = None, task: str | None = None) -> ExperimentConfig:
    """Parse configuration text; ``task`` supplies the task name when the file has none."""
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        where = f"{source}: " if source else ""
        raise ConfigError(f"{where}parse error: {exc}") from None
    defaults: list = []
    top_allowed = {"seed", "out", "model", "noise", "integrator", "initial", "task"}
    unknown = sorted(set(raw) - top_allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    if "model" not in raw:
        raise ConfigError("missing [model] table")

    model = _two_level("model", raw["model"], MODEL_KEYS, "kind", defaults)
    if model["kind"] == "linear":
        w = model["weights"]
        model["weights"] = [float(x) for x in (w if isinstance(w, list) else [w])]
    if not isinstance(model["n"], int) or isinstance(model["n"], bool) or model["n"] < 1:
        raise ConfigError(f"model.n must be a positive integer (got {model['n']!r})")
    if "nu" in model:
        _positive("model.nu", model["nu"])
    if model["kind"] in ("goy", "sabra") and not model["mu"] > 1:
        raise ConfigError(f"model.mu must be > 1 for {model['kind']} (got {model['mu']})")
    if model["kind"] == "dyadic":
        if not model["lam"] > 1:
            raise ConfigError(f"model.lam must be > 1 (got {model['lam']})")
        if not model["alpha"] >= 0.5:
            raise ConfigError(f"model.alpha must be >= 1/2 (got {model['alpha']})")

    noise = raw.get("noise", {})
    if not isinstance(noise, dict):
        raise ConfigError("[noise] must be a table")
    spectrum = noise.get("spectrum", "power_law")
    sigma = noise.get("sigma", "additive")
    for key, val, sch in (("spectrum", spectrum, ("power_law", "explicit")), ("sigma", sigma, ("additive", "diagonal", "time_modulated"))):
        if val not in sch:
            raise ConfigError(f"noise.{key}: unknown value {val!r} (expected one of {', '.join(sch)})")
    noise_schema = dict(NOISE_KEYS["common"], **NOISE_KEYS[spectrum], **NOISE_KEYS[sigma])
    noise = _fill("noise", noise, noise_schema, defaults)
    if noise["K"] < 1:
        raise ConfigError(f"noise.K must be >= 1 (got {noise['K']})")

    integ = _fill("integrator", raw.get("integrator", {}), INTEGRATOR_KEYS, defaults)
    _positive("integrator.dt", integ["dt"])
    _positive("integrator.T", integ["T"])
    _positive("integrator.blowup_cap", integ["blowup_cap"])
    if integ["eps"] < 0:
        raise ConfigError(f"integrator.eps must be >= 0 (got {integ['eps']})")
    if integ["save_stride"] < 1:
        raise ConfigError("integrator.save_stride must be >= 1")

    initial = _two_level("initial", raw.get("initial", {}), INITIAL_KEYS, "kind", defaults, kind_default="zeros")

    task_tbl = dict(raw.get("task", {}))
    if not isinstance(raw.get("task", {}), dict):
        raise ConfigError("[task] must be a table")
    name = task_tbl.pop("name", None)
    if name is None:
        name = task
    elif task is not None and task != name:
        raise ConfigError(f"task.name is {name!r} but the command asks for {task!r}")
    if name is None:
        raise ConfigError("missing task.name")
    if name not in TASKS:
        raise ConfigError(f"task.name: unknown task {name!r} (expected one of {', '.join(TASKS)})")
    event_raw = task_tbl.pop("event", None)
    params = _fill("task", task_tbl, TASK_KEYS[name], defaults)
    event = None
    if name in ("action-min", "mc-ldp"):
        if event_raw is None:
            raise ConfigError(f"task {name!r} needs a [task.event] table")
        event = _two_level("task.event", event_raw, EVENT_KEYS, "kind", defaults)
    elif event_raw is not None:
        raise ConfigError(f"task.event does not apply to task {name!r}")
    if "eps_list" in params:
        eps = params["eps_list"]
        if not isinstance(eps, list) or not eps or any(not isinstance(e, (int, float)) or e <= 0 for e in eps):
            raise ConfigError("task.eps_list must be a nonempty list of positive numbers")
        if any(b >= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("task.eps_list must be strictly decreasing")
        params["eps_list"] = [float(e) for e in eps]
    if name == "mc-ldp" and params["tilt"] not in ("auto", "none"):
        raise ConfigError(f"task.tilt must be 'auto' or 'none' (got {params['tilt']!r})")
    if name == "increment-stat" and not 0 < params["quantile"] <= 1:
        raise ConfigError("task.quantile must lie in (0, 1]")
    for key in ("n_samples", "n_reps", "n_cells"):
        if key in params and params[key] < 1:
            raise ConfigError(f"task.{key} must be >= 1")

    seed = raw.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int) or seed < 0):
        raise ConfigError(f"seed must be a nonnegative integer (got {seed!r})")
    out = raw.get("out")
    if out is None:
        out = "hydroldp_out"
        defaults.append("out")
    elif not isinstance(out, str):
        raise ConfigError("out must be a string")
    cfg = ExperimentConfig(name, seed, out, model, noise, integ, initial, params, event, defaults, source)
    check_seed(cfg)
    return cfg


def check_seed(cfg: ExperimentConfig):
    stochastic = cfg.task in STOCHASTIC_TASKS or (cfg.task == "simulate" and cfg.integrator["eps"] > 0)
    if stochastic and cfg.seed is None:
        raise ConfigError(f"seed is required for task {cfg.task!r}")


def parse_config(path, task: str | None = None) -> ExperimentConfig:
    """Read and validate a configuration file, filling defaults."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config_text(text, str(path), task)
