"""Run configuration: JSON schema with defaults and field-path diagnostics."""

import copy
import json

from .exceptions import ConfigurationError
from .smoothing import GridSpec
from .training import THETA_GROUPS, PowerSchedule, TrainingConfig

_ANY_NUMBER = (int, float)

DEFAULTS = {
    "model": {
        "state_dim": 1,
        "n_inducing": 15,
        "kernel": "matern32",
        "likelihood": "gaussian",
        "structure": "free",
        "dt": 1.0,
    },
    "training": {
        "mode": "batch",
        "n_particles": 1000,
        "lag": 10,
        "segment_length": None,
        "segments_per_iter": 1,
        "rho": {"scale": 1.0, "offset": 1.0, "exponent": 0.7},
        "lam": {"scale": 0.3, "offset": 1.0, "exponent": 0.51},
        "optimizer": "adam",
        "max_iters": 150,
        "min_iters": 20,
        "tol": 1e-4,
        "window": 5,
        "seed": 0,
        "learn": list(THETA_GROUPS),
        "max_step": 0.5,
        "preliminary_pass": True,
        "smoother": "particle",
        "grid": None,
    },
    "simulate": {
        "system": "kink",
        "T": 500,
        "n_trajectories": 1,
        "seed": 0,
        "prior": {
            "lengthscales": [1.0],
            "signal_variance": 1.0,
            "process_noise": 0.01,
            "noise_variance": 0.1,
        },
    },
    "predict": {
        "x_star": None,
        "grid": None,
        "rollout": None,
    },
    "eval": {
        "n_test": 10000,
        "test_seed": None,
        "max_rmse": None,
        "min_loglik": None,
    },
    "online": {
        "segment_length": 100,
    },
}

# Fields whose value is free-form (lists, nested specs, or None defaults).
_OPEN = {
    "training.segment_length": (int, type(None)),
    "training.grid": (dict, type(None)),
    "training.learn": (list,),
    "simulate.prior.lengthscales": (list, int, float),
    "simulate.prior.process_noise": (list, int, float),
    "simulate.prior.noise_variance": (list, int, float),
    "predict.x_star": (list, type(None)),
    "predict.grid": (dict, type(None)),
    "predict.rollout": (dict, type(None)),
    "eval.test_seed": (int, type(None)),
    "eval.max_rmse": (int, float, type(None)),
    "eval.min_loglik": (int, float, type(None)),
}


def _merge(defaults, user, path):
    out = copy.deepcopy(defaults)
    if not isinstance(user, dict):
        raise ConfigurationError(f"{path or 'config'}: expected an object")
    for key, value in user.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigurationError(f"{here}: unknown field")
        default = defaults[key]
        if here in _OPEN:
            ok = isinstance(value, _OPEN[here]) and not isinstance(value, bool)
            if not ok:
                raise ConfigurationError(f"{here}: unexpected type {type(value).__name__}")
            out[key] = value
        elif isinstance(default, dict):
            out[key] = _merge(default, value, here)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigurationError(f"{here}: expected true or false")
            out[key] = value
        elif isinstance(default, float):
            if not isinstance(value, _ANY_NUMBER) or isinstance(value, bool):
                raise ConfigurationError(f"{here}: expected a number")
            out[key] = float(value)
        elif isinstance(default, int):
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigurationError(f"{here}: expected an integer")
            out[key] = value
        elif isinstance(default, str):
            if not isinstance(value, str):
                raise ConfigurationError(f"{here}: expected a string")
            out[key] = value
        else:
            out[key] = value
    return out


def load_config(path=None, text=None):
    """Merge a JSON config (file ``path`` or string ``text``) into the defaults."""
    if path is None and text is None:
        return copy.deepcopy(DEFAULTS)
    if text is None:
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as err:
            raise ConfigurationError(f"cannot read config {path}: {err}") from None
    try:
        user = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"config is not valid JSON: line {err.lineno}: {err.msg}") from None
    return _merge(DEFAULTS, user, "")


def dump_defaults():
    return json.dumps(DEFAULTS, indent=2)


def _schedule(cfg, path):
    try:
        return PowerSchedule(float(cfg["scale"]), float(cfg["offset"]), float(cfg["exponent"]))
    except (TypeError, ValueError) as err:
        raise ConfigurationError(f"{path}: {err}") from None


def training_config(cfg):
    """Build a :class:`TrainingConfig` from the ``training`` section."""
    t = cfg["training"]
    grid = None
    if t["grid"] is not None:
        try:
            grid = GridSpec(t["grid"]["lower"], t["grid"]["upper"], int(t["grid"]["n"]))
        except (KeyError, TypeError, ValueError) as err:
            raise ConfigurationError(f"training.grid: {err}") from None
    for name in ("n_particles", "lag", "max_iters", "min_iters", "window", "segments_per_iter"):
        if t[name] < 1:
            raise ConfigurationError(f"training.{name}: must be positive")
    if t["tol"] < 0:
        raise ConfigurationError("training.tol: must be non-negative")
    try:
        return TrainingConfig(
            mode=t["mode"],
            n_particles=t["n_particles"],
            lag=t["lag"],
            segment_length=t["segment_length"],
            segments_per_iter=t["segments_per_iter"],
            rho=_schedule(t["rho"], "training.rho"),
            lam=_schedule(t["lam"], "training.lam"),
            optimizer=t["optimizer"],
            max_iters=t["max_iters"],
            min_iters=t["min_iters"],
            tol=t["tol"],
            window=t["window"],
            seed=t["seed"],
            learn=tuple(t["learn"]),
            smoother=t["smoother"],
            grid=grid,
            preliminary_pass=t["preliminary_pass"],
            max_step=t["max_step"],
        )
    except ConfigurationError as err:
        raise ConfigurationError(f"training: {err}") from None
