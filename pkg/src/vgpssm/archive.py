"""Versioned model archives with bit-exact float encoding.

An archive is a JSON document.  Every float is written with
:meth:`float.hex`, so loading reproduces all numeric fields exactly.
Files are written to a temporary sibling and renamed into place.
"""

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigurationError, InvalidArgumentError
from .kernels import KernelSpec
from .model import GpssmModel, LikelihoodSpec
from .sparse import InducingPosterior
from .training import TrainingState

FORMAT_VERSION = 1
FORMAT_NAME = "vgpssm-archive"


class ArchiveError(ConfigurationError):
    """Unreadable, corrupt or incompatible archive."""


def encode_array(a):
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "hex": [float(v).hex() for v in a.ravel()]}


def decode_array(obj):
    try:
        flat = [float.fromhex(v) for v in obj["hex"]]
        return np.array(flat, dtype=float).reshape(obj["shape"])
    except (KeyError, TypeError, ValueError) as err:
        raise ArchiveError(f"bad array encoding: {err}") from None


def _opt(a):
    return None if a is None else encode_array(a)


def _unopt(obj):
    return None if obj is None else decode_array(obj)


def encode_model(model):
    k, lik = model.kernel, model.likelihood
    return {
        "kernel": {
            "family": k.family,
            "lengthscales": encode_array(k.lengthscales),
            "signal_variance": float(k.signal_variance).hex(),
        },
        "likelihood": {
            "family": lik.family,
            "noise_variance": _opt(lik.noise_variance if lik.family == "gaussian" else None),
            "emission": _opt(lik.emission),
            "alpha": _opt(lik.alpha if lik.family == "poisson" else None),
            "beta": float(lik.beta).hex(),
            "observed_state_index": int(lik.observed_state_index),
        },
        "process_noise": encode_array(model.process_noise),
        "inducing_inputs": encode_array(model.inducing_inputs),
        "x0_mean": encode_array(model.x0_mean),
        "x0_var": encode_array(model.x0_var),
        "structure": model.structure,
        "dt": float(model.dt).hex(),
    }


def decode_model(obj):
    k, lik = obj["kernel"], obj["likelihood"]
    kernel = KernelSpec(k["family"], decode_array(k["lengthscales"]),
                        float.fromhex(k["signal_variance"]))
    if lik["family"] == "gaussian":
        likelihood = LikelihoodSpec.gaussian(decode_array(lik["noise_variance"]),
                                             _unopt(lik["emission"]))
    else:
        likelihood = LikelihoodSpec.poisson(decode_array(lik["alpha"]),
                                            float.fromhex(lik["beta"]),
                                            lik["observed_state_index"])
    return GpssmModel(
        kernel=kernel,
        process_noise=decode_array(obj["process_noise"]),
        likelihood=likelihood,
        inducing_inputs=decode_array(obj["inducing_inputs"]),
        x0_mean=decode_array(obj["x0_mean"]),
        x0_var=decode_array(obj["x0_var"]),
        structure=obj["structure"],
        dt=float.fromhex(obj["dt"]),
    )


def encode_posterior(q_u):
    return {name: encode_array(getattr(q_u, name)) for name in ("eta1", "eta2", "mu", "sigma")}


def decode_posterior(obj):
    return InducingPosterior(*(decode_array(obj[n]) for n in ("eta1", "eta2", "mu", "sigma")))


def _encode_optimizer(opt):
    if opt is None:
        return None
    return {"t": opt["t"],
            "m": {k: encode_array(v) for k, v in opt["m"].items()},
            "v": {k: encode_array(v) for k, v in opt["v"].items()}}


def _decode_optimizer(obj):
    if obj is None:
        return None
    return {"t": obj["t"],
            "m": {k: decode_array(v) for k, v in obj["m"].items()},
            "v": {k: decode_array(v) for k, v in obj["v"].items()}}


def data_hash(y):
    """Short digest of an observation array."""
    y = np.ascontiguousarray(np.asarray(y, dtype=float))
    h = hashlib.sha256(str(y.shape).encode())
    h.update(y.tobytes())
    return h.hexdigest()[:16]


@dataclass
class ModelArchive:
    """A trained model, its ``q(u)`` and the provenance of the run."""

    state: TrainingState
    provenance: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def model(self):
        return self.state.model

    @property
    def q_u(self):
        return self.state.q_u

    def to_json(self):
        s = self.state
        doc = {
            "format": FORMAT_NAME,
            "format_version": self.format_version,
            "model": encode_model(s.model),
            "q_u": encode_posterior(s.q_u),
            "training": {
                "iteration": int(s.iteration),
                "converged": bool(s.converged),
                "elbo_trace": [float(v).hex() for v in s.elbo_trace],
                "ess_trace": [float(v).hex() for v in s.ess_trace],
                "rng_state": s.rng_state,
                "filter_particles": _opt(s.filter_particles),
                "optimizer_state": _encode_optimizer(s.optimizer_state),
            },
            "provenance": self.provenance,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as err:
            raise ArchiveError(f"archive is not valid JSON: {err}") from None
        if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
            raise ArchiveError("not a model archive")
        if doc.get("format_version") != FORMAT_VERSION:
            raise ArchiveError(
                f"archive format version {doc.get('format_version')} is not supported "
                f"(expected {FORMAT_VERSION})")
        try:
            tr = doc["training"]
            state = TrainingState(
                model=decode_model(doc["model"]),
                q_u=decode_posterior(doc["q_u"]),
                iteration=int(tr["iteration"]),
                elbo_trace=[float.fromhex(v) for v in tr["elbo_trace"]],
                ess_trace=[float.fromhex(v) for v in tr["ess_trace"]],
                rng_state=tr["rng_state"],
                filter_particles=_unopt(tr["filter_particles"]),
                converged=bool(tr["converged"]),
                optimizer_state=_decode_optimizer(tr["optimizer_state"]),
            )
        except (KeyError, TypeError, ValueError, InvalidArgumentError) as err:
            raise ArchiveError(f"corrupt archive: {err}") from None
        return cls(state, doc.get("provenance", {}), FORMAT_VERSION)


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_archive(archive, path):
    atomic_write_text(path, archive.to_json())


def load_archive(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as err:
        raise ArchiveError(f"cannot read archive {path}: {err}") from None
    return ModelArchive.from_json(text)
