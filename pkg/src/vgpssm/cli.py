"""Command-line interface: simulate, train, predict, eval and online.

Exit codes: 0 success, 2 usage or configuration error, 3 data error,
4 numerical failure, 5 evaluation threshold violated.
"""

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__
from .archive import ArchiveError, ModelArchive, atomic_write_text, data_hash, load_archive, save_archive
from .benchmark import (
    BenchmarkReport,
    config_fingerprint,
    kink_system_generate,
    transition_metrics,
    transition_pairs,
)
from .config import dump_defaults, load_config, training_config
from .exceptions import (
    ConfigurationError,
    DegenerateWeightsError,
    InvalidArgumentError,
    NumericalError,
    ResourceError,
    SingularMatrixError,
)
from .kernels import KernelSpec
from .model import GpssmModel, LikelihoodSpec, sample_prior_trajectory
from .smoothing import ParticleTrajectories
from .sparse import TransitionPredictor, rollout
from .training import initialize_model, online_update, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL, EXIT_THRESHOLD = 0, 2, 3, 4, 5


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class ThresholdError(Exception):
    pass


# -- CSV ingestion -----------------------------------------------------------------


def parse_csv_rows(path, prefix=None):
    """Parse a headered numeric CSV.

    Returns ``(header, rows)`` where ``rows`` is a list of
    ``(line_number, values)``; ``values`` is a string describing the problem
    for rows that cannot be used.
    """
    try:
        fh = open(path, newline="")
    except OSError as err:
        raise DataError(f"{path}: {err.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        if prefix is not None:
            bad = [h for h in header if not h.startswith(prefix)]
            if bad:
                raise DataError(f"{path}:1: expected columns named {prefix}1..{prefix}{len(header)}, "
                                f"got {bad[0]!r}")
        rows = []
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                rows.append((line, f"expected {len(header)} fields, found {len(row)}"))
                continue
            try:
                values = [float(c) for c in row]
            except ValueError:
                rows.append((line, "non-numeric value"))
                continue
            if not all(math.isfinite(v) for v in values):
                rows.append((line, "non-finite value"))
                continue
            rows.append((line, values))
    return header, rows


def read_matrix(path, prefix=None):
    """Numeric CSV as an (n, k) array; any bad row is a :class:`DataError`."""
    header, rows = parse_csv_rows(path, prefix)
    for line, values in rows:
        if isinstance(values, str):
            raise DataError(f"{path}:{line}: {values}")
    if not rows:
        return np.empty((0, len(header)))
    return np.array([v for _, v in rows], dtype=float)


def write_csv(path, header, data):
    lines = [",".join(header)]
    for row in np.atleast_2d(data):
        lines.append(",".join(repr(float(v)) for v in row))
    text = "\n".join(lines) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        atomic_write_text(path, text)


def _names(prefix, k):
    return [f"{prefix}{i + 1}" for i in range(k)]


# -- commands -------------------------------------------------------------------------


def _prior_model(cfg):
    m, p = cfg["model"], cfg["simulate"]["prior"]
    D = m["state_dim"]
    ell = np.broadcast_to(np.asarray(p["lengthscales"], dtype=float), (D,))
    n_out = D if m["structure"] == "free" else 1
    R = np.broadcast_to(np.asarray(p["noise_variance"], dtype=float), (D,))
    return GpssmModel(
        kernel=KernelSpec(m["kernel"], ell, p["signal_variance"]),
        process_noise=np.broadcast_to(np.asarray(p["process_noise"], dtype=float), (n_out,)),
        likelihood=LikelihoodSpec.gaussian(R.copy()),
        inducing_inputs=np.zeros((1, D)),
        structure=m["structure"],
        dt=m["dt"],
    )


def cmd_simulate(args, cfg):
    s = cfg["simulate"]
    T, n = s["T"], s["n_trajectories"]
    if T < 1:
        raise UsageError("simulate.T: must be at least 1")
    if n < 1:
        raise UsageError("simulate.n_trajectories: must be at least 1")
    seed = s["seed"] if args.seed is None else args.seed
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    written = []
    for k in range(n):
        if s["system"] == "kink":
            traj = kink_system_generate(T, seed + k)
        elif s["system"] == "prior":
            traj = sample_prior_trajectory(_prior_model(cfg), T, seed + k)
        else:
            raise UsageError("simulate.system: must be 'kink' or 'prior'")
        D, E = traj.states.shape[1], traj.observations.shape[1]
        sp = os.path.join(out, f"states_{k}.csv")
        op = os.path.join(out, f"observations_{k}.csv")
        write_csv(sp, _names("x", D), traj.states)
        write_csv(op, _names("y", E), traj.observations)
        written += [sp, op]
    print(json.dumps({"written": written}))


def _progress(record):
    print(json.dumps(record), flush=True)


def cmd_train(args, cfg):
    if not args.data:
        raise UsageError("train needs --data")
    out = args.out or args.archive
    if not out:
        raise UsageError("train needs --out or --archive")
    y = read_matrix(args.data, "y")
    if len(y) < 2:
        raise DataError(f"{args.data}: need at least 2 observation rows")
    if args.seed is not None:
        cfg["training"]["seed"] = args.seed
    config = training_config(cfg)
    m = cfg["model"]
    digest = data_hash(y)
    if args.resume:
        if not args.archive:
            raise UsageError("--resume needs --archive")
        archive = load_archive(args.archive)
        if archive.provenance.get("data_hash") not in (None, digest):
            raise DataError("--resume data differs from the data the archive was trained on")
        state = train(y, config, state=archive.state, callback=_progress)
    else:
        init = initialize_model(y, m["state_dim"], m["n_inducing"], m["kernel"], m["likelihood"],
                                m["structure"], m["dt"])
        state = train(y, config, init=init, callback=_progress)
    provenance = {
        "config_fingerprint": config_fingerprint(asdict(config)),
        "data_hash": digest,
        "seeds": [config.seed],
        "elbo_trace_tail": state.elbo_trace[-10:],
        "converged": state.converged,
        "version": __version__,
    }
    save_archive(ModelArchive(state, provenance), out)


def _grid_points(grid, D):
    try:
        lo = np.broadcast_to(np.asarray(grid["lower"], dtype=float), (D,))
        hi = np.broadcast_to(np.asarray(grid["upper"], dtype=float), (D,))
        n = int(grid["n"])
    except (KeyError, TypeError, ValueError) as err:
        raise UsageError(f"predict.grid: {err}") from None
    if n < 1:
        raise UsageError("predict.grid.n: empty grid")
    axes = [np.linspace(a, b, n) for a, b in zip(lo, hi)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in mesh], axis=1)


def cmd_predict(args, cfg):
    archive = _need_archive(args)
    model, q_u = archive.model, archive.q_u
    D = model.state_dim
    p = cfg["predict"]
    if p["rollout"] is not None:
        r = p["rollout"]
        try:
            x0 = np.asarray(r["x0"], dtype=float)
            horizon = int(r["horizon"])
        except (KeyError, TypeError, ValueError) as err:
            raise UsageError(f"predict.rollout: {err}") from None
        if x0.shape != (D,):
            raise UsageError(f"predict.rollout.x0: expected {D} values")
        seed = r.get("seed", 0) if args.seed is None else args.seed
        try:
            summary = rollout(q_u, model, x0, horizon, r.get("mode", "mean"), seed,
                              int(r.get("n_samples", 1)))
        except InvalidArgumentError as err:
            raise UsageError(f"predict.rollout: {err}") from None
        steps = np.arange(horizon + 1)[:, None]
        write_csv(args.out, ["step"] + _names("mean_x", D) + _names("std_x", D),
                  np.hstack([steps, summary.mean, summary.std]))
        return
    if args.data:
        X = read_matrix(args.data, "x")
    elif p["x_star"] is not None:
        X = np.asarray(p["x_star"], dtype=float)
        if X.ndim == 1:
            X = X[:, None] if D == 1 else X[None, :]
    elif p["grid"] is not None:
        X = _grid_points(p["grid"], D)
    else:
        raise UsageError("predict needs --data, predict.x_star, predict.grid or predict.rollout")
    if X.size == 0:
        raise UsageError("no prediction points")
    if X.ndim != 2 or X.shape[1] != D:
        raise UsageError(f"prediction points have {X.shape[-1]} columns, model state dimension is {D}")
    mean, var = TransitionPredictor(q_u, model).predict(X)
    n_out = model.n_outputs
    write_csv(args.out, _names("x", D) + _names("mean", n_out) + _names("std", n_out),
              np.hstack([X, mean, np.sqrt(var)]))


def cmd_eval(args, cfg):
    archive = _need_archive(args)
    e = cfg["eval"]
    if args.data:
        states = read_matrix(args.data, "x")
        seeds = []
    else:
        seed = e["test_seed"] if args.seed is None else args.seed
        if seed is None:
            seed = 10_000
        states = kink_system_generate(e["n_test"], seed).states
        seeds = [seed]
    if states.shape[1] != archive.model.state_dim:
        raise DataError(f"test states have {states.shape[1]} columns, "
                        f"model state dimension is {archive.model.state_dim}")
    if len(states) < 2:
        raise DataError("need at least two test states")
    t0 = time.perf_counter()
    rmse, ll = transition_metrics(archive.q_u, archive.model, transition_pairs(states))
    report = BenchmarkReport(rmse, ll, 0.0, time.perf_counter() - t0,
                             archive.provenance.get("config_fingerprint", ""),
                             list(archive.provenance.get("seeds", [])) + seeds)
    text = json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    else:
        sys.stdout.write(text)
    failures = []
    if e["max_rmse"] is not None and rmse > e["max_rmse"]:
        failures.append(f"test_rmse {rmse:.4f} > {e['max_rmse']}")
    if e["min_loglik"] is not None and ll < e["min_loglik"]:
        failures.append(f"mean_pred_loglik {ll:.4f} < {e['min_loglik']}")
    if failures:
        raise ThresholdError("; ".join(failures))


def cmd_online(args, cfg):
    archive = _need_archive(args)
    if not args.data:
        raise UsageError("online needs --data")
    out = args.out or args.archive
    header, rows = parse_csv_rows(args.data, "y")
    E = archive.model.likelihood.obs_dim
    S = cfg["online"]["segment_length"]
    if S < 1:
        raise UsageError("online.segment_length: must be positive")
    if args.seed is not None:
        cfg["training"]["seed"] = args.seed
    config = training_config(cfg)
    fixed = read_matrix(args.states, "x") if args.states else None
    if fixed is not None and len(fixed) != len(rows) + 1:
        raise DataError(f"--states needs {len(rows) + 1} rows (x_0 and one per observation)")
    state = archive.state
    history = list(archive.provenance.get("online", []))
    n_seg = (len(rows) + S - 1) // S
    for k in range(n_seg):
        seg = rows[k * S: (k + 1) * S]
        for line, values in seg:
            if isinstance(values, str):
                raise DataError(f"segment {k}: {args.data}:{line}: {values}")
        if len(header) != E:
            raise DataError(f"segment {k}: stream has {len(header)} columns, model expects {E}")
        y = np.array([v for _, v in seg], dtype=float)
        traj = None
        if fixed is not None:
            traj = ParticleTrajectories.from_states(fixed[k * S: k * S + len(seg) + 1], y)
        state = online_update(state, y, config, trajectories=traj)
        history.append({"segment": k, "rows": len(seg), "data_hash": data_hash(y)})
        archive = ModelArchive(state, dict(archive.provenance, online=history))
        save_archive(archive, out)
    if n_seg == 0:
        history.append({"segment": None, "rows": 0})
        save_archive(ModelArchive(state, dict(archive.provenance, online=history)), out)


def _need_archive(args):
    if not args.archive:
        raise UsageError(f"{args.command} needs --archive")
    return load_archive(args.archive)


COMMANDS = {
    "simulate": cmd_simulate,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "online": cmd_online,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="vgpssm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--dump-config", action="store_true",
                        help="print the default configuration and exit")
    sub = parser.add_subparsers(dest="command")
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--data", help="input CSV")
        p.add_argument("--archive", help="model archive")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--threads", type=int, help="limit BLAS threads")
        if name == "train":
            p.add_argument("--resume", action="store_true",
                           help="continue training from --archive")
        if name == "online":
            p.add_argument("--states", help="CSV of fixed states x_0..x_T used instead of smoothing")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.dump_config:
        print(dump_defaults())
        return EXIT_OK
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    try:
        cfg = load_config(args.config)
        if args.threads is not None:
            if args.threads < 1:
                raise UsageError("--threads must be positive")
            from threadpoolctl import threadpool_limits

            threadpool_limits(args.threads)
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigurationError) as err:
        if isinstance(err, ArchiveError):
            print(f"error: {err}", file=sys.stderr)
            return EXIT_DATA
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, InvalidArgumentError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, SingularMatrixError, DegenerateWeightsError, ResourceError,
            FloatingPointError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ThresholdError as err:
        print(f"threshold violated: {err}", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
