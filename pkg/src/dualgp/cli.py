"""Command-line experiment runner.

Subcommands
-----------
toy              1-D regression study comparing RBF, CK and NTK extrapolation
train            GP policy iteration on mountain car; writes CSVs and a model file
rollout          greedy closed-loop trajectory from a trained model file
verify-manifest  re-checksum the artifacts listed in a run manifest

Every command writes ``manifest.txt`` next to its artifacts.  Output is a
pure function of the configuration and seed: no timestamps or timings are
written, so reruns produce byte-identical files.

Exit codes: 0 success, 2 argument/config error, 3 numerical failure,
4 policy iteration did not converge (artifacts still written), 5 I/O error
or manifest mismatch.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import sys
import zipfile
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence, get_type_hints

import numpy as np

from . import __version__, gp, hyperopt
from . import mountaincar as mc
from . import policy_iteration as pi
from .gp import NumericalError
from .kernels import VARIANTS, KernelSpec

logger = logging.getLogger("dualgp")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3
EXIT_NOT_CONVERGED = 4
EXIT_IO = 5

MANIFEST = "manifest.txt"
MODEL_FILE = "model.npz"
CONTAINER_FORMAT = "dualgp-model/1"


class ConfigError(ValueError):
    pass


class ArtifactError(OSError):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunConfig:
    """Every tunable constant of the experiments.

    Config files are flat ``key = value`` lines; ``#`` starts a comment.
    Keys are the field names below.
    """

    seed: int = 0
    # environment
    gravity: float = 9.81
    dt: float = 0.3
    substeps: int = 30
    discount: float = 0.8
    reward_sigma: float = 0.05
    # policy iteration
    n_dyn: int = 128
    n_value: int = 512
    n_forces: int = 128
    tol: float = 1e-2
    max_iter: int = 15
    mcmc_steps: int = pi.DEFAULT_MCMC_STEPS
    depth: int = 3
    n_holdout: int = 32
    horizon: int = 100
    quiver_n: int = 20
    surface_n: int = 50
    # toy study
    toy_theta: float = 0.65
    toy_a: float = 10.0
    toy_noise: float = 0.1
    toy_n_train: int = 11
    toy_train_lo: float = 0.1
    toy_train_hi: float = 4.0
    toy_n_query: int = 100
    toy_query_lo: float = 0.2
    toy_query_hi: float = 9.0
    grid_low: float = 1e-2
    grid_high: float = 1e2
    grid_per_decade: int = 8

    def env(self) -> mc.EnvConfig:
        return mc.EnvConfig(
            gravity=self.gravity,
            dt=self.dt,
            substeps=self.substeps,
            discount=self.discount,
            reward_sigma=self.reward_sigma,
        )

    def items(self) -> list[tuple[str, object]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self)]


def _convert(name: str, kind: type, text: str):
    try:
        if kind is int:
            value = float(text)
            if value != int(value):
                raise ValueError
            return int(value)
        return float(text)
    except ValueError:
        raise ConfigError(f"config key {name!r}: cannot parse {text!r} as {kind.__name__}") from None


def parse_config(text: str, **overrides) -> RunConfig:
    kinds = get_type_hints(RunConfig)
    values: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in kinds or key.startswith("_"):
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, kinds[key], val)
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = RunConfig(**values)
    _validate(cfg)
    return cfg


def load_config(path: str | None, **overrides) -> RunConfig:
    if path is None:
        return parse_config("", **overrides)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config(text, **overrides)


def _validate(cfg: RunConfig) -> None:
    try:
        cfg.env()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    positive_ints = ("n_dyn", "n_value", "n_forces", "max_iter", "mcmc_steps", "depth", "horizon")
    for key in positive_ints:
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1, got {getattr(cfg, key)}")
    checks = [
        (cfg.n_dyn >= 4 and cfg.n_value >= 4, "n_dyn and n_value must be >= 4 (4-fold tuning)"),
        (cfg.n_forces >= 2, "n_forces must be >= 2"),
        (cfg.tol > 0, "tol must be positive"),
        (cfg.quiver_n >= 2 and cfg.surface_n >= 2, "quiver_n and surface_n must be >= 2"),
        (cfg.toy_n_train >= 2 and cfg.toy_n_query >= 2, "toy grids need at least 2 points"),
        (cfg.toy_noise >= 0, "toy_noise must be nonnegative"),
        (0 < cfg.grid_low < cfg.grid_high and cfg.grid_per_decade >= 1, "invalid hyperparameter grid"),
        (cfg.toy_train_lo < cfg.toy_train_hi and cfg.toy_query_lo < cfg.toy_query_hi, "empty toy interval"),
        (not cfg.toy_train_lo <= cfg.toy_a <= cfg.toy_train_hi, "toy_a must lie outside the training interval"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


# ---------------------------------------------------------------------------
# Artifact I/O
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    return "%.9g" % v


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _write_bytes(path, buf.getvalue().encode())


def read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    """Header and float matrix of a numeric CSV written by :func:`write_csv`."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)


def _write_bytes(path: Path, data: bytes) -> None:
    try:
        path.write_bytes(data)
    except OSError as exc:
        raise ArtifactError(f"cannot write {path}: {exc.strerror}") from None


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, files: Sequence[str], extra=()) -> None:
    """``filename sha256`` lines followed by the configuration block."""
    lines = [f"# dualgp {__version__} {command}"]
    lines += [f"{name} {sha256(out / name)}" for name in sorted(files)]
    lines.append("")
    lines.append("[config]")
    lines += [f"{k} = {_fmt(v) if not isinstance(v, int) else v}" for k, v in cfg.items()]
    lines += [f"{k} = {v}" for k, v in extra]
    _write_bytes(out / MANIFEST, ("\n".join(lines) + "\n").encode())


def read_manifest(out: Path) -> dict[str, str]:
    path = out / MANIFEST
    try:
        text = path.read_text()
    except OSError:
        raise ArtifactError(f"missing manifest {path}") from None
    entries = {}
    for line in text.splitlines():
        if line.startswith("[config]"):
            break
        if not line or line.startswith("#"):
            continue
        name, digest = line.rsplit(" ", 1)
        entries[name] = digest
    return entries


def verify_manifest(out: Path) -> list[str]:
    """Problems found when re-checksumming ``out``; empty when all match."""
    problems = []
    for name, digest in read_manifest(out).items():
        path = out / name
        if not path.is_file():
            problems.append(f"{name}: missing")
        elif sha256(path) != digest:
            problems.append(f"{name}: checksum mismatch")
    return problems


def _ensure_dir(out: Path) -> Path:
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactError(f"cannot create output directory {out}: {exc.strerror}") from None
    return out


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------
# A zip archive of .npy members (readable with numpy.load) written with a
# fixed member order and timestamp so identical models give identical bytes.
#   meta              uint8 bytes of a UTF-8 JSON document: format tag,
#                     environment config, and for each GP its kernel spec
#                     and noise variance
#   dyn_inputs        (N_d, 3) unit-scaled dynamics training inputs
#   dyn_next_x        (N_d,)   next-x targets
#   dyn_next_xdot     (N_d,)   next-xdot targets
#   value_support     (N_V, 3) raw (x, xdot, force) value support
#   value_targets     (N_V,)   converged value targets
# Loading refits each GP from these arrays, which reproduces the saved
# factors exactly.


def _spec_dict(spec: KernelSpec, noise: float) -> dict:
    return {**dataclasses.asdict(spec), "noise_var": noise}


def _spec_from(d: dict) -> tuple[KernelSpec, float]:
    d = dict(d)
    noise = float(d.pop("noise_var"))
    return KernelSpec(**d), noise


def save_model(path: Path, dyn: pi.DynamicsModel, val: pi.ValueModel, env: mc.EnvConfig) -> None:
    meta = {
        "format": CONTAINER_FORMAT,
        "env": dataclasses.asdict(env),
        "gp_x": _spec_dict(dyn.gp_x.spec, dyn.gp_x.noise_var),
        "gp_xdot": _spec_dict(dyn.gp_xdot.spec, dyn.gp_xdot.noise_var),
        "gp_v": _spec_dict(val.gp_v.spec, val.gp_v.noise_var),
        "reward_mean": val.reward_cfg is not None,
        "holdout_rmse": list(dyn.holdout_rmse),
    }
    arrays = {
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8),
        "dyn_inputs": dyn.gp_x.X,
        "dyn_next_x": dyn.gp_x.y,
        "dyn_next_xdot": dyn.gp_xdot.y,
        "value_support": val.support,
        "value_targets": val.values,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), member.getvalue())
    _write_bytes(path, buf.getvalue())


def load_model(path: Path) -> tuple[pi.DynamicsModel, pi.ValueModel, mc.EnvConfig]:
    if not path.is_file():
        raise ArtifactError(f"missing model container {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
        meta = json.loads(bytes(data["meta"]).decode())
        if meta.get("format") != CONTAINER_FORMAT:
            raise ValueError(f"unknown format {meta.get('format')!r}")
        env = mc.EnvConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["env"].items()})
        U = data["dyn_inputs"]
        gx = gp.fit(U, data["dyn_next_x"], *_spec_from(meta["gp_x"]))
        gv = gp.fit(U, data["dyn_next_xdot"], *_spec_from(meta["gp_xdot"]))
        dyn = pi.DynamicsModel(gx, gv, tuple(meta["holdout_rmse"]))
        spec, noise = _spec_from(meta["gp_v"])
        val = pi.ValueModel.fit(
            data["value_support"], data["value_targets"], spec, noise, env if meta["reward_mean"] else None
        )
    except (OSError, KeyError, ValueError, TypeError, zipfile.BadZipFile) as exc:
        raise ArtifactError(f"corrupt model container {path}: {exc}") from None
    return dyn, val, env


# ---------------------------------------------------------------------------
# Toy regression study
# ---------------------------------------------------------------------------


def toy_dynamics(x, theta: float = 0.65, a: float = 10.0):
    """Saturating map ``theta * x / (1 - x / a)``; undefined at the pole ``x = a``."""
    x = np.asarray(x, dtype=float)
    if np.any(x == a):
        raise ValueError(f"toy_dynamics has a pole at x = a = {a}")
    out = theta * x / (1.0 - x / a)
    return float(out) if out.ndim == 0 else out


@dataclass
class ToyResult:
    x_train: np.ndarray
    y_train: np.ndarray
    x_query: np.ndarray
    models: dict[str, gp.GPModel]
    params: dict[str, hyperopt.ParamVector]
    lml: dict[str, float]


def toy_grid(variant: str, cfg: RunConfig) -> list[hyperopt.ParamVector]:
    axis = hyperopt.log_grid(cfg.grid_low, cfg.grid_high, cfg.grid_per_decade)
    return hyperopt.product_grid({name: axis for name in hyperopt.param_names(variant)})


def toy_study(cfg: RunConfig = RunConfig()) -> ToyResult:
    """Fit each kernel to noisy samples of :func:`toy_dynamics` by grid search."""
    rng = np.random.default_rng(cfg.seed)
    x = np.linspace(cfg.toy_train_lo, cfg.toy_train_hi, cfg.toy_n_train)
    y = toy_dynamics(x, cfg.toy_theta, cfg.toy_a) + cfg.toy_noise * rng.standard_normal(x.shape[0])
    xq = np.linspace(cfg.toy_query_lo, cfg.toy_query_hi, cfg.toy_n_query)
    models, params, lml = {}, {}, {}
    for variant in VARIANTS:
        theta, val = hyperopt.grid_search(x, y, variant, toy_grid(variant, cfg), depth=cfg.depth)
        spec, noise = theta.to_model_args(variant, 1, cfg.depth)
        models[variant] = gp.fit(x, y, spec, noise)
        params[variant], lml[variant] = theta, val
        logger.info("toy %s: %s lml=%.4f", variant, {k: f"{v:.4g}" for k, v in theta.values.items()}, val)
    return ToyResult(x, y, xq, models, params, lml)


def cmd_toy(cfg: RunConfig, out: Path) -> int:
    out = _ensure_dir(out)
    res = toy_study(cfg)
    files = []
    f_true = toy_dynamics(res.x_query, cfg.toy_theta, cfg.toy_a)
    write_csv(out / "toy_truth.csv", ["x_query", "f_true"], zip(res.x_query, f_true))
    write_csv(out / "toy_observations.csv", ["x", "y"], zip(res.x_train, res.y_train))
    files += ["toy_truth.csv", "toy_observations.csv"]
    hp_rows = []
    for variant, model in res.models.items():
        post = gp.posterior(model, res.x_query, full_cov=False)
        lo, hi = post.ci95
        name = f"toy_{variant}.csv"
        write_csv(
            out / name, ["x_query", "post_mean", "post_var", "ci_lo", "ci_hi"], zip(res.x_query, post.mean, post.var, lo, hi)
        )
        files.append(name)
        vals = res.params[variant].values
        hp_rows.append(
            [variant]
            + [vals.get(k, math.nan) for k in (hyperopt.LENGTHSCALE, hyperopt.SIGMA_W, hyperopt.SIGMA_B, hyperopt.NOISE)]
            + [res.lml[variant]]
        )
    write_csv(
        out / "toy_hyperparameters.csv",
        ["kernel", "lengthscale", "sigma_w", "sigma_b", "noise_var", "log_marginal_likelihood"],
        hp_rows,
    )
    files.append("toy_hyperparameters.csv")
    write_manifest(out, "toy", cfg, files)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Mountain car
# ---------------------------------------------------------------------------


def state_grid(n: int) -> np.ndarray:
    """``n * n`` rows ``(x, xdot, 0)`` covering the track, x varying slowest."""
    xs = np.linspace(*mc.X_BOUNDS, n)
    vs = np.linspace(*mc.XDOT_BOUNDS, n)
    gx, gv = np.meshgrid(xs, vs, indexing="ij")
    return np.column_stack([gx.ravel(), gv.ravel(), np.zeros(n * n)])


def quiver_rows(dyn: pi.DynamicsModel, env: mc.EnvConfig, n: int) -> np.ndarray:
    """Columns ``x, xdot, true_next_x, true_next_xdot, pred_next_x, pred_next_xdot`` at zero force."""
    grid = state_grid(n)
    return np.column_stack([grid[:, :2], mc.step_many(grid, env), dyn.predict(grid)])


def train(cfg: RunConfig, variant: str, out: Path | None = None):
    """Run the full pipeline; with ``out`` set, write every training artifact there.

    Returns ``(dynamics, value, policy, diagnostics)``.
    """
    env = cfg.env()
    if out is not None:
        out = _ensure_dir(out)
    dyn = pi.train_dynamics(env, variant, cfg.n_dyn, cfg.seed, mcmc_steps=cfg.mcmc_steps, depth=cfg.depth, n_holdout=cfg.n_holdout)
    val0 = pi.init_value(env, variant, cfg.n_value, cfg.seed, mcmc_steps=cfg.mcmc_steps, depth=cfg.depth)
    surface = state_grid(cfg.surface_n)
    files = []

    def dump_surface(it: int, val: pi.ValueModel) -> None:
        if out is None:
            return
        name = f"value_iter_{it:03d}.csv"
        write_csv(out / name, ["x", "xdot", "value"], zip(surface[:, 0], surface[:, 1], val.predict(surface)))
        files.append(name)

    dump_surface(0, val0)
    val, policy, diag = pi.iterate_policy(dyn, val0, env, cfg.n_forces, cfg.tol, cfg.max_iter, on_iteration=dump_surface)
    if out is None:
        return dyn, val, policy, diag

    write_csv(
        out / "quiver.csv",
        ["x", "xdot", "true_next_x", "true_next_xdot", "pred_next_x", "pred_next_xdot"],
        quiver_rows(dyn, env, cfg.quiver_n),
    )
    write_csv(out / "policy.csv", ["x", "xdot", "force"], zip(policy.anchors[:, 0], policy.anchors[:, 1], policy.actions))
    met = [int(d < t) for d, t in zip(diag.max_delta, diag.thresholds)]
    write_csv(
        out / "diagnostics.csv",
        ["iteration", "max_delta", "mean_delta", "threshold", "converged"],
        zip(range(1, diag.iterations + 1), diag.max_delta, diag.mean_delta, diag.thresholds, met),
    )
    save_model(out / MODEL_FILE, dyn, val, env)
    files += ["quiver.csv", "policy.csv", "diagnostics.csv", MODEL_FILE]
    extra = [
        ("kernel", variant),
        ("converged", int(diag.converged)),
        ("iterations", diag.iterations),
        ("holdout_rmse_x", _fmt(dyn.holdout_rmse[0])),
        ("holdout_rmse_xdot", _fmt(dyn.holdout_rmse[1])),
    ]
    write_manifest(out, "train", cfg, files, extra)
    return dyn, val, policy, diag


def cmd_train(cfg: RunConfig, variant: str, out: Path) -> int:
    *_, diag = train(cfg, variant, out)
    if not diag.converged:
        logger.warning("policy iteration did not converge in %d iterations", diag.iterations)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def cmd_rollout(cfg: RunConfig, model_dir: Path, out: Path) -> int:
    dyn, val, env = load_model(model_dir / MODEL_FILE)
    out = _ensure_dir(out)
    rows = pi.greedy_rollout(val, dyn, env, mc.START_STATE, cfg.horizon, cfg.n_forces)
    write_csv(out / "trajectory.csv", ["t", "x", "xdot", "force", "reward"], rows)
    write_manifest(out, "rollout", cfg, ["trajectory.csv"], [("model_sha256", sha256(model_dir / MODEL_FILE))])
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualgp", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, kernel=False):
        p.add_argument("--config", metavar="PATH", help="flat key = value config file")
        p.add_argument("--out", metavar="DIR", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        if kernel:
            p.add_argument("--kernel", choices=VARIANTS, required=True)
        return p

    common(sub.add_parser("toy", help="1-D kernel comparison study"))
    common(sub.add_parser("train", help="GP policy iteration on mountain car"), kernel=True)
    p = common(sub.add_parser("rollout", help="greedy rollout of a trained model"))
    p.add_argument("--model", metavar="DIR", help="directory holding model.npz (default: --out)")
    p.add_argument("--horizon", type=int, help="number of control steps")
    p = sub.add_parser("verify-manifest", help="re-checksum artifacts against manifest.txt")
    p.add_argument("--out", metavar="DIR", required=True, help="directory holding manifest.txt")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = Path(args.out)
    try:
        if args.command == "verify-manifest":
            problems = verify_manifest(out)
            for p in problems:
                print(p, file=sys.stderr)
            return EXIT_IO if problems else EXIT_OK
        if getattr(args, "horizon", None) is not None and args.horizon < 1:
            raise ConfigError(f"--horizon must be >= 1, got {args.horizon}")
        cfg = load_config(args.config, seed=args.seed, horizon=getattr(args, "horizon", None))
        if args.command == "toy":
            return cmd_toy(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, args.kernel, out)
        return cmd_rollout(cfg, Path(args.model) if args.model else out, out)
    except ConfigError as exc:
        print(f"dualgp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"dualgp: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"dualgp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
