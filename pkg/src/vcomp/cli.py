"""Config-driven command line: generate datasets, fit the MLE, run experiments.

Exit codes: 0 success, 1 I/O or numeric failure, 2 statistical flag
(non-identifiable design or degenerate cell).  Configs are JSON with strict
key checking; relative paths resolve against the config file's directory.
The seed is taken from --seed, then the config, then the VCOMP_SEED
environment variable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import estimator as est
from .errors import (
    ConfigError,
    DegenerateSpectrumError,
    NonIdentifiableError,
    TailGridError,
    VcompError,
)
from .experiments import ExperimentPlan, run_experiment
from .matio import load_matrix, load_vector
from .model import (
    CouplingSpec,
    DesignSpec,
    ModelParams,
    SeedSpec,
    gen_coupled,
    gen_design,
    gen_independent,
    laws_from_names,
    save_dataset,
)
from .spectrum import decompose_gram

_GENERATE_KEYS = {"n", "p", "design", "params", "laws", "coupling", "seed", "stream"}
_DESIGN_KEYS = {"kind", "lambdas", "p_ratio"}
_PARAMS_KEYS = {"sigma2", "eta2"}
_LAWS_KEYS = {"beta", "eps"}
_COUPLING_KEYS = {"scheme", "delta", "fraction"}
_FIT_KEYS = {"x", "y", "trace", "seed"}
_EXPERIMENT_KEYS = {
    "kind", "n_grid", "replicates", "params", "laws", "design", "seed",
    "r_grid", "eta_box", "eta_grid_points", "test_fn", "coupling",
    "k_forms", "qspec", "surrogate_draws", "control_draws",
}
_TEST_FN_KEYS = {"name", "scales"}
_EXP_COUPLING_KEYS = {"scheme", "delta_grid", "delta_scale", "fraction"}


def _check_keys(obj: dict, allowed: set[str], where: str) -> None:
    if not isinstance(obj, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")


def _load_config(path: str) -> tuple[dict, Path]:
    cfg_path = Path(path)
    try:
        with open(cfg_path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {cfg_path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("top-level config must be a JSON object")
    return cfg, cfg_path.parent


def _resolve_seed(args, cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in cfg:
        return int(cfg["seed"])
    env = os.environ.get("VCOMP_SEED")
    if env is not None:
        return int(env)
    return 0


def _config_digest(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8")
    ).hexdigest()


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest(outdir: Path, command: str, cfg_digest: str, seed: int) -> None:
    _write_json(
        outdir / "manifest.json",
        {
            "command": command,
            "config_hash": cfg_digest,
            "seed": seed,
            "versions": {
                "vcomp": __version__,
                "numpy": np.__version__,
                "scipy": scipy.__version__,
                "python": platform.python_version(),
            },
        },
    )


def _design_from_cfg(cfg: dict) -> tuple[DesignSpec, float]:
    _check_keys(cfg, _DESIGN_KEYS, "design")
    kind = cfg.get("kind", "gaussian_iid")
    lambdas = cfg.get("lambdas")
    p_ratio = float(cfg.get("p_ratio", 2.0))
    spec = DesignSpec(kind=kind, lambdas=None if lambdas is None else tuple(lambdas))
    return spec, p_ratio


def _params_from_cfg(cfg: dict) -> ModelParams:
    _check_keys(cfg, _PARAMS_KEYS, "params")
    return ModelParams(sigma_sq=float(cfg["sigma2"]), eta_sq=float(cfg["eta2"]))


def cmd_generate(args) -> int:
    cfg, _ = _load_config(args.config)
    _check_keys(cfg, _GENERATE_KEYS, "generate config")
    seed_val = _resolve_seed(args, cfg)
    seed = SeedSpec(master_seed=seed_val, stream_id=int(cfg.get("stream", 0)))
    n, p = int(cfg["n"]), int(cfg["p"])
    design, _ = _design_from_cfg(cfg.get("design", {"kind": "gaussian_iid"}))
    params = _params_from_cfg(cfg["params"])
    laws_cfg = cfg.get("laws", {"beta": "gaussian", "eps": "gaussian"})
    _check_keys(laws_cfg, _LAWS_KEYS, "laws")
    beta_law, eps_law = laws_from_names(laws_cfg["beta"], laws_cfg["eps"])

    X = gen_design(n, p, design, seed)
    if "coupling" in cfg and cfg["coupling"] is not None:
        _check_keys(cfg["coupling"], _COUPLING_KEYS, "coupling")
        coupling = CouplingSpec(
            scheme=cfg["coupling"]["scheme"],
            delta=float(cfg["coupling"].get("delta", 0.0)),
            fraction=float(cfg["coupling"].get("fraction", 0.0)),
        )
        ds = gen_coupled(X, params, beta_law, eps_law, coupling, seed)
    else:
        ds = gen_independent(X, params, beta_law, eps_law, seed)

    outdir = Path(args.out)
    save_dataset(ds, outdir)
    _manifest(outdir, "generate", _config_digest(cfg), seed_val)
    return 0


def cmd_fit(args) -> int:
    cfg, base = _load_config(args.config)
    _check_keys(cfg, _FIT_KEYS, "fit config")
    x_path = base / cfg["x"]
    y_path = base / cfg["y"]
    X = load_matrix(x_path)
    y = load_vector(y_path)

    spec = decompose_gram(X)
    state = est.ScoreState.from_observations(spec, y)
    fit = est.fit_mle(state, est.FitOptions(trace=bool(cfg.get("trace", False))))

    out = est.fit_result_to_dict(fit)
    if cfg.get("trace", False):
        out["trace"] = [[e, ll] for e, ll in fit.eta_grid_trace]
    outdir = Path(args.out)
    _write_json(outdir / "fit.json", out)
    _manifest(outdir, "fit", _config_digest(cfg), _resolve_seed(args, cfg))
    return 2 if fit.identifiability_flag else 0


def _plan_from_cfg(cfg: dict, seed: int, workers: int) -> ExperimentPlan:
    _check_keys(cfg, _EXPERIMENT_KEYS, "experiment config")
    params_cfg = cfg.get("params", {"sigma2": 1.0, "eta2": 1.0})
    _check_keys(params_cfg, _PARAMS_KEYS, "params")
    laws_cfg = cfg.get("laws", {"beta": "gaussian", "eps": "gaussian"})
    _check_keys(laws_cfg, _LAWS_KEYS, "laws")
    design_cfg = cfg.get("design", {"kind": "gaussian_iid"})
    design, p_ratio = _design_from_cfg(design_cfg)
    fn_cfg = cfg.get("test_fn", {"name": "tanh_product", "scales": [3.0, 3.0]})
    _check_keys(fn_cfg, _TEST_FN_KEYS, "test_fn")
    coup_cfg = cfg.get("coupling", {})
    _check_keys(coup_cfg, _EXP_COUPLING_KEYS, "coupling")

    return ExperimentPlan(
        kind=cfg["kind"],
        n_grid=tuple(int(v) for v in cfg["n_grid"]),
        replicates=int(cfg["replicates"]),
        sigma0_sq=float(params_cfg["sigma2"]),
        eta0_sq=float(params_cfg["eta2"]),
        beta_law=laws_cfg["beta"],
        eps_law=laws_cfg["eps"],
        design=design.kind,
        p_ratio=p_ratio,
        design_lambdas=design.lambdas,
        master_seed=seed,
        workers=workers,
        r_grid=tuple(float(v) for v in cfg.get("r_grid", ())),
        eta_box=float(cfg.get("eta_box", 8.0)),
        eta_grid_points=int(cfg.get("eta_grid_points", 129)),
        test_fn=fn_cfg.get("name", "tanh_product"),
        test_scales=tuple(float(v) for v in fn_cfg.get("scales", (3.0, 3.0))),
        coupling_scheme=coup_cfg.get("scheme", "additive_perturb"),
        delta_grid=tuple(float(v) for v in coup_cfg.get("delta_grid", ())),
        delta_scale=coup_cfg.get("delta_scale", "absolute"),
        sparse_fraction=float(coup_cfg.get("fraction", 0.5)),
        k_forms=int(cfg.get("k_forms", 1)),
        qspec=cfg.get("qspec", "equispaced"),
        surrogate_draws=int(cfg.get("surrogate_draws", 1_000_000)),
        control_draws=int(cfg.get("control_draws", 200_000)),
    )


def cmd_experiment(args) -> int:
    cfg, _ = _load_config(args.config)
    seed = _resolve_seed(args, cfg)
    plan = _plan_from_cfg(cfg, seed, args.workers)
    report = run_experiment(plan)
    outdir = Path(args.out)
    report.write(outdir)
    _manifest(outdir, "experiment", _config_digest(cfg), seed)
    if report.runtime_seconds is not None:
        print(f"experiment {plan.kind}: {report.runtime_seconds:.1f}s", file=sys.stderr)
    degenerate = any(cell.get("degenerate") for cell in report.cells)
    return 2 if degenerate else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vcomp",
        description="Variance-components estimation and Monte Carlo verification",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("generate", cmd_generate), ("fit", cmd_fit), ("experiment", cmd_experiment)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--out", default=".", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed (overrides config and VCOMP_SEED)")
        p.add_argument("--workers", type=int, default=1, help="worker processes (results are invariant to this)")
        p.set_defaults(handler=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except (NonIdentifiableError, DegenerateSpectrumError, TailGridError) as exc:
        print(f"vcomp: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, VcompError, OSError, ValueError, KeyError) as exc:
        print(f"vcomp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
