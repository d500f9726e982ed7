"""Command-line entry point: simulate, characterize, aux and scaling-study.

Exit codes: 0 success, 1 usage or I/O failure, 2 statistical failure
(non-convergence, model mismatch, unsettled or degenerate aux decay,
no spectral peak).

Examples::

    hamid simulate --config run.json --seed 7 --out data/
    hamid characterize data/series_7.csv --model dephasing --out fit/
    hamid aux --config aux.json --out aux/
    hamid characterize data/series_7.csv --model general --constraints aux/constraints.json
    hamid scaling-study --config scaling.json --workers 4 --out scaling/
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

from .bloch import DecoherenceRates, HamiltonianParams
from .fit import DegenerateDecayError, FitConstraints, TailNotSettledError, fit_aux_decay
from .io import (
    atomic_write_text,
    constraints_from_dict,
    fit_to_dict,
    read_json,
    read_series_csv,
    write_json,
    write_series_csv,
    write_spectrum_csv,
)
from .measurement import ExperimentConfig, sample_aux_experiment, sample_experiment
from .models import MODELS
from .pipeline import characterize, scaling_study
from .spectrum import NoPeakError

EXIT_OK, EXIT_USAGE, EXIT_STATISTICAL = 0, 1, 2
SEED_ENV = "HAMID_SEED"


class UsageError(Exception):
    pass


class StatisticalFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    experiment: ExperimentConfig
    truth: tuple | None = None  # (HamiltonianParams, DecoherenceRates)
    model: str = "dephasing"
    constraints: FitConstraints = field(default_factory=FitConstraints)
    outputs: Path = Path(".")
    replicate_seeds: list = field(default_factory=list)
    n_e_values: list = field(default_factory=list)
    sigma_level: float = 3.0


def _experiment_from(data: dict, seed) -> ExperimentConfig:
    data = dict(data)
    n_t = data.get("n_t")
    if "dt" not in data and "t_ob" in data and n_t:
        data["dt"] = float(data["t_ob"]) / int(n_t)
    data.pop("t_ob", None)
    if seed is not None:
        data["seed"] = seed
    allowed = {"dt", "n_t", "n_e", "eta", "init_z", "seed", "aux_interval"}
    unknown = set(data) - allowed
    if unknown:
        raise UsageError(f"unknown experiment fields: {sorted(unknown)}")
    missing = {"dt", "n_t", "n_e"} - set(data)
    if missing:
        raise UsageError(f"experiment is missing {sorted(missing)}")
    try:
        return ExperimentConfig(
            dt=float(data["dt"]), n_t=int(data["n_t"]), n_e=int(data["n_e"]),
            eta=float(data.get("eta", 0.0)), init_z=int(data.get("init_z", 1)),
            seed=int(data.get("seed", 0)), aux_interval=data.get("aux_interval", "fixed"),
        )
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid experiment: {exc}") from exc


def _resolve_seed(cli_seed):
    if cli_seed is not None:
        return cli_seed
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from None
    return None


def load_run_config(path, args) -> RunConfig:
    """Read a JSON run configuration; command-line flags take precedence."""
    data = {}
    if path is not None:
        try:
            data = read_json(path)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from exc
    seed = _resolve_seed(getattr(args, "seed", None))
    exp_data = data.get("experiment")
    experiment = _experiment_from(exp_data, seed) if exp_data is not None else None

    truth = None
    if "truth" in data:
        t = data["truth"]
        try:
            truth = (HamiltonianParams(float(t.get("d", 0.0)), float(t.get("theta", 0.0))),
                     DecoherenceRates(float(t.get("gamma_z", 0.0)),
                                      float(t.get("gamma_plus", 0.0)),
                                      float(t.get("gamma_minus", 0.0))))
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid truth parameters: {exc}") from exc

    model = getattr(args, "model", None) or data.get("model", "dephasing")
    if model not in MODELS:
        raise UsageError(f"unknown model {model!r}")
    cons_data = data.get("constraints")
    cons_path = getattr(args, "constraints", None)
    if cons_path is not None:
        try:
            cons_data = read_json(cons_path)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read constraints {cons_path}: {exc}") from exc
    try:
        constraints = constraints_from_dict(cons_data) if cons_data else FitConstraints()
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid constraints: {exc}") from exc

    out = getattr(args, "out", None) or data.get("outputs", ".")
    seeds = data.get("replicate_seeds", [])
    return RunConfig(experiment, truth, model, constraints, Path(out),
                     [int(s) for s in seeds], [int(n) for n in data.get("n_e_values", [])],
                     float(data.get("sigma_level", 3.0)))


class _Outputs:
    """Tracks written files so that a failed command leaves nothing behind."""

    def __init__(self):
        self.paths = []

    def add(self, path):
        self.paths.append(Path(path))
        return path

    def remove_all(self):
        for p in self.paths:
            try:
                p.unlink()
            except FileNotFoundError:
                pass


def _need(cfg: RunConfig, experiment=True, truth=True):
    if experiment and cfg.experiment is None:
        raise UsageError("config needs an 'experiment' section")
    if truth and cfg.truth is None:
        raise UsageError("config needs a 'truth' section")


def cmd_simulate(args, outputs: _Outputs) -> int:
    cfg = load_run_config(args.config, args)
    _need(cfg)
    h, rates = cfg.truth
    cli_seed = _resolve_seed(args.seed)
    if cli_seed is not None:
        seeds = [cli_seed]
    else:
        seeds = cfg.replicate_seeds or [cfg.experiment.seed]
    for seed in seeds:
        exp = cfg.experiment.with_seed(seed)
        try:
            series = sample_experiment(h, rates, exp, noiseless=args.noiseless)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        path = outputs.add(cfg.outputs / f"series_{seed}.csv")
        write_series_csv(path, series)
        print(f"wrote {path}")
    return EXIT_OK


def _characterize_one(path, cfg: RunConfig, out_dir: Path, outputs: _Outputs, init_z) -> int:
    try:
        series = read_series_csv(path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read series {path}: {exc}") from exc
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = characterize(series, cfg.model, cfg.constraints, init_z=init_z,
                                  sigma_level=cfg.sigma_level)
    except NoPeakError as exc:
        raise StatisticalFailure(f"{path}: {exc}") from exc
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    fit_json = fit_to_dict(result.fit)
    fit_json["padded"] = result.padded
    fit_json["shift"] = result.shift
    fit_json["predicted_residual_norm"] = result.predicted_residual
    fit_json["mismatch"] = result.mismatch
    write_json(outputs.add(out_dir / "fit.json"), fit_json)
    write_spectrum_csv(outputs.add(out_dir / "spectrum.csv"), result.spectrum)
    if result.mismatch:
        print(f"{path}: residual norm {result.fit.residual_norm:.3g} exceeds "
              f"5x the projection-noise prediction {result.predicted_residual:.3g}; "
              f"model {cfg.model!r} looks inappropriate", file=sys.stderr)
    elif not result.fit.converged:
        print(f"{path}: fit did not converge ({', '.join(result.fit.flags)})", file=sys.stderr)
    print(f"wrote {out_dir / 'fit.json'}")
    return result.exit_code


def cmd_characterize(args, outputs: _Outputs) -> int:
    cfg = load_run_config(args.config, args)
    init_z = cfg.experiment.init_z if cfg.experiment is not None else 1
    if len(args.series) == 1:
        return _characterize_one(args.series[0], cfg, cfg.outputs, outputs, init_z)
    # results of a failed series stay: the exit code reports the worst case
    code = EXIT_OK
    for path in args.series:
        code = max(code, _characterize_one(path, cfg, cfg.outputs / Path(path).stem,
                                           outputs, init_z))
    return code


def cmd_aux(args, outputs: _Outputs) -> int:
    cfg = load_run_config(args.config, args)
    _need(cfg)
    h, rates = cfg.truth
    try:
        z1, zm1 = sample_aux_experiment(rates, cfg.experiment, h, noiseless=args.noiseless)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        aux = fit_aux_decay(z1, zm1)
    except (TailNotSettledError, DegenerateDecayError) as exc:
        raise StatisticalFailure(str(exc)) from exc
    seed = cfg.experiment.seed
    write_series_csv(outputs.add(cfg.outputs / f"aux_z1_{seed}.csv"), z1)
    write_series_csv(outputs.add(cfg.outputs / f"aux_zm1_{seed}.csv"), zm1)
    path = outputs.add(cfg.outputs / "constraints.json")
    write_json(path, aux.as_dict())
    print(f"wrote {path}")
    return EXIT_OK


def cmd_scaling_study(args, outputs: _Outputs) -> int:
    cfg = load_run_config(args.config, args)
    _need(cfg)
    h, rates = cfg.truth
    n_e_values = args.n_e or cfg.n_e_values
    seeds = cfg.replicate_seeds
    if args.n_seeds is not None:
        base = _resolve_seed(args.seed) or 0
        seeds = list(range(base, base + args.n_seeds))
    try:
        study = scaling_study(h, rates, cfg.experiment, n_e_values, seeds, cfg.model,
                              constraints=cfg.constraints, workers=args.workers)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    lines = ["n_total,param,frac_uncertainty_mean,frac_uncertainty_sd"]
    for row in study["rows"]:
        lines.append(f"{row['n_total']},{row['param']},{row['frac_uncertainty_mean']!r},"
                     f"{row['frac_uncertainty_sd']!r}")
    path = outputs.add(cfg.outputs / "scaling.csv")
    atomic_write_text(path, "\n".join(lines) + "\n")
    summary = {"slopes": study["slopes"],
               "excluded_nonconverged": {str(k): v for k, v in study["excluded"].items()}}
    write_json(outputs.add(cfg.outputs / "scaling_summary.json"), summary)
    for name, slope in study["slopes"].items():
        print(f"{name}: log-log slope {slope:.3f}")
    print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="hamid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, model=False):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help=f"seed (falls back to ${SEED_ENV})")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
        if model:
            p.add_argument("--model", choices=MODELS)
            p.add_argument("--constraints", help="constraints JSON (e.g. from 'aux')")

    p = sub.add_parser("simulate", help="simulate coherent-oscillation records")
    common(p)
    p.add_argument("--noiseless", action="store_true", help="write expected counts")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("characterize", help="fit a model to measured records")
    common(p, model=True)
    p.add_argument("series", nargs="+", help="series CSV file(s)")
    p.set_defaults(func=cmd_characterize)

    p = sub.add_parser("aux", help="relaxation experiment giving rate constraints")
    common(p)
    p.add_argument("--noiseless", action="store_true", help="use expected counts")
    p.set_defaults(func=cmd_aux)

    p = sub.add_parser("scaling-study", help="fractional uncertainty versus N_T")
    common(p, model=True)
    p.add_argument("--n-e", type=int, nargs="+", help="ensemble sizes (overrides config)")
    p.add_argument("--n-seeds", type=int, help="use seeds 0..n-1 (overrides config)")
    p.set_defaults(func=cmd_scaling_study)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits directly on --help (0) and on bad arguments (1)
        return int(exc.code or 0)
    if args.workers < 1:
        print("hamid: error: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    outputs = _Outputs()
    try:
        return args.func(args, outputs)
    except UsageError as exc:
        outputs.remove_all()
        print(f"hamid: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        outputs.remove_all()
        print(f"hamid: I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StatisticalFailure as exc:
        outputs.remove_all()
        print(f"hamid: {exc}", file=sys.stderr)
        return EXIT_STATISTICAL


if __name__ == "__main__":
    sys.exit(main())
