"""Command-line entry points: ``simulate``, ``fit`` and ``diagnose``.

Exit codes: 0 success, 1 validation/usage error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import asdict, dataclass, field

from . import __version__
from .diagnostics import diagnose
from .estimator import FitResult, bootstrap, fit
from .model import InvalidParamsError, MsprParams, check
from .simulator import simulate_dataset
from .spike_io import (
    DataIOError,
    ensure_dir,
    read_json,
    read_spikes,
    write_json,
    write_matrix_csv,
    write_table_csv,
    write_spikes,
)

log = logging.getLogger("mspr")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    mode: str
    T: float | None = None
    n_trials: int = 50
    seed: int = 0
    bootstrap: int = 200
    n_perm: int = 10_000
    alpha: float = 0.05
    threshold_gamma: bool = False
    n_jobs: int = 1
    params: dict | None = field(default=None)

    def validate(self):
        errs = []
        if self.mode not in ("simulate", "fit", "diagnose"):
            errs.append(f"unknown mode {self.mode!r}")
        for name in ("n_trials", "n_perm", "n_jobs"):
            if not (isinstance(getattr(self, name), int) and getattr(self, name) >= 1):
                errs.append(f"{name} must be a positive integer")
        if not (isinstance(self.bootstrap, int) and self.bootstrap >= 0):
            errs.append("bootstrap must be a nonnegative integer")
        if not isinstance(self.seed, int) or self.seed < 0:
            errs.append("seed must be a nonnegative integer")
        if not 0 < self.alpha < 1:
            errs.append("alpha must be in (0, 1)")
        if self.T is not None and not (isinstance(self.T, (int, float)) and math.isfinite(self.T) and self.T > 0):
            errs.append("T must be positive")
        if self.mode == "simulate":
            if self.params is None:
                errs.append("simulate needs 'params'")
            if self.T is None:
                errs.append("simulate needs 'T'")
        if errs:
            raise ConfigError("; ".join(errs))
        return self


def load_config(path, mode: str, seed: int | None = None) -> RunConfig:
    raw = read_json(path) if path else {}
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f for f in RunConfig.__dataclass_fields__ if f != "mode"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(mode=mode, **raw)
    if seed is not None:
        cfg.seed = seed
    return cfg.validate()


def _provenance(cfg: RunConfig, command: str) -> dict:
    return {"artifact": "mspr", "version": __version__, "command": command, "seed": cfg.seed, "config": asdict(cfg)}


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, "simulate", args.seed)
    params = check(MsprParams.from_dict(cfg.params))
    data = simulate_dataset(params, float(cfg.T), cfg.n_trials, cfg.seed, n_jobs=cfg.n_jobs)
    out = ensure_dir(args.out)
    write_spikes(data, out / "spikes.csv")
    write_json({**_provenance(cfg, "simulate"), "params": params.to_dict()}, out / "params.json")
    log.info("wrote %d trials x %d neurons to %s", data.n_trials, data.p, out)
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = load_config(args.config, "fit", args.seed)
    data = read_spikes(args.data, T=cfg.T)
    if data.n_trials < 2:
        raise ConfigError(f"need ≥ 2 trials, got {data.n_trials}")
    fit_kwargs = {}
    if cfg.threshold_gamma:
        fit_kwargs = dict(threshold_alpha=cfg.alpha, n_perm=cfg.n_perm, perm_seed=cfg.seed)
    res = fit(data, **fit_kwargs)
    if cfg.bootstrap >= 2:
        res = res.with_bootstrap(bootstrap(data, cfg.bootstrap, seed=cfg.seed, n_jobs=cfg.n_jobs, **fit_kwargs))
    out = ensure_dir(args.out)
    write_json({**_provenance(cfg, "fit"), "fit": res.to_dict()}, out / "fit_report.json")
    for i, n in enumerate(res.neurons):
        if not n.converged or n.flags:
            log.warning("neuron %d: flags=%s %s", i, list(n.flags), n.message)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    cfg = load_config(args.config, "diagnose", args.seed)
    report_doc = read_json(args.fit)
    if not isinstance(report_doc, dict) or "fit" not in report_doc:
        raise ConfigError(f"{args.fit}: not a fit report")
    fr = FitResult.from_dict(report_doc["fit"])
    data = read_spikes(args.data, T=cfg.T if cfg.T is not None else fr.T)
    rep = diagnose(data, fr, n_boot=cfg.bootstrap, n_perm=cfg.n_perm, alpha=cfg.alpha, seed=cfg.seed)

    out = ensure_dir(args.out)
    write_json({**_provenance(cfg, "diagnose"), "diagnostics": rep.to_dict()}, out / "diagnostics.json")
    labels = [str(i) for i in range(data.p)]
    write_matrix_csv(out / "count_correlation.csv", rep.corr, labels, labels)
    write_matrix_csv(out / "pvalues.csv", rep.pvalues, labels, labels)
    write_matrix_csv(out / "significant_correlation.csv", rep.significant_corr(), labels, labels)
    write_table_csv(out / "isi_table.csv", rep.isi_table(), ["neuron", "kind", "mean", "mean_se", "var", "var_se"])
    for i, pts in enumerate(rep.pp):
        if pts is not None:
            write_matrix_csv(out / f"pp_neuron_{i}.csv", pts, ["u_model", "u_empirical"])
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mspr", description="Multivariate Skellam process with resetting.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate a spike dataset")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="fit the model to a spike CSV")
    f.add_argument("--data", required=True)
    f.add_argument("--config")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    d = sub.add_parser("diagnose", help="diagnostics for a fitted dataset")
    d.add_argument("--data", required=True)
    d.add_argument("--fit", required=True)
    d.add_argument("--config")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_diagnose)

    for p in (s, f, d):
        p.add_argument("--seed", type=int, help="overrides the config seed")
    return ap


def run_cli(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except DataIOError as e:
        print(f"mspr: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (InvalidParamsError, ConfigError, ValueError, KeyError, TypeError) as e:
        print(f"mspr: error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"mspr: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


def main():
    sys.exit(run_cli())
