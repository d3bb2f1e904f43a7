"""Command-line entry point: ``stochns certify | simulate | estimate``.

Exit codes: 0 pass, 1 verdict failure, 2 usage or malformed config,
3 runtime fault. Every output file starts with the tool version and the
resolved configuration, and contains nothing that varies between runs with
the same configuration and seed.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ESTIMATORS, ConfigError, RunConfig, load_config
from .estimators import (
    Ensemble,
    EstimatorError,
    bootstrap_curve,
    continuity_test,
    decay_test,
    histogram_agreement,
    moment_curve,
    occupation_measure,
)
from .integrator import IntegratorFault, TrajectoryRecord, simulate
from .noise import (
    KirchhoffNoise,
    NoiseConfigError,
    TransportNoiseBasis,
    certify_hypotheses,
    kappa_from_deltas,
)
from .nonlinear import Bes12Fitter
from .spectral import SpectralField, Truncation, random_field, save_snapshot

log = logging.getLogger("stochns")

EXIT_PASS, EXIT_FAIL, EXIT_USAGE, EXIT_FAULT = 0, 1, 2, 3


# -- deterministic writers -----------------------------------------------------

def _plain(obj):
    """JSON-safe copy: numpy scalars and arrays become Python values, non-finite floats strings."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else repr(x)
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def sha256_of(doc) -> str:
    return hashlib.sha256(json.dumps(_plain(doc), sort_keys=True).encode()).hexdigest()


class Writer:
    """Writes CSV and JSON files into one directory, all with the same header."""

    def __init__(self, out_dir, cfg: RunConfig, extra: dict | None = None):
        self.dir = Path(out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.cfg = cfg
        self.extra = dict(extra or {})

    def header(self, extra=None) -> list[str]:
        items = {**self.extra, **(extra or {})}
        return ([f"stochns {__version__}", "config:"] + ["  " + line for line in self.cfg.echo]
                + [f"{k} = {_cell(v)}" for k, v in items.items()])

    def csv(self, name, columns, rows, extra=None) -> Path:
        lines = ["# " + h for h in self.header(extra)]
        lines.append(",".join(columns))
        lines += [",".join(_cell(v) for v in row) for row in rows]
        path = self.dir / name
        path.write_text("\n".join(lines) + "\n")
        return path

    def json(self, name, payload: dict, extra=None) -> Path:
        doc = {"tool": "stochns", "version": __version__, "config": self.cfg.echo}
        doc.update({k: v for k, v in {**self.extra, **(extra or {})}.items()})
        doc.update(payload)
        path = self.dir / name
        path.write_text(json.dumps(_plain(doc), indent=2, allow_nan=False) + "\n")
        return path


# -- shared setup ----------------------------------------------------------------

@dataclass
class Setup:
    trunc: Truncation
    basis: TransportNoiseBasis | None
    noise: KirchhoffNoise | None
    report: dict
    certified: bool
    hg2_star: bool
    cert_hash: str


def build_setup(cfg: RunConfig) -> Setup:
    """Fit and verify the bilinear constants, build the noise and certify it."""
    trunc = Truncation(cfg.n_max)
    try:
        basis = TransportNoiseBasis.from_cosines(cfg.zeta)
    except NoiseConfigError as exc:
        report = {"passed": False, "construction_error": str(exc), "certificates": [
            {"which": "Hsigma2", "passed": False, "margin": None, "samples": 0, "detail": str(exc)}]}
        return Setup(trunc, None, None, report, False, False, sha256_of(report))
    fitter = Bes12Fitter(cfg.n_max, cfg.fit_samples, cfg.margin, cfg.n_ascent,
                         random_state=cfg.seed, backend=cfg.integrator.backend).fit()
    bes12 = fitter.verify()
    kappa1, kappa2 = kappa_from_deltas(basis, fitter.delta1_, fitter.delta2_)
    if cfg.alphas is None:
        noise = KirchhoffNoise.auto(kappa1, kappa2, cfg.gamma, cfg.channels, cfg.rho_factor)
    else:
        noise = KirchhoffNoise(tuple(cfg.alphas), cfg.gamma, kappa1, kappa2)
    certs = certify_hypotheses(basis, noise, fitter.delta1_, fitter.delta2_, cfg.cert_samples,
                               rng=np.random.default_rng((cfg.seed, 2)), trunc=trunc,
                               slack_constant=cfg.slack_constant, g3_constant=cfg.g3_constant)
    passed = all(r.passed for r in bes12) and all(c.passed for c in certs)
    hg2_star = next(c.passed for c in certs if c.which == "Hg2*")
    report = {
        "passed": passed,
        "delta1": fitter.delta1_,
        "delta2": fitter.delta2_,
        "kappa1": kappa1,
        "kappa2": kappa2,
        "bes12": [r.to_dict() for r in bes12],
        "certificates": [c.to_dict() for c in certs],
        "basis": basis.to_dict(),
        "noise": noise.to_dict(),
    }
    return Setup(trunc, basis, noise, report, passed, hg2_star, sha256_of(report))


def start_field(trunc: Truncation, norm: float, seed: int, decay: float) -> SpectralField:
    """Zero for ``norm == 0``; otherwise a seeded random field with |x|_{1/2} = norm."""
    if norm == 0:
        return SpectralField.zeros(trunc)
    return random_field(trunc, 0.5, norm, np.random.default_rng(seed), decay=decay)


def _certified_or_stop(setup: Setup, allow: bool, writer: Writer) -> bool:
    writer.json("certificates.json", setup.report)
    if setup.certified:
        return True
    failing = [c["which"] for c in setup.report["certificates"] if not c["passed"]]
    failing += [r["name"] for r in setup.report.get("bes12", []) if not r["passed"]]
    if allow:
        log.warning("continuing uncertified; failing: %s", ", ".join(failing))
        return True
    print(f"certificates failed ({', '.join(failing)}); pass --allow-uncertified to run anyway",
          file=sys.stderr)
    return False


# -- commands ----------------------------------------------------------------------

def cmd_certify(cfg: RunConfig, args) -> int:
    setup = build_setup(cfg)
    writer = Writer(cfg.out_dir, cfg, {"seed": cfg.seed})
    writer.json("certificates.json", setup.report)
    for c in setup.report["certificates"]:
        print(f"{c['which']:>16}  {'pass' if c['passed'] else 'FAIL'}  margin={c['margin']}")
    if "construction_error" in setup.report:
        print(f"noise rejected: {setup.report['construction_error']}", file=sys.stderr)
    return EXIT_PASS if setup.certified else EXIT_FAIL


def cmd_simulate(cfg: RunConfig, args) -> int:
    setup = build_setup(cfg)
    writer = Writer(cfg.out_dir, cfg, {"seed": cfg.seed, "certificates_sha256": setup.cert_hash})
    if setup.basis is None:
        writer.json("certificates.json", setup.report)
        print(f"noise rejected: {setup.report['construction_error']}", file=sys.stderr)
        return EXIT_FAIL
    if not _certified_or_stop(setup, args.allow_uncertified, writer):
        return EXIT_FAIL
    x0 = start_field(setup.trunc, cfg.x0_norm, cfg.x0_seed, cfg.x0_decay)
    n_paths = args.paths if args.paths is not None else 1
    fault = None
    try:
        res = simulate(x0, cfg.integrator, setup.basis, setup.noise, n_paths, keep_states=cfg.snapshots)
    except IntegratorFault as exc:
        fault, res = exc, exc.partial
    for i in range(n_paths):
        rec = TrajectoryRecord.from_ensemble(res, setup.trunc, 0, i)
        reason = rec.stop_reason
        if fault is not None and fault.path == i:
            reason = "fault"
        extra = {"path": i, "stopped": rec.stopped, "stop_time": rec.stop_time, "stop_reason": reason or "none"}
        if fault is not None:
            extra["fault"] = str(fault)
        writer.csv(f"trajectory_{i:04d}.csv", TrajectoryRecord.COLUMNS, rec.rows(), extra)
        for j, (t, snap) in enumerate(zip(rec.times, rec.snapshots)):
            ext = "snapb" if cfg.binary_snapshots else "snap"
            save_snapshot(writer.dir / f"snapshot_{i:04d}_{j:05d}.{ext}", snap, cfg.seed, float(t),
                          binary=cfg.binary_snapshots)
    if fault is not None:
        print(f"integrator fault: {fault}", file=sys.stderr)
        return EXIT_FAULT
    return EXIT_PASS


def _occupation_verdict(stats) -> bool:
    """Functional below its bound at every horizon and not growing beyond 3 stderr."""
    bounded = all(s.passed for s in stats)
    uniform = all(b.functional_mean <= a.functional_mean + 3.0 * math.hypot(a.functional_stderr, b.functional_stderr)
                  for a, b in zip(stats, stats[1:]))
    return bounded and uniform


def cmd_estimate(cfg: RunConfig, args) -> int:
    name = args.estimator or cfg.estimator
    setup = build_setup(cfg)
    writer = Writer(cfg.out_dir, cfg, {"seed": cfg.seed, "estimator": name,
                                       "certificates_sha256": setup.cert_hash})
    if setup.basis is None:
        writer.json("certificates.json", setup.report)
        print(f"noise rejected: {setup.report['construction_error']}", file=sys.stderr)
        return EXIT_FAIL
    if not _certified_or_stop(setup, args.allow_uncertified, writer):
        return EXIT_FAIL
    trunc = setup.trunc
    x0 = start_field(trunc, cfg.x0_norm, cfg.x0_seed, cfg.x0_decay)
    integ = cfg.integrator
    if name == "decay":
        integ = replace(integ, t_end=max(integ.t_end, max(cfg.check_times)))
    elif name == "occupation":
        integ = replace(integ, t_end=max(integ.t_end, max(cfg.horizons)))
    ens = Ensemble(integ, setup.basis, setup.noise, cfg.paths)
    # under H_g2* the slack term of H_g2 is not needed, so the bounds use C = 0
    slack = 0.0 if setup.hg2_star else cfg.slack_constant
    stem = name
    try:
        if name in ("moments", "bootstrap"):
            if name == "moments":
                curve = moment_curve(ens, x0, cfg.p, cfg.s, slack_constant=slack)
            else:
                curve = bootstrap_curve(ens, x0, cfg.eps)
            passed = curve.passed and bool(np.all(np.isfinite(curve.values)))
            writer.csv(f"{stem}_curve.csv", ("t", "mean", "stderr"), curve.rows())
            payload = {"passed": passed, "curve": curve.to_dict()}
        elif name == "decay":
            fit = decay_test(ens, x0, setup.hg2_star and setup.certified, cfg.check_times,
                             run_uncovered=args.allow_uncertified)
            passed = fit.passed
            writer.csv(f"{stem}_curve.csv", ("t", "mean", "stderr", "envelope", "statistic"),
                       zip(fit.check_times, fit.mean, fit.stderr, fit.envelope, fit.statistic))
            payload = {"passed": passed, "verdict": fit.verdict, "fit": fit.to_dict()}
        elif name == "continuity":
            rep = continuity_test(ens, x0, cfg.sizes, direction_seed=cfg.direction_seed)
            passed = rep.passed
            writer.csv(f"{stem}_curve.csv", ("delta", "median_sup", "median_int", "stopped_fraction"),
                       rep.rows())
            payload = {"passed": passed, "report": rep.to_dict()}
        else:
            second = start_field(trunc, cfg.second_start_norm, cfg.x0_seed, cfg.x0_decay)
            zero = occupation_measure(ens, cfg.horizons, trunc=trunc, bins=cfg.bins, slack_constant=slack)
            other = occupation_measure(ens, cfg.horizons, start=second, bins=cfg.bins, slack_constant=slack)
            passed = _occupation_verdict(zero)
            agree, tv = histogram_agreement(zero[-1], other[-1])
            rows, hist = [], []
            for label, stats in (("zero", zero), ("second", other)):
                for s in stats:
                    rows.append((label, s.horizon, s.functional_mean, s.functional_stderr, s.bound))
                    for b, (m, e) in enumerate(zip(s.histogram, s.histogram_stderr)):
                        hist.append((label, s.horizon, s.bins[b], s.bins[b + 1], m, e))
            writer.csv(f"{stem}_curve.csv", ("start", "horizon", "functional_mean", "functional_stderr", "bound"),
                       rows)
            writer.csv(f"{stem}_histogram.csv", ("start", "horizon", "bin_low", "bin_high", "mass", "stderr"),
                       hist)
            payload = {"passed": passed,
                       "two_start_agreement": {"agree": agree, "total_variation": tv,
                                               "horizon": zero[-1].horizon},
                       "zero_start": [s.to_dict() for s in zero],
                       "second_start": [s.to_dict() for s in other]}
    except (IntegratorFault, EstimatorError) as exc:
        writer.json(f"{stem}_report.json", {"passed": False, "fault": str(exc)})
        print(f"runtime fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    writer.json(f"{stem}_report.json", payload)
    print(f"{name}: {'passed' if passed else 'failed'}")
    return EXIT_PASS if passed else EXIT_FAIL


# -- argument parsing ----------------------------------------------------------------

def _nonneg_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text!r}")
    return value


def _positive_int(text):
    value = _nonneg_int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="run configuration file")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides [output] dir)")
    common.add_argument("--seed", type=_nonneg_int, metavar="N", help="master seed override")
    common.add_argument("--paths", type=_positive_int, metavar="N", help="number of paths")
    common.add_argument("--allow-uncertified", action="store_true",
                        help="run even if a noise certificate fails")
    parser = argparse.ArgumentParser(prog="stochns", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"stochns {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("certify", parents=[common], help="fit constants and certify the noise")
    sub.add_parser("simulate", parents=[common], help="write trajectory files")
    est = sub.add_parser("estimate", parents=[common], help="run one estimator")
    est.add_argument("estimator", nargs="?", choices=ESTIMATORS, help="defaults to [experiment] estimator")
    return parser


COMMANDS = {"certify": cmd_certify, "simulate": cmd_simulate, "estimate": cmd_estimate}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config, seed=args.seed, paths=args.paths, out_dir=args.out)
    except ConfigError as exc:
        print(f"stochns: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # any unexpected failure is a runtime fault, not a usage error
        log.debug("fault", exc_info=True)
        print(f"stochns: runtime fault: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
