"""Monte-Carlo estimators over coupled path ensembles.

Each estimator is a function returning a plain result record, plus a thin
scikit-learn style wrapper whose ``fit`` takes the start field. Statistics
use 3-standard-error bands. Fractional powers are taken as
``(|u|^2)^(p/2)`` with no floor at zero.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from .integrator import EnsembleResult, IntegratorConfig, simulate
from .noise import KirchhoffNoise, TransportNoiseBasis
from .spectral import SpectralField, random_field, sobolev_norm_sq

__all__ = [
    "EstimatorError",
    "Ensemble",
    "PathStats",
    "MomentCurve",
    "DecayFit",
    "ContinuityReport",
    "OccupationStats",
    "DEFAULT_BINS",
    "moment_bound",
    "occupation_bound",
    "moment_curve",
    "bootstrap_curve",
    "decay_test",
    "continuity_test",
    "occupation_measure",
    "histogram_agreement",
    "MomentEstimator",
    "BootstrapEstimator",
    "DecayEstimator",
    "ContinuityEstimator",
    "OccupationEstimator",
]

POINCARE = 1.0  # smallest |k|^2 on the zero-mean torus
NORM_KEYS = {0.5: "h_half", 1.0: "h_one", 1.5: "h_three_half", 2.0: "h_two"}
DEFAULT_BINS = (0.0, 0.05, 0.1, 0.25, 0.5, 1.0, 2.0, math.inf)


class EstimatorError(RuntimeError):
    """The ensemble does not support the requested estimate."""


@dataclass(frozen=True)
class Ensemble:
    """Everything needed to produce paths: integrator config, noise and path count."""

    cfg: IntegratorConfig
    basis: TransportNoiseBasis | None
    noise: KirchhoffNoise | None
    n_paths: int = 200
    min_unstopped: float = 0.95

    @property
    def gamma(self) -> float:
        return self.noise.gamma if self.noise is not None else 1.5

    def run(self, starts, **kw) -> EnsembleResult:
        return simulate(starts, self.cfg, self.basis, self.noise, self.n_paths, **kw)

    def check_survival(self, res: EnsembleResult):
        frac = 1.0 - res.stopped.mean(axis=1)
        if np.any(frac < self.min_unstopped):
            raise EstimatorError(
                f"only {frac.min():.1%} of paths unstopped (need {self.min_unstopped:.0%}); widen R")
        return frac


@dataclass
class PathStats:
    """Count, mean and summed squared deviations per column; merges exactly by Chan's rule."""

    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def from_values(cls, values) -> "PathStats":
        v = np.asarray(values, dtype=float)
        mean = v.mean(axis=0)
        return cls(len(v), mean, np.sum((v - mean) ** 2, axis=0))

    def merge(self, other: "PathStats") -> "PathStats":
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta ** 2 * (self.count * other.count / n)
        return PathStats(n, mean, m2)

    @property
    def stderr(self) -> np.ndarray:
        if self.count < 2:
            raise EstimatorError("stderr needs at least 2 paths")
        return np.sqrt(self.m2 / (self.count - 1) / self.count)


@dataclass
class MomentCurve:
    times: np.ndarray
    values: np.ndarray
    stderr: np.ndarray
    p: float
    s: float
    n_paths: int
    functional: str = "power"
    integral_mean: float = math.nan
    integral_stderr: float = math.nan
    bound: float = math.nan
    sup_value: float = math.nan
    extra: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        if math.isnan(self.bound):
            return True
        return bool(np.max(self.values - 3.0 * self.stderr) <= self.bound)

    def rows(self):
        for t, v, e in zip(self.times, self.values, self.stderr):
            yield (t, v, e)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("times", "values", "stderr"):
            d[key] = np.asarray(d[key]).tolist()
        d["passed"] = self.passed
        return d


def _norm_key(s):
    try:
        return NORM_KEYS[float(s)]
    except KeyError:
        raise ValueError(f"s={s!r} not tracked; expected one of {sorted(NORM_KEYS)}") from None


def moment_bound(x: SpectralField, gamma: float, t_end: float, slack_constant: float = 0.0) -> float:
    """Bound on sup_t E|u(t)|_{1/2}^{2-gamma} assembled from the moment chain.

    |x|_{1/2}^{2-gamma} + alpha C T with alpha = 1 - gamma/2 and C the constant
    of the H_g2 slack term (0 when H_g2* holds).
    """
    alpha = 1.0 - 0.5 * gamma
    return sobolev_norm_sq(x, 0.5) ** alpha + alpha * slack_constant * t_end


def occupation_bound(x: SpectralField, gamma: float, horizon: float, slack_constant: float = 0.0) -> float:
    """Bound on (1/T) E int_0^T |u|_{3/2}^{2-gamma} dt from the same chain plus Young's inequality.

    With Phi = |x|_{1/2}^{2-gamma}: (2 (Phi + alpha C T) + (1 - alpha) T (1 + Phi + alpha C T)) / T.
    """
    alpha = 1.0 - 0.5 * gamma
    phi = sobolev_norm_sq(x, 0.5) ** alpha
    grow = phi + alpha * slack_constant * horizon
    return (2.0 * grow + (1.0 - alpha) * horizon * (1.0 + grow)) / horizon


def moment_curve(ens: Ensemble, x0: SpectralField, p: float | None = None, s: float = 0.5,
                 slack_constant: float = 0.0, result: EnsembleResult | None = None) -> MomentCurve:
    """Sample mean of |u(t)|_s^p with stderr, and the time integral of |u|_{3/2}^{2-gamma}."""
    gamma = ens.gamma
    p = 2.0 - gamma if p is None else float(p)
    if not 0.0 < p <= 2.0:
        raise ValueError(f"p must lie in (0, 2], got {p!r}")
    res = result if result is not None else ens.run(x0)
    frac = ens.check_survival(res)
    values = res.norms[_norm_key(s)][0] ** (0.5 * p)
    stats = PathStats.from_values(values)
    integral = PathStats.from_values(res.integrals["frac"][0, :, -1:])
    bound = math.nan
    if float(s) == 0.5 and abs(p - (2.0 - gamma)) < 1e-12:
        bound = moment_bound(x0, gamma, float(res.times[-1]), slack_constant)
    return MomentCurve(res.times, stats.mean, stats.stderr, p, float(s), res.n_paths,
                       integral_mean=float(integral.mean[0]), integral_stderr=float(integral.stderr[0]),
                       bound=bound, sup_value=float(np.max(stats.mean)),
                       extra={"unstopped_fraction": float(frac[0])})


def bootstrap_curve(ens: Ensemble, x0: SpectralField, eps: float,
                    result: EnsembleResult | None = None) -> MomentCurve:
    """E log(1 + |u(t)|_1^2) on [eps, T] and E int_theta^T |u|_2^2 / (1 + |u|_1^2).

    theta is, per path, the snapshot time in [eps/2, eps] with the smallest |u|_1.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps!r}")
    res = result if result is not None else ens.run(x0)
    ens.check_survival(res)
    times = res.times
    window = np.flatnonzero((times >= 0.5 * eps - 1e-12) & (times <= eps + 1e-12))
    if len(window) == 0:
        raise EstimatorError(f"no snapshot in [{eps / 2:g}, {eps:g}]; refine snapshot_stride")
    keep = times >= eps - 1e-12
    h1 = res.norms["h_one"][0]
    stats = PathStats.from_values(np.log1p(h1[:, keep]))
    theta_idx = window[np.argmin(h1[:, window], axis=1)]
    boot = res.integrals["boot"][0]
    tail = boot[:, -1] - boot[np.arange(res.n_paths), theta_idx]
    tail_stats = PathStats.from_values(tail[:, None])
    return MomentCurve(times[keep], stats.mean, stats.stderr, 0.0, 1.0, res.n_paths,
                       functional="log1p_h_one", integral_mean=float(tail_stats.mean[0]),
                       integral_stderr=float(tail_stats.stderr[0]), sup_value=float(np.max(stats.mean)),
                       extra={"eps": float(eps), "t0_value": float(np.log1p(sobolev_norm_sq(x0, 1.0))),
                              "theta_mean": float(np.mean(times[theta_idx]))})


@dataclass
class DecayFit:
    kappa_hat: float
    kappa_stderr: float
    kappa_bound: float
    passed: bool
    covered: bool
    verdict: str
    check_times: list = field(default_factory=list)
    mean: list = field(default_factory=list)
    stderr: list = field(default_factory=list)
    envelope: list = field(default_factory=list)
    statistic: list = field(default_factory=list)
    mean_test: bool = False
    supermartingale_test: bool = False
    curve: MomentCurve | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["curve"] = self.curve.to_dict() if self.curve is not None else None
        return d


def _snap_index(times, t):
    i = int(np.argmin(np.abs(times - t)))
    if abs(times[i] - t) > 1e-9:
        raise EstimatorError(f"t={t:g} is not a snapshot time")
    return i


def decay_test(ens: Ensemble, x0: SpectralField, certified: bool, check_times=(0.5, 1.0, 2.0, 4.0),
               run_uncovered: bool = False, result: EnsembleResult | None = None) -> DecayFit:
    """Mean and supermartingale tests for E|u(t)|_{1/2}^{2-gamma} against exp(-kappa t).

    ``certified`` is whether the noise passed the H_g2* certificate. Without it
    the result is not covered by the decay theorem: the test does not run
    unless ``run_uncovered`` is set, and then the verdict is "unverified".
    """
    gamma = ens.gamma
    kappa = POINCARE * (1.0 - 0.5 * gamma)
    if not certified and not run_uncovered:
        return DecayFit(math.nan, math.nan, kappa, False, False, "not covered")
    p = 2.0 - gamma
    res = result if result is not None else ens.run(x0)
    curve = moment_curve(ens, x0, p, 0.5, result=res)
    x_pow = sobolev_norm_sq(x0, 0.5) ** (0.5 * p)
    times = [0.0] + [float(t) for t in check_times]
    idx = [_snap_index(res.times, t) for t in times]
    mean = curve.values[idx]
    se = curve.stderr[idx]
    env = np.exp(-kappa * np.array(times)) * x_pow
    mean_ok = bool(np.all(mean <= env + 3.0 * se))
    stat = np.exp(kappa * np.array(times)) * mean
    stat_se = np.exp(kappa * np.array(times)) * se
    sm_ok = bool(np.all(stat[1:] <= stat[:-1] + 3.0 * np.hypot(stat_se[1:], stat_se[:-1])))
    # log-linear fit on the mean curve where it is positive, skipping t = 0
    sel = (curve.times > 0) & (curve.values > 0)
    if np.count_nonzero(sel) >= 3:
        t, y = curve.times[sel], np.log(curve.values[sel])
        A = np.vstack([np.ones_like(t), t]).T
        coef, resid, *_ = np.linalg.lstsq(A, y, rcond=None)
        dof = max(len(t) - 2, 1)
        sigma2 = float(np.sum((y - A @ coef) ** 2)) / dof
        cov = sigma2 * np.linalg.inv(A.T @ A)
        kappa_hat, kappa_se = float(-coef[1]), float(np.sqrt(cov[1, 1]))
    else:
        kappa_hat, kappa_se = math.inf, 0.0
    passed = mean_ok and sm_ok
    verdict = ("passed" if passed else "failed") if certified else "unverified"
    return DecayFit(kappa_hat, kappa_se, kappa, passed and certified, certified, verdict,
                    times, mean.tolist(), se.tolist(), env.tolist(), stat.tolist(),
                    mean_ok, sm_ok, curve)


@dataclass
class ContinuityReport:
    sizes: list
    median_sup: list
    median_int: list
    stopped_fraction: list
    zero_exact: bool
    monotone: bool
    below_linear: bool
    stopping_dominated: bool
    lipschitz_factor: float

    @property
    def passed(self) -> bool:
        return self.zero_exact and self.monotone and self.below_linear and not self.stopping_dominated

    def rows(self):
        for row in zip(self.sizes, self.median_sup, self.median_int, self.stopped_fraction):
            yield row

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def continuity_test(ens: Ensemble, x: SpectralField, sizes=(0.1, 0.05, 0.025),
                    direction: SpectralField | None = None, direction_seed: int = 0,
                    lipschitz_factor: float = 10.0, max_stopped: float = 0.05) -> ContinuityReport:
    """Coupled paths from x and x + delta e share noise; report median differences.

    ``e`` is a unit vector in H^{1/2} (random unless given). Group 0 is x
    itself and a delta = 0 group checks that coupled copies agree bitwise.
    """
    if direction is None:
        direction = random_field(x.trunc, 0.5, 1.0, np.random.default_rng(direction_seed))
    sizes = [float(d) for d in sizes]
    starts = [x, x + direction * 0.0] + [x + direction * d for d in sizes]
    res = ens.run(starts)
    zero_exact = bool(np.all(res.diff_sup[1] == 0.0) and np.array_equal(res.final[1], res.final[0]))
    med_sup = [float(np.median(res.diff_sup[g])) for g in range(2, len(starts))]
    med_int = [float(np.median(res.diff_int[g])) for g in range(2, len(starts))]
    stopped = [float(res.stopped[g].mean()) for g in range(2, len(starts))]
    order = np.argsort(sizes)[::-1]
    sup_sorted = np.array(med_sup)[order]
    monotone = bool(np.all(np.diff(sup_sorted) < 0))
    below = bool(all(m < lipschitz_factor * d for m, d in zip(med_sup, sizes)))
    dominated = bool(max(stopped + [float(res.stopped[0].mean())]) > max_stopped)
    return ContinuityReport(sizes, med_sup, med_int, stopped, zero_exact, monotone, below, dominated,
                            lipschitz_factor)


@dataclass
class OccupationStats:
    horizon: float
    functional_mean: float
    functional_stderr: float
    histogram: list
    histogram_stderr: list
    bins: list
    bound: float
    start_norm: float

    @property
    def passed(self) -> bool:
        return self.functional_mean - 3.0 * self.functional_stderr <= self.bound

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passed"] = self.passed
        return d


def occupation_measure(ens: Ensemble, horizons=(2.0, 4.0, 8.0), start: SpectralField | None = None,
                       trunc=None, bins=DEFAULT_BINS, slack_constant: float = 0.0,
                       result: EnsembleResult | None = None) -> list[OccupationStats]:
    """Time-averaged occupation of |u|_{1/2} and the functional (1/T) int |u|_{3/2}^{2-gamma}.

    The start defaults to the zero field. The run must reach the largest
    horizon. Histograms use the snapshot values at left endpoints, each
    weighted by its snapshot interval.
    """
    if start is None:
        if trunc is None:
            raise ValueError("need a start field or a truncation")
        start = SpectralField.zeros(trunc)
    horizons = sorted(float(h) for h in horizons)
    res = result if result is not None else ens.run(start)
    if res.times[-1] < horizons[-1] - 1e-9:
        raise EstimatorError(f"run ends at t={res.times[-1]:g} before horizon {horizons[-1]:g}")
    edges = np.asarray(bins, dtype=float)
    norm = np.sqrt(res.norms["h_half"][0])
    which = np.clip(np.searchsorted(edges, norm, side="right") - 1, 0, len(edges) - 2)
    widths = np.diff(res.times)
    out = []
    for T in horizons:
        iT = _snap_index(res.times, T)
        w = widths[:iT] / T
        per_path = np.zeros((res.n_paths, len(edges) - 1))
        for b in range(len(edges) - 1):
            per_path[:, b] = np.sum((which[:, :iT] == b) * w, axis=1)
        hist = PathStats.from_values(per_path)
        func = PathStats.from_values(res.integrals["frac"][0, :, iT:iT + 1] / T)
        out.append(OccupationStats(
            T, float(func.mean[0]), float(func.stderr[0]), hist.mean.tolist(), hist.stderr.tolist(),
            [float(e) for e in edges], occupation_bound(start, ens.gamma, T, slack_constant),
            float(math.sqrt(sobolev_norm_sq(start, 0.5)))))
    return out


def histogram_agreement(a: OccupationStats, b: OccupationStats, k: float = 3.0):
    """Bin-wise agreement within k combined stderr, and the total-variation distance."""
    ha, hb = np.array(a.histogram), np.array(b.histogram)
    se = np.hypot(a.histogram_stderr, b.histogram_stderr)
    agree = bool(np.all(np.abs(ha - hb) <= k * se))
    return agree, float(0.5 * np.sum(np.abs(ha - hb)))


# -- scikit-learn style wrappers ---------------------------------------------------

class _EnsembleEstimator(BaseEstimator):
    def _ensemble(self):
        cfg = IntegratorConfig(dt=self.dt, t_end=self.t_end, scheme=self.scheme,
                               snapshot_stride=self.snapshot_stride, r_threshold=self.r_threshold,
                               seed=self.seed)
        return Ensemble(cfg, self.basis, self.noise, self.n_paths)


class MomentEstimator(_EnsembleEstimator):
    """Fit computes ``curve_``, the moment curve of |u|_s^p from the start field."""

    def __init__(self, basis=None, noise=None, n_paths=200, t_end=1.0, dt=1e-3, seed=0, p=None, s=0.5,
                 scheme="exponential_em", snapshot_stride=10, r_threshold=math.inf, slack_constant=0.0):
        self.basis = basis
        self.noise = noise
        self.n_paths = n_paths
        self.t_end = t_end
        self.dt = dt
        self.seed = seed
        self.p = p
        self.s = s
        self.scheme = scheme
        self.snapshot_stride = snapshot_stride
        self.r_threshold = r_threshold
        self.slack_constant = slack_constant

    def fit(self, X, y=None):
        self.curve_ = moment_curve(self._ensemble(), X, self.p, self.s, self.slack_constant)
        return self


class BootstrapEstimator(_EnsembleEstimator):
    def __init__(self, basis=None, noise=None, n_paths=200, t_end=1.0, dt=1e-3, seed=0, eps=0.1,
                 scheme="exponential_em", snapshot_stride=10, r_threshold=math.inf):
        self.basis = basis
        self.noise = noise
        self.n_paths = n_paths
        self.t_end = t_end
        self.dt = dt
        self.seed = seed
        self.eps = eps
        self.scheme = scheme
        self.snapshot_stride = snapshot_stride
        self.r_threshold = r_threshold

    def fit(self, X, y=None):
        self.curve_ = bootstrap_curve(self._ensemble(), X, self.eps)
        return self


class DecayEstimator(_EnsembleEstimator):
    def __init__(self, basis=None, noise=None, n_paths=200, t_end=4.0, dt=1e-3, seed=0, certified=False,
                 check_times=(0.5, 1.0, 2.0, 4.0), scheme="exponential_em", snapshot_stride=10,
                 r_threshold=math.inf):
        self.basis = basis
        self.noise = noise
        self.n_paths = n_paths
        self.t_end = t_end
        self.dt = dt
        self.seed = seed
        self.certified = certified
        self.check_times = check_times
        self.scheme = scheme
        self.snapshot_stride = snapshot_stride
        self.r_threshold = r_threshold

    def fit(self, X, y=None):
        self.fit_ = decay_test(self._ensemble(), X, self.certified, self.check_times)
        self.kappa_hat_ = self.fit_.kappa_hat
        return self


class ContinuityEstimator(_EnsembleEstimator):
    def __init__(self, basis=None, noise=None, n_paths=100, t_end=1.0, dt=1e-3, seed=0,
                 sizes=(0.1, 0.05, 0.025), scheme="exponential_em", snapshot_stride=10,
                 r_threshold=math.inf):
        self.basis = basis
        self.noise = noise
        self.n_paths = n_paths
        self.t_end = t_end
        self.dt = dt
        self.seed = seed
        self.sizes = sizes
        self.scheme = scheme
        self.snapshot_stride = snapshot_stride
        self.r_threshold = r_threshold

    def fit(self, X, y=None):
        self.report_ = continuity_test(self._ensemble(), X, self.sizes)
        return self


class OccupationEstimator(_EnsembleEstimator):
    def __init__(self, basis=None, noise=None, n_paths=200, t_end=8.0, dt=1e-3, seed=0,
                 horizons=(2.0, 4.0, 8.0), bins=DEFAULT_BINS, scheme="exponential_em",
                 snapshot_stride=10, r_threshold=math.inf):
        self.basis = basis
        self.noise = noise
        self.n_paths = n_paths
        self.t_end = t_end
        self.dt = dt
        self.seed = seed
        self.horizons = horizons
        self.bins = bins
        self.scheme = scheme
        self.snapshot_stride = snapshot_stride
        self.r_threshold = r_threshold

    def fit(self, X, y=None):
        self.stats_ = occupation_measure(self._ensemble(), self.horizons, start=X, bins=self.bins)
        return self
