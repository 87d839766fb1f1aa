"""Impulse responses to identified level and volatility shocks.

Level shocks move one orthogonalized innovation e_j; volatility shocks move one
log-volatility innovation eta_j. A volatility shock of log size delta raises
the target's own log-volatility by delta on impact and spills over to later
ordered volatilities through the lower-triangular factor b0.
"""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import (
    ModelSpec,
    NonStationaryError,
    ParameterSet,
    companion_matrix,
    extra_labels,
    spectral_radius,
    vol_to_sigma,
)

QUANTILES = (0.05, 0.16, 0.84, 0.95)
CUMULATIVE_YEARS = 5


class InfeasibleShockError(ValueError):
    pass


@dataclass(frozen=True)
class ShockSpec:
    """A shock to variable ``target``.

    ``size`` is in the variable's native units (a level change for level
    shocks, a change in the conditional standard deviation for volatility
    shocks). With ``units="log"`` a volatility shock's size is the log-variance
    impulse itself.
    """

    kind: str
    target: int
    size: float = 1.0
    units: str = "native"

    def __post_init__(self):
        if self.kind not in ("level", "volatility"):
            raise ValueError(f"shock kind must be 'level' or 'volatility', got {self.kind!r}")
        if self.units not in ("native", "log"):
            raise ValueError(f"units must be 'native' or 'log', got {self.units!r}")
        if self.units == "log" and self.kind == "level":
            raise ValueError("log units apply to volatility shocks only")
        if not np.isfinite(self.size) or self.size == 0:
            raise ValueError("shock size must be finite and nonzero")

    @classmethod
    def null(cls, kind: str, target: int) -> "ShockSpec":
        """Zero-size shock; only useful to check that paired simulations cancel."""
        s = cls(kind, target, 1.0, "log" if kind == "volatility" else "native")
        object.__setattr__(s, "size", 0.0)
        return s

    def label(self, variables) -> str:
        prefix = "h_" if self.kind == "volatility" else "e_"
        unit = "log" if self.units == "log" else ""
        return f"{self.size:+g}{unit} {prefix}{variables[self.target]}"

    @classmethod
    def parse(cls, text: str, variables) -> "ShockSpec":
        """Read shorthand such as ``"+1C h_T"``, ``"-1pp e_gdp"`` or ``"0.5log h_gdp"``.

        ``h_`` marks a volatility shock, ``e_`` (or a bare name) a level shock.
        Variable names match exactly or by unique case-insensitive prefix.
        """
        m = re.fullmatch(r"\s*([+-]?\d*\.?\d+(?:[eE][+-]?\d+)?)\s*(C|pp|%|log)?\s+(h_|e_)?(\w+)\s*", text)
        if not m:
            raise ValueError(f"cannot parse shock {text!r}")
        size, unit, prefix, name = m.groups()
        kind = "volatility" if prefix == "h_" else "level"
        return cls(kind, resolve_variable(name, variables), float(size), "log" if unit == "log" else "native")


def resolve_variable(name: str, variables) -> int:
    variables = list(variables)
    if name in variables:
        return variables.index(name)
    hits = [i for i, v in enumerate(variables) if v.lower().startswith(name.lower())]
    if len(hits) != 1:
        raise ValueError(f"variable {name!r} does not identify one of {variables}")
    return hits[0]


@dataclass
class ResponsePaths:
    """Responses at horizons 0..H; arrays are (H+1, N)."""

    z: np.ndarray
    h: np.ndarray
    sigma: np.ndarray
    delta: float
    nonconvergent: bool = False
    sigma_mean: np.ndarray | None = None  # expectation over the stationary state (simulation comparable)
    z_se: np.ndarray | None = None
    h_se: np.ndarray | None = None
    sigma_se: np.ndarray | None = None
    excluded: int = 0


# ------------------------------------------------------------------ baselines


def panel_baseline(params: ParameterSet) -> np.ndarray:
    """Panel-average unconditional log-volatility (N,)."""
    theta = params.vol.theta
    N = theta.shape[0]
    return np.linalg.solve(np.eye(N) - theta, params.vol.alpha.mean(axis=0))


def country_baseline(params: ParameterSet, country: int) -> np.ndarray:
    N = params.vol.theta.shape[0]
    return np.linalg.solve(np.eye(N) - params.vol.theta, params.vol.alpha[country])


def log_impulse(size: float, h_bar: float) -> float:
    """delta with vol_to_sigma(h_bar + delta) - vol_to_sigma(h_bar) = size."""
    s = float(vol_to_sigma(h_bar))
    if size <= -s:
        raise InfeasibleShockError(f"a change of {size} cannot be applied to a standard deviation of {s:.4g}")
    return 2.0 * np.log((size + s) / s)


def posterior_baseline(draws) -> np.ndarray:
    """Posterior mean of the panel-average stationary log-volatility."""
    N = draws.spec.N
    eye = np.eye(N)
    vals = [np.linalg.solve(eye - draws.theta[d], draws.alpha[d].mean(axis=0)) for d in range(len(draws))]
    return np.mean(vals, axis=0)


def shock_calibration(draws, target: ShockSpec) -> float:
    """Log-volatility impulse for a volatility shock given in native units."""
    if target.kind != "volatility":
        raise ValueError("shock calibration applies to volatility shocks")
    if target.units == "log":
        return float(target.size)
    h_bar = posterior_baseline(draws)
    return log_impulse(target.size, h_bar[target.target])


def _delta(shock: ShockSpec, h_bar: np.ndarray) -> float:
    if shock.kind == "level":
        return 0.0
    if shock.units == "log":
        return float(shock.size)
    return log_impulse(shock.size, h_bar[shock.target])


# ------------------------------------------------------------------- analytic


def _extra_slopes(spec: ModelSpec, params: ParameterSet, h_bar, z_bar):
    """Linearized extra-regressor effects: (N, N) on z_{t-1} and (N, N) on h_t."""
    N = spec.N
    dz = np.zeros((N, N))
    dh = np.zeros((N, N))
    if not spec.extras:
        return dz, dh
    E = params.mean.extra
    for col, name in enumerate(extra_labels(spec)):
        if name == "squared_temperature":
            dz[:, 0] += E[:, col] * 2.0 * z_bar[0]
        elif name == "squared_gdp":
            dz[:, N - 1] += E[:, col] * 2.0 * z_bar[N - 1]
        else:
            m = spec.variables.index(name[len("squared_volatility["):-1])
            dh[:, m] += E[:, col] * 2.0 * h_bar[m]
    return dz, dh


def _steady_level(spec, params, h_bar):
    N = spec.N
    m = params.mean
    rhs = m.c.mean(axis=0) + m.gamma.sum(axis=0) @ h_bar
    try:
        return np.linalg.solve(np.eye(N) - m.beta.sum(axis=0), rhs)
    except np.linalg.LinAlgError:
        return np.zeros(N)


def irf_analytic(params: ParameterSet, shock: ShockSpec, H: int, spec: ModelSpec, baseline=None) -> ResponsePaths:
    """Responses of z, h and sigma at horizons 0..H.

    ``baseline`` is the log-volatility state used for native-unit sizing and
    sigma differencing (defaults to the panel-average stationary state).
    Extra squared regressors enter through their slope at the baseline.
    """
    N, P, K = spec.N, spec.P, spec.K
    h_bar = panel_baseline(params) if baseline is None else np.asarray(baseline, dtype=float)
    beta, gamma = params.mean.beta, params.mean.gamma
    theta = params.vol.theta
    nonconv = spectral_radius(companion_matrix(beta)) >= 1.0 or spectral_radius(theta) >= 1.0
    j = shock.target
    delta = _delta(shock, h_bar)

    dh = np.zeros((H + 1, N))
    dz = np.zeros((H + 1, N))
    if shock.kind == "volatility":
        b0 = params.vol.b0
        dh[0] = b0[:, j] * (delta / b0[j, j])
        for t in range(1, H + 1):
            dh[t] = theta @ dh[t - 1]
    z_bar = _steady_level(spec, params, h_bar) if spec.extras else None
    ez, eh = _extra_slopes(spec, params, h_bar, z_bar)
    impulse = np.zeros(N)
    if shock.kind == "level":
        e = np.zeros(N)
        e[j] = shock.size
        impulse = params.impact.inverse() @ e
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(H + 1):
            acc = impulse.copy() if t == 0 else np.zeros(N)
            for l in range(1, min(P, t) + 1):
                acc += beta[l - 1] @ dz[t - l]
            for k in range(min(K, t) + 1):
                acc += gamma[k] @ dh[t - k]
            acc += eh @ dh[t]
            if t >= 1:
                acc += ez @ dz[t - 1]
            dz[t] = acc
        sigma = vol_to_sigma(h_bar + dh) - vol_to_sigma(h_bar)
    sigma_mean = None
    if spectral_radius(theta) < 1.0:
        from scipy import linalg

        var = np.diag(linalg.solve_discrete_lyapunov(theta, params.vol.Q))
        sigma_mean = np.exp(0.5 * h_bar + var / 8.0) * np.expm1(0.5 * dh)
    return ResponsePaths(dz, dh, sigma, delta, bool(nonconv), sigma_mean)


# ------------------------------------------------------------------ simulated


def irf_simulated(
    params: ParameterSet,
    shock: ShockSpec,
    H: int,
    spec: ModelSpec,
    replications: int = 10_000,
    rng=None,
    burn_in: int = 100,
    baseline=None,
) -> ResponsePaths:
    """Generalized impulse responses by paired simulation.

    Each replication simulates a representative country (panel-average
    intercepts) from its stationary law for ``burn_in`` periods, then runs a
    baseline and a shocked continuation on the same random numbers. Returned
    paths are averages of shocked minus baseline with Monte Carlo standard
    errors. Replications whose paths overflow are excluded and counted.
    """
    from scipy import linalg

    if replications < 1000:
        raise ValueError("need at least 1000 replications")
    g = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    N, P, K = spec.N, spec.P, spec.K
    theta, Q = params.vol.theta, params.vol.Q
    if spectral_radius(theta) >= 1.0:
        raise NonStationaryError("theta", spectral_radius(theta))
    if spectral_radius(companion_matrix(params.mean.beta)) >= 1.0:
        raise NonStationaryError("beta", spectral_radius(companion_matrix(params.mean.beta)))
    h_bar = panel_baseline(params) if baseline is None else np.asarray(baseline, dtype=float)
    delta = _delta(shock, h_bar)
    alpha = (np.eye(N) - theta) @ h_bar
    cov = linalg.solve_discrete_lyapunov(theta, Q)
    L = np.linalg.cholesky(0.5 * (cov + cov.T))
    b0 = params.vol.b0
    Ainv = params.impact.inverse()
    m = params.mean
    c = m.c.mean(axis=0)
    labels = extra_labels(spec)
    R = replications
    n_steps = burn_in + H + 1

    h0 = h_bar + g.standard_normal((R, N)) @ L.T
    eta = g.standard_normal((n_steps, R, N))
    eps = g.standard_normal((n_steps, R, N))

    def run(shocked: bool):
        z_bar = _steady_level(spec, params, h_bar)
        hist_z = [np.tile(z_bar, (R, 1)) for _ in range(P)]
        h_prev = h0
        out_z, out_h = [], []
        hk = [h0] * (K + 1)  # hk[0] = h_t
        for u in range(n_steps):
            noise = eta[u] @ b0.T
            if shocked and u == burn_in and shock.kind == "volatility":
                noise = noise + b0[:, shock.target] * (delta / b0[shock.target, shock.target])
            h_t = alpha + h_prev @ theta.T + noise if u > 0 else h_prev
            hk = [h_t] + hk[:K]
            e = np.exp(0.5 * h_t) * eps[u]
            if shocked and u == burn_in and shock.kind == "level":
                e = e.copy()
                e[:, shock.target] += shock.size
            mu = c + sum(hist_z[l] @ m.beta[l].T for l in range(P)) + sum(hk[k] @ m.gamma[k].T for k in range(K + 1))
            if spec.extras:
                cols = []
                for name in labels:
                    if name == "squared_temperature":
                        cols.append(hist_z[0][:, :1] ** 2)
                    elif name == "squared_gdp":
                        cols.append(hist_z[0][:, -1:] ** 2)
                    else:
                        v = spec.variables.index(name[len("squared_volatility["):-1])
                        cols.append(h_t[:, v : v + 1] ** 2)
                mu = mu + np.hstack(cols) @ m.extra.T
            z_t = mu + e @ Ainv.T
            hist_z = [z_t] + hist_z[: P - 1]
            h_prev = h_t
            if u >= burn_in:
                out_z.append(z_t)
                out_h.append(h_t)
        return np.stack(out_z, axis=1), np.stack(out_h, axis=1)

    with np.errstate(over="ignore", invalid="ignore"):
        zb, hb = run(False)
        zs, hs = run(True)
        dz, dh = zs - zb, hs - hb
        ds = vol_to_sigma(hs) - vol_to_sigma(hb)
    ok = np.isfinite(dz).all(axis=(1, 2)) & np.isfinite(ds).all(axis=(1, 2))
    n = int(ok.sum())
    if n < 2:
        raise RuntimeError("every replication overflowed")

    def mean_se(x):
        x = x[ok]
        return x.mean(axis=0), x.std(axis=0, ddof=1) / np.sqrt(n)

    z, zse = mean_se(dz)
    h, hse = mean_se(dh)
    s, sse = mean_se(ds)
    return ResponsePaths(z, h, s, delta, False, s, zse, hse, sse, excluded=R - n)


# ------------------------------------------------------------------ posterior


@dataclass
class Bands:
    """Mean and quantile bands, each (H+1, N)."""

    mean: np.ndarray
    q05: np.ndarray
    q16: np.ndarray
    q84: np.ndarray
    q95: np.ndarray

    @classmethod
    def from_paths(cls, paths: np.ndarray) -> "Bands":
        q = np.quantile(paths, QUANTILES, axis=0)
        return cls(paths.mean(axis=0), *q)


@dataclass
class IrfResult:
    shock: ShockSpec
    variables: tuple[str, ...]
    horizons: np.ndarray
    z: Bands
    sigma: Bands
    h: Bands
    impact: Bands  # z at horizon 0, (1, N)
    cumulative: Bands  # z summed over the first CUMULATIVE_YEARS horizons, (1, N)
    delta: float
    meta: dict = field(default_factory=dict)

    def rows(self):
        label = self.shock.label(self.variables)
        for prefix, bands in (("", self.z), ("sigma_", self.sigma)):
            for n, v in enumerate(self.variables):
                for t in self.horizons:
                    yield (label, prefix + v, int(t), bands.mean[t, n], bands.q05[t, n], bands.q16[t, n],
                           bands.q84[t, n], bands.q95[t, n])

    def summary_rows(self):
        label = self.shock.label(self.variables)
        for name, bands in (("impact", self.impact), (f"cumulative_{CUMULATIVE_YEARS}y", self.cumulative)):
            for n, v in enumerate(self.variables):
                yield (label, v, name, bands.mean[0, n], bands.q05[0, n], bands.q16[0, n], bands.q84[0, n],
                       bands.q95[0, n])

    def to_csv(self, path, header: dict | None = None, summary_path=None):
        """Plot-ready responses: shock, variable, horizon, mean, q05, q16, q84, q95."""
        _write_csv(path, ("shock", "variable", "horizon", "mean", "q05", "q16", "q84", "q95"), self.rows(), header)
        if summary_path is not None:
            _write_csv(summary_path, ("shock", "variable", "measure", "mean", "q05", "q16", "q84", "q95"),
                       self.summary_rows(), header)


def _write_csv(path, columns, rows, header):
    with open(Path(path), "w", newline="") as f:
        for k, v in (header or {}).items():
            f.write(f"# {k}: {v}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([x if isinstance(x, (str, int)) else repr(float(x)) for x in r])


def read_irf_csv(path) -> list[dict]:
    with open(path) as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def posterior_irf(draws, shock: ShockSpec, H: int = 10, baseline: str = "posterior", country: int | None = None
                  ) -> IrfResult:
    """Per-draw analytic responses summarized by posterior mean and quantiles.

    A native-unit volatility shock is converted once to a log impulse at the
    posterior-mean panel-average state, so every draw receives the same
    impulse. ``baseline`` picks the state for sigma differencing: ``posterior``
    (that same state), ``draw`` (each draw's own panel average) or ``country``
    (the stationary state of ``country``, per draw).
    """
    D = len(draws)
    if D == 0:
        raise ValueError("no posterior draws")
    spec = draws.spec
    fixed = posterior_baseline(draws)
    requested = shock
    if shock.kind == "volatility":
        shock = ShockSpec("volatility", shock.target, shock_calibration(draws, shock), "log")
    zs = np.empty((D, H + 1, spec.N))
    hs = np.empty_like(zs)
    ss = np.empty_like(zs)
    nonconv = 0
    for d in range(D):
        p = draws[d]
        if baseline == "posterior":
            base = fixed
        elif baseline == "draw":
            base = None
        elif baseline == "country":
            if country is None:
                raise ValueError("baseline='country' needs a country index")
            base = country_baseline(p, country)
        else:
            raise ValueError(f"unknown baseline {baseline!r}")
        r = irf_analytic(p, shock, H, spec, base)
        zs[d], hs[d], ss[d] = r.z, r.h, r.sigma
        nonconv += int(r.nonconvergent)
    cum = zs[:, : min(CUMULATIVE_YEARS, H + 1)].sum(axis=1, keepdims=True)
    return IrfResult(
        shock=requested,
        variables=spec.variables,
        horizons=np.arange(H + 1),
        z=Bands.from_paths(zs),
        sigma=Bands.from_paths(ss),
        h=Bands.from_paths(hs),
        impact=Bands.from_paths(zs[:, :1]),
        cumulative=Bands.from_paths(cum),
        delta=shock.size if shock.kind == "volatility" else 0.0,
        meta={"draws": D, "nonconvergent": nonconv, "baseline": baseline, "country": country,
              "baseline_state": fixed.tolist()},
    )


def structural_zero_check(draws, tol: float = 0.0) -> dict:
    """Horizon-0 responses that recursive ordering forces to zero, over every draw.

    Returns the largest absolute value found for each shock/response pair
    (earlier-ordered variables responding to later-ordered shocks).
    """
    spec = draws.spec
    N = spec.N
    out = {}
    for d in range(len(draws)):
        p = draws[d]
        for j in range(1, N):
            lv = irf_analytic(p, ShockSpec("level", j, 1.0), 0, spec)
            vo = irf_analytic(p, ShockSpec("volatility", j, 1.0, "log"), 0, spec)
            for n in range(j):
                for key, val in ((f"z[{spec.variables[n]}] <- e[{spec.variables[j]}]", lv.z[0, n]),
                                 (f"z[{spec.variables[n]}] <- eta[{spec.variables[j]}]", vo.z[0, n]),
                                 (f"h[{spec.variables[n]}] <- eta[{spec.variables[j]}]", vo.h[0, n])):
                    out[key] = max(out.get(key, 0.0), abs(float(val)))
    return out
