"""Chain diagnostics and descriptive summaries of the estimated volatilities."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import vol_to_sigma
from .panel import PanelDataset


class UndefinedAutocorrelationError(ValueError):
    pass


def parzen(x):
    x = np.abs(np.asarray(x, dtype=float))
    return np.where(x <= 0.5, 1 - 6 * x**2 + 6 * x**3, np.where(x <= 1.0, 2 * (1 - x) ** 3, 0.0))


def autocorrelations(chain, max_lag: int) -> np.ndarray:
    """Sample autocorrelations rho_1..rho_max_lag (FFT, biased normalization)."""
    x = np.asarray(chain, dtype=float)
    x = x - x.mean()
    n = x.size
    var = x @ x / n
    if not var > 0:
        raise UndefinedAutocorrelationError("chain is constant; autocorrelations are undefined")
    size = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[: max_lag + 1] / n
    return acov[1:] / acov[0]


def andrews_bandwidth(chain) -> int:
    """Parzen plug-in lag window from an AR(1) fit."""
    x = np.asarray(chain, dtype=float)
    n = x.size
    rho = float(np.clip(autocorrelations(x, 1)[0], -0.97, 0.97))
    a2 = 4 * rho**2 / (1 - rho) ** 4
    L = 2.6614 * (max(a2, 1e-12) * n) ** 0.2
    return int(np.clip(np.ceil(L), 1, max(1, (n - 1) // 2)))


def inefficiency_factor(chain, max_lag: int | str | None = None) -> float:
    """1 + 2 sum_l w_l rho_l with Parzen weights w_l = k(l / max_lag).

    ``max_lag`` may be an integer, ``"sqrt"`` for 4 sqrt(n), or None for the
    data-driven plug-in bandwidth (the default, which is far less noisy on
    long chains).
    """
    x = np.asarray(chain, dtype=float).ravel()
    n = x.size
    if n < 3:
        raise ValueError("chain too short")
    if max_lag is None:
        max_lag = andrews_bandwidth(x)
    elif max_lag == "sqrt":
        max_lag = int(4 * np.sqrt(n))
    max_lag = int(max_lag)
    if max_lag < 1:
        raise ValueError("max_lag must be >= 1")
    if n <= 2 * max_lag:
        raise ValueError(f"chain length {n} must exceed 2*max_lag = {2 * max_lag}")
    rho = autocorrelations(x, max_lag)
    w = parzen(np.arange(1, max_lag + 1) / max_lag)
    return float(1 + 2 * np.sum(w * rho))


def effective_size(chain, max_lag=None) -> float:
    return np.asarray(chain).size / inefficiency_factor(chain, max_lag)


# ------------------------------------------------------------- volatilities


def _country_states(draws):
    if draws.states is None:
        raise ValueError("draws carry no volatility paths; estimate with store_states enabled")
    return draws.states


@dataclass
class TrendRow:
    region: str
    countries: int
    mean: float
    q05: float
    q16: float
    q84: float
    q95: float


def volatility_trend_table(draws, ds: PanelDataset, variable: int = 0) -> list[TrendRow]:
    """Per region, the posterior of sigma_last - sigma_first averaged over member countries.

    Changes run from the first to the last year of each country's window; the
    region average is unweighted. A final row ``all`` pools every country.
    """
    if len(draws) == 0:
        raise ValueError("no posterior draws")
    states = _country_states(draws)
    change = np.stack([vol_to_sigma(s[:, -1, variable]) - vol_to_sigma(s[:, 0, variable]) for s in states], axis=1)
    regions = [c.region for c in ds.countries]
    rows = []
    for name in sorted(set(regions)) + ["all"]:
        members = [i for i, r in enumerate(regions) if name == "all" or r == name]
        avg = change[:, members].mean(axis=1)
        q = np.quantile(avg, (0.05, 0.16, 0.84, 0.95))
        rows.append(TrendRow(name, len(members), float(avg.mean()), *map(float, q)))
    return rows


@dataclass
class ScatterResult:
    countries: tuple[str, ...]
    level_change: np.ndarray
    sigma_change: np.ndarray
    correlation: float | None


def level_vol_scatter(draws, ds: PanelDataset, variable: int = 0) -> ScatterResult:
    """Per country: change in the level vs. posterior-mean change in sigma.

    The correlation is None when it is undefined (fewer than two countries or
    no variation).
    """
    sig = []
    lev = []
    for i in range(ds.M):
        a, b = ds.windows[i]
        if b - a < 2:
            raise ValueError(f"country {ds.country_ids[i]} has fewer than two years")
        z = ds.values[i, a:b, variable]
        lev.append(z[-1] - z[0])
        if draws.states is not None:
            s = draws.states[i][:, :, variable]
            sig.append(float(np.mean(vol_to_sigma(s[:, -1]) - vol_to_sigma(s[:, 0]))))
        else:
            m = draws.state_mean[i][:, variable]
            sig.append(float(vol_to_sigma(m[-1]) - vol_to_sigma(m[0])))
    lev, sig = np.array(lev), np.array(sig)
    corr = None
    if ds.M >= 2 and np.std(lev) > 0 and np.std(sig) > 0:
        corr = float(np.corrcoef(lev, sig)[0, 1])
    return ScatterResult(ds.country_ids, lev, sig, corr)


# ------------------------------------------------------------------- report


@dataclass
class DiagnosticReport:
    inefficiency: dict[str, float]
    ess: dict[str, float]
    trends: list[TrendRow] | None = None
    scatter: ScatterResult | None = None
    geweke: list | None = None
    meta: dict = field(default_factory=dict)

    def text(self) -> str:
        lines = ["Chain diagnostics", ""]
        for k, v in self.meta.items():
            lines.append(f"{k}: {v}")
        lines += ["", "Particle sweeps:"]
        lines += [f"  {k}: {v:.4g}" for k, v in self.ess.items()]
        vals = np.array([v for v in self.inefficiency.values() if np.isfinite(v)])
        lines += ["", f"Inefficiency factors ({len(self.inefficiency)} parameters)"]
        if vals.size:
            lines.append(f"  median {np.median(vals):.3g}, max {vals.max():.3g}")
        worst = sorted(((v, k) for k, v in self.inefficiency.items() if np.isfinite(v)), reverse=True)[:10]
        lines += [f"  {k}: {v:.3g}" for v, k in worst]
        if self.trends:
            lines += ["", "Cumulative change in climate volatility (sigma, native units)"]
            for r in self.trends:
                lines.append(f"  {r.region:<24} n={r.countries:<4} {r.mean:+.4f}  68% [{r.q16:+.4f}, {r.q84:+.4f}]")
        if self.scatter is not None:
            c = self.scatter.correlation
            lines += ["", f"Level vs. volatility change correlation: {'undefined' if c is None else f'{c:.3f}'}"]
        if self.geweke:
            zs = np.array([r.z for r in self.geweke])
            lines += ["", f"Joint distribution test: max |z| = {np.nanmax(np.abs(zs)):.2f} over {zs.size} functionals"]
        return "\n".join(lines) + "\n"

    def write(self, directory, header: dict | None = None):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        head = "".join(f"# {k}: {v}\n" for k, v in (header or {}).items())
        (d / "report.txt").write_text(head + self.text())
        _csv(d / "inefficiency.csv", ("parameter", "inefficiency"), sorted(self.inefficiency.items()), head)
        _csv(d / "ess.csv", ("statistic", "value"), list(self.ess.items()), head)
        if self.trends is not None:
            _csv(d / "volatility_trends.csv", ("region", "countries", "mean", "q05", "q16", "q84", "q95"),
                 [(r.region, r.countries, r.mean, r.q05, r.q16, r.q84, r.q95) for r in self.trends], head)
        if self.scatter is not None:
            s = self.scatter
            _csv(d / "level_vol_scatter.csv", ("country", "level_change", "sigma_change"),
                 list(zip(s.countries, s.level_change, s.sigma_change)), head)
        if self.geweke is not None:
            _csv(d / "joint_test.csv", ("functional", "marginal_mean", "marginal_se", "successive_mean",
                                        "successive_se", "z"),
                 [(r.name, r.mc_mean, r.mc_se, r.sc_mean, r.sc_se, r.z) for r in self.geweke], head)


def _csv(path, columns, rows, head):
    with open(path, "w", newline="") as f:
        f.write(head)
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])


def build_report(draws, ds: PanelDataset | None = None, geweke=None, variable: int = 0) -> DiagnosticReport:
    labels, X = draws.flat()
    ineff = {}
    for j, name in enumerate(labels):
        try:
            ineff[name] = inefficiency_factor(X[:, j])
        except ValueError:
            ineff[name] = float("nan")
    ess = {}
    tr = draws.traces.get("ess_min")
    if tr is not None and np.isfinite(tr).any():
        ess = {"min_ess_lowest": float(np.nanmin(tr)), "min_ess_median": float(np.nanmedian(tr))}
    fb = draws.traces.get("fallbacks")
    if fb is not None:
        ess["fallback_steps_total"] = float(np.sum(fb))
    trends = scatter = None
    if ds is not None:
        if draws.states is not None:
            trends = volatility_trend_table(draws, ds, variable)
        scatter = level_vol_scatter(draws, ds, variable)
    meta = {"retained_draws": len(draws)}
    meta.update({k: v for k, v in draws.meta.items() if isinstance(v, (int, float))})
    return DiagnosticReport(ineff, ess, trends, scatter, geweke, meta)
