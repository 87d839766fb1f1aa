"""Joint-distribution check of the full sampler.

Two ways of drawing (parameters, states, data) from the joint model must
agree: independent draws from the prior (marginal-conditional) and a chain
that alternates one sampler sweep with a fresh data draw given the current
parameters and states (successive-conditional). Disagreement in any moment of
the battery below means some block does not target its conditional.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import stats

from . import rng as rng_mod
from .design import PanelDesign
from .diagnostics import inefficiency_factor
from .gibbs import gibbs_iteration, initial_moments
from .model import (
    ImpactMatrix,
    ModelSpec,
    ParameterSet,
    PriorSpec,
    Regressors,
    VolatilityParams,
    VolatilityStates,
    conditional_mean,
    deorthogonalize,
    spectral_radius,
)
from .panel import from_arrays

BATTERY_VERSION = 1


def tiny_spec(particle_count: int = 20, seed: int = 0) -> ModelSpec:
    """The small configuration the check is calibrated on (N=2, P=1, K=1)."""
    priors = PriorSpec(gamma_var=0.1, impact_var=0.1, vol_coef_mean=0.0, vol_coef_var=0.1, q_df=10.0,
                       q_scale=0.7, initial_state="stationary")
    return ModelSpec(variables=("temp", "gdp"), P=1, K=1, time_effects=False, priors=priors).with_mcmc(
        iterations=2, burn_in=0, thin=1, particle_count=particle_count, seed=seed, store_states=False)


@dataclass
class GewekeRow:
    name: str
    mc_mean: float
    mc_se: float
    sc_mean: float
    sc_se: float
    z: float


@dataclass
class GewekeResult:
    rows: list[GewekeRow]
    n_draws: int
    mutation: str | None
    seconds: float
    battery_version: int = BATTERY_VERSION

    @property
    def max_abs_z(self) -> float:
        return float(np.nanmax(np.abs([r.z for r in self.rows])))


# ---------------------------------------------------------------- functionals


def battery(spec: ModelSpec, M: int) -> list[str]:
    """Names of the fixed functionals: first and second moments of every free scalar."""
    v = spec.variables
    N = spec.N
    names = []
    names += [f"c[{i},{v[n]}]" for i in range(M) for n in range(N)]
    names += [f"beta{j + 1}[{v[n]},{v[m]}]" for j in range(spec.P) for n in range(N) for m in range(N)]
    names += [f"gamma{k}[{v[n]},{v[m]}]" for k in range(spec.K + 1) for n in range(N) for m in range(N)
              if not (k == 0 and spec.recursive_gamma and m > n)]
    names += [f"A[{v[n]},{v[m]}]" for n in range(1, N) for m in range(n)]
    names += [f"alpha[{i},{v[n]}]" for i in range(M) for n in range(N)]
    names += [f"theta[{v[n]},{v[m]}]" for n in range(N) for m in range(N) if not (spec.theta_diagonal and m != n)]
    names += [f"Q[{v[n]},{v[m]}]" for n in range(N) for m in range(n + 1)]
    names += [f"mean h[{v[n]}]" for n in range(N)]
    return [f"E {x}" for x in names] + [f"E sq {x}" for x in names]


def evaluate(p: ParameterSet, spec: ModelSpec) -> np.ndarray:
    N = spec.N
    g = p.mean.gamma
    parts = [p.mean.c.ravel(), p.mean.beta.ravel()]
    parts += [np.array([g[k, n, m] for k in range(spec.K + 1) for n in range(N) for m in range(N)
                        if not (k == 0 and spec.recursive_gamma and m > n)])]
    parts += [p.impact.free, p.vol.alpha.ravel()]
    th = p.vol.theta
    parts += [np.diag(th) if spec.theta_diagonal else th.ravel()]
    parts += [p.vol.Q[np.tril_indices(N)]]
    parts += [np.concatenate(p.states.h).mean(axis=0)]
    x = np.concatenate(parts)
    return np.concatenate([x, x * x])


# ------------------------------------------------------------------ simulators


def draw_prior(spec: ModelSpec, design: PanelDesign, g: np.random.Generator) -> ParameterSet:
    """Parameters and volatility paths from the prior the sampler assumes."""
    pri = spec.priors
    N = spec.N
    M = design.M
    free = design.mask.T.reshape(-1)
    vecG = np.zeros(N * design.k)
    vecG[free] = pri.gamma_mean + np.sqrt(pri.gamma_var) * g.standard_normal(int(free.sum()))
    mean = design.to_coefficients(vecG.reshape(N, design.k).T)

    A = np.eye(N)
    idx = np.tril_indices(N, -1)
    A[idx] = np.sqrt(pri.impact_var) * g.standard_normal(len(idx[0]))

    while True:
        theta = pri.vol_coef_mean + np.sqrt(pri.vol_coef_var) * g.standard_normal((N, N))
        if spec.theta_diagonal:
            theta = np.diag(np.diag(theta))
        if pri.initial_state != "stationary" or spectral_radius(theta) < 1.0:
            break
    mu = pri.vol_coef_mean + np.sqrt(pri.vol_coef_var) * g.standard_normal((M, N))
    alpha = mu @ (np.eye(N) - theta).T
    Q = np.atleast_2d(stats.invwishart.rvs(df=pri.df(N), scale=pri.scale(N), random_state=g))
    vol = VolatilityParams(alpha, theta, 0.5 * (Q + Q.T))
    p = ParameterSet(mean, ImpactMatrix(A), vol)
    p.states = draw_states_prior(p, spec, design.lengths, g)
    return p


def draw_states_prior(p: ParameterSet, spec: ModelSpec, lengths, g) -> VolatilityStates:
    m0, L0 = initial_moments(p.vol, spec.priors)
    b0 = p.vol.b0
    paths = []
    for i, T_i in enumerate(lengths):
        h = np.zeros((int(T_i), spec.N))
        h[0] = m0[i] + L0 @ g.standard_normal(spec.N)
        for t in range(1, int(T_i)):
            h[t] = p.vol.alpha[i] + p.vol.theta @ h[t - 1] + b0 @ g.standard_normal(spec.N)
        paths.append(h)
    return VolatilityStates(tuple(paths))


def draw_data(p: ParameterSet, spec: ModelSpec, M: int, T: int, g) -> np.ndarray:
    """Data given parameters and paths; the presample levels are held at zero."""
    N, P, K = spec.N, spec.P, spec.K
    s0 = spec.first_obs
    z = np.zeros((M, T, N))
    for i in range(M):
        h = p.states.h[i]
        for t in range(s0, T):
            reg = Regressors(z_lags=z[i, t - P : t][::-1], year=0)
            mu = conditional_mean(spec, p.mean, i, reg, h[t - K : t + 1][::-1])
            e = np.exp(0.5 * h[t]) * g.standard_normal(N)
            z[i, t] = mu + deorthogonalize(e, p.impact)
    return z


def _design(z: np.ndarray, spec: ModelSpec) -> PanelDesign:
    M, T, N = z.shape
    ds = from_arrays(z, range(T), spec.variables, ["native"] * N, [f"C{i}" for i in range(M)])
    return PanelDesign(ds, spec)


def geweke_joint_test(
    spec: ModelSpec | None = None,
    n_draws: int = 5000,
    seed: int = 0,
    M: int = 2,
    T: int = 20,
    mutation: str | None = None,
    progress=None,
) -> GewekeResult:
    """z-scores comparing marginal-conditional and successive-conditional moments.

    ``mutation="q_drop_data"`` runs the successive-conditional chain with a
    deliberately broken Q update, which the test must detect.
    """
    t0 = time.time()
    spec = spec or tiny_spec(seed=seed)
    if spec.time_effects:
        raise ValueError("the joint check holds the time effects out; use time_effects=False")
    layout = _design(np.zeros((M, T, spec.N)), spec)

    g = rng_mod.stream(seed, "geweke-marginal")
    mc = np.array([evaluate(draw_prior(spec, layout, g), spec) for _ in range(n_draws)])

    g = rng_mod.stream(seed, "geweke-successive")
    cur = draw_prior(spec, layout, g)
    z = draw_data(cur, spec, M, T, g)
    sc = np.empty_like(mc)
    for it in range(n_draws):
        design = _design(z, spec)
        cur = gibbs_iteration(design, cur, it, seed, mutation=mutation)
        sc[it] = evaluate(cur, spec)
        z = draw_data(cur, spec, M, T, g)
        if progress is not None:
            progress(it)

    rows = []
    for j, name in enumerate(battery(spec, M)):
        a, b = mc[:, j], sc[:, j]
        se_a = a.std(ddof=1) / np.sqrt(n_draws)
        try:
            se_b = np.sqrt(b.var(ddof=1) * max(inefficiency_factor(b), 1.0) / n_draws)
        except ValueError:
            se_b = 0.0
        den = np.hypot(se_a, se_b)
        zval = (a.mean() - b.mean()) / den if den > 0 else 0.0
        rows.append(GewekeRow(name, float(a.mean()), float(se_a), float(b.mean()), float(se_b), float(zval)))
    return GewekeResult(rows, n_draws, mutation, time.time() - t0)
