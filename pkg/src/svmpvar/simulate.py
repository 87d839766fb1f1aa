"""Synthetic panels from known parameters."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import linalg

from . import rng as rng_mod
from .model import (
    ImpactMatrix,
    MeanCoefficients,
    ModelSpec,
    NonStationaryError,
    ParameterSet,
    Regressors,
    VolatilityParams,
    VolatilityStates,
    companion_matrix,
    conditional_mean,
    deorthogonalize,
    fixed_point,
    spectral_radius,
)
from .panel import CountryMeta, PanelDataset, from_arrays

OVERFLOW_Z = 1e8
OVERFLOW_H = 60.0


class SimulationDivergenceError(RuntimeError):
    def __init__(self, block: str, country: int, period: int):
        self.block = block
        super().__init__(f"simulated path diverged (block {block!r}, country {country}, period {period})")


@dataclass
class SimulationRecord:
    dataset: PanelDataset
    true_states: VolatilityStates
    true_params: ParameterSet
    level_shocks: list[np.ndarray]  # orthogonalized e_t = A v_t, (T, N) per country
    vol_shocks: list[np.ndarray]  # eta_t, (T, N) per country
    seed: int
    spec: ModelSpec


def stationary_state_moments(vol: VolatilityParams) -> tuple[np.ndarray, np.ndarray]:
    """Unconditional mean per country (M, N) and common covariance (N, N) of h."""
    radius = spectral_radius(vol.theta)
    if radius >= 1.0:
        raise NonStationaryError("theta", radius)
    N = vol.theta.shape[0]
    mean = np.linalg.solve(np.eye(N) - vol.theta, np.atleast_2d(vol.alpha).T).T
    cov = linalg.solve_discrete_lyapunov(vol.theta, vol.Q)
    return mean, 0.5 * (cov + cov.T)


def _check_stationary(spec: ModelSpec, params: ParameterSet):
    r = spectral_radius(params.vol.theta)
    if r >= 1.0:
        raise NonStationaryError("theta", r)
    r = spectral_radius(companion_matrix(params.mean.beta))
    if r >= 1.0:
        raise NonStationaryError("beta", r)


def simulate_panel(
    params: ParameterSet,
    spec: ModelSpec,
    M: int,
    T: int,
    burn_in: int = 200,
    seed: int = 0,
    years: Sequence[int] | None = None,
    countries: Sequence[CountryMeta] | None = None,
    time_group: Sequence[int] | None = None,
    zero_shocks: bool = False,
) -> SimulationRecord:
    """Simulate M countries for T recorded periods after ``burn_in`` discarded ones.

    The volatility process starts from its stationary law K periods before the
    first simulated period; level lags start at the deterministic fixed point.
    Time effects apply to recorded periods only. Each country draws from its
    own substream, so the result does not depend on M-ordering of the work.
    """
    _check_stationary(spec, params)
    N, P, K = spec.N, spec.P, spec.K
    if params.vol.alpha.shape != (M, N) or params.mean.c.shape != (M, N):
        raise ValueError("params must carry (M, N) alpha and c")
    if params.mean.tau.shape[1] != T:
        raise ValueError("params.mean.tau must have T years")
    if years is None:
        years = range(1961, 1961 + T)
    if countries is None:
        countries = [CountryMeta(id=f"C{i:03d}") for i in range(M)]
    groups = np.zeros(M, dtype=int) if time_group is None else np.asarray(time_group, dtype=int)

    h_bar, h_cov = stationary_state_moments(params.vol)
    L_cov = np.linalg.cholesky(h_cov)
    b0 = params.vol.b0
    A = params.impact
    theta = params.vol.theta
    total = burn_in + T

    values = np.zeros((M, T, N))
    states, e_store, eta_store = [], [], []
    for i in range(M):
        g = rng_mod.stream(seed, "simulate", i)
        xi = g.standard_normal(N)
        eta = g.standard_normal((total + K, N))
        eps = g.standard_normal((total, N))
        if zero_shocks:
            xi[:] = 0.0
            eta[:] = 0.0
            eps[:] = 0.0
        # h at periods -K .. total-1
        h = np.zeros((total + K, N))
        h[0] = h_bar[i] + L_cov @ xi
        for u in range(1, total + K):
            h[u] = params.vol.alpha[i] + theta @ h[u - 1] + b0 @ eta[u]
            if not np.all(np.abs(h[u]) < OVERFLOW_H):
                raise SimulationDivergenceError("theta", i, u - K)
        z_start = fixed_point(spec, params.mean, i, h_bar[i])
        z = np.zeros((total + P, N))
        z[:P] = z_start
        e_orth = np.zeros((total, N))
        for u in range(total):
            hist = h[u : u + K + 1][::-1]  # h_u, h_{u-1}, ..., h_{u-K}
            rec = u >= burn_in
            reg = Regressors(z_lags=z[u : u + P][::-1], year=u - burn_in if rec else 0, time_group=int(groups[i]))
            mean = params.mean if rec else _without_tau(params.mean)
            mu = conditional_mean(spec, mean, i, reg, hist)
            e_orth[u] = np.exp(0.5 * hist[0]) * eps[u]
            z[u + P] = mu + deorthogonalize(e_orth[u], A)
            if not np.all(np.abs(z[u + P]) < OVERFLOW_Z):
                raise SimulationDivergenceError("beta", i, u)
        values[i] = z[P + burn_in :]
        states.append(h[K + burn_in :].copy())
        e_store.append(e_orth[burn_in:].copy())
        eta_store.append(eta[K + burn_in :].copy())

    ds = from_arrays(values, years, spec.variables, ["native"] * N, countries)
    true_states = VolatilityStates(tuple(states))
    truth = params.copy()
    truth.states = true_states
    return SimulationRecord(ds, true_states, truth, e_store, eta_store, seed, spec)


def _without_tau(mean: MeanCoefficients) -> MeanCoefficients:
    return MeanCoefficients(mean.c, np.zeros_like(mean.tau), mean.beta, mean.gamma, mean.extra)


def replay_observation(record: SimulationRecord, country: int, t: int) -> np.ndarray:
    """Recompute z_t (t >= P, t >= K local index) from stored states and level shocks."""
    spec = record.spec
    P, K = spec.P, spec.K
    z = record.dataset.window_values(country)
    h = record.true_states.h[country]
    reg = Regressors(z_lags=z[t - P : t][::-1], year=t, time_group=0)
    mu = conditional_mean(spec, record.true_params.mean, country, reg, h[t - K : t + 1][::-1])
    return mu + deorthogonalize(record.level_shocks[country][t], record.true_params.impact)


def demo_parameters(
    spec: ModelSpec,
    M: int,
    T: int,
    seed: int = 0,
    theta: np.ndarray | None = None,
    Q: np.ndarray | None = None,
    gamma0: np.ndarray | None = None,
) -> ParameterSet:
    """A stable, volatility-in-mean calibration for tests and demonstrations.

    Temperature-like first variable, growth-like last variable; volatility
    raises temperature and lowers growth, and spills over from the first
    volatility to the last.
    """
    N, P, K = spec.N, spec.P, spec.K
    g = rng_mod.stream(seed, "demo-parameters")
    beta = np.zeros((P, N, N))
    beta[0] = 0.3 * np.eye(N)
    beta[0][N - 1, 0] = 0.1
    if P > 1:
        beta[1] = 0.1 * np.eye(N)
    gamma = np.zeros((K + 1, N, N))
    if gamma0 is None:
        gamma[0] = np.diag(np.linspace(0.4, -0.4, N))
        gamma[0][N - 1, 0] = -0.5
    else:
        gamma[0] = np.asarray(gamma0, dtype=float)
    for k in range(1, K + 1):
        gamma[k] = 0.5 ** k * gamma[0] * np.tri(N)
    if theta is None:
        theta = 0.9 * np.eye(N)
        theta[N - 1, 0] = 0.05
    if Q is None:
        Q = np.diag(np.full(N, 0.08))
        Q[N - 1, 0] = Q[0, N - 1] = 0.02
    h_bar = np.linspace(-1.0, 0.0, N)
    alpha = (np.eye(N) - theta) @ (h_bar[:, None] + 0.3 * g.standard_normal((N, M)))
    c = 0.5 * g.standard_normal((M, N))
    tau = np.zeros((1, T, N))
    if spec.time_effects:
        # the first observed year carries no dummy; earlier years are presample
        s0 = spec.first_obs + 1
        tau[0, s0:] = 0.2 * g.standard_normal((T - s0, N))
    A = np.eye(N)
    A[np.tril_indices(N, -1)] = 0.3
    n_extra = spec.n_extra
    return ParameterSet(
        mean=MeanCoefficients(c=c, tau=tau, beta=beta, gamma=gamma, extra=np.zeros((N, n_extra))),
        impact=ImpactMatrix(A),
        vol=VolatilityParams(alpha=alpha.T, theta=theta, Q=Q),
    )
