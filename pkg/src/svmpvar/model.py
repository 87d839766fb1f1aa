"""Model parameters and pure functions of them.

Mean equation for country i, year t::

    z_t = c_i + tau_t + sum_j beta_j z_{t-j} + sum_k gamma_k h_{t-k} + extra @ x_t + v_t
    cov(v_t) = A^{-1} diag(exp(h_t)) A^{-T}

Volatility equation::

    h_t = alpha_i + theta h_{t-1} + b0 eta_t,   eta_t ~ N(0, I),  Q = b0 b0'

``h`` is a log-variance of the orthogonalized shocks ``A v_t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import linalg

LOG_2PI = float(np.log(2.0 * np.pi))
EXTRA_REGRESSORS = ("squared_temperature", "squared_gdp", "squared_volatility")


class ContractViolation(ValueError):
    pass


class NonStationaryError(ValueError):
    """Raised when a block is outside its stationary region; ``block`` names it."""

    def __init__(self, block: str, radius: float):
        self.block = block
        self.radius = radius
        super().__init__(f"{block}: spectral radius {radius:.6g} >= 1 (non-stationary)")


# --------------------------------------------------------------------------- specs


@dataclass(frozen=True)
class PriorSpec:
    """Conjugate prior hyperparameters.

    ``q_df=None`` means N + 2. ``initial_state='stationary'`` draws h_0 from the
    stationary law of the volatility VAR (which truncates theta to the
    stationary region); ``'fixed'`` uses N(h0_mean, h0_var I) instead.
    """

    gamma_mean: float = 0.0
    gamma_var: float = 10.0
    impact_var: float = 10.0
    vol_coef_mean: float = 0.0
    vol_coef_var: float = 10.0
    q_df: float | None = None
    q_scale: float = 0.01
    initial_state: str = "stationary"
    h0_mean: float = 0.0
    h0_var: float = 10.0

    def df(self, N: int) -> float:
        return float(N + 2 if self.q_df is None else self.q_df)

    def scale(self, N: int) -> np.ndarray:
        return self.q_scale * np.eye(N)

    def validate(self, N: int):
        for name in ("gamma_var", "impact_var", "vol_coef_var", "q_scale", "h0_var"):
            if not getattr(self, name) > 0:
                raise ValueError(f"prior {name} must be > 0")
        if not self.df(N) > N + 1:
            raise ValueError(f"inverse-Wishart degrees of freedom must exceed N+1 = {N + 1}")
        if self.initial_state not in ("stationary", "fixed"):
            raise ValueError("initial_state must be 'stationary' or 'fixed'")


@dataclass(frozen=True)
class McmcConfig:
    iterations: int = 55_000
    burn_in: int = 5_000
    thin: int = 10
    particle_count: int = 30
    seed: int = 0
    parallel_countries: bool = False
    workers: int = 1
    checkpoint_every: int = 0
    reject_explosive: bool = False
    ancestor_rule: str = "lookahead"
    resampling: str = "multinomial"
    store_states: bool = True

    def validate(self):
        if not 0 <= self.burn_in < self.iterations:
            raise ValueError("need 0 <= burn_in < iterations")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.particle_count < 2:
            raise ValueError("particle_count must be >= 2")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.ancestor_rule not in ("lookahead", "indicator"):
            raise ValueError("ancestor_rule must be 'lookahead' or 'indicator'")
        if self.resampling not in ("multinomial", "systematic"):
            raise ValueError("resampling must be 'multinomial' or 'systematic'")

    @property
    def retained(self) -> int:
        return len(range(self.burn_in, self.iterations, self.thin))

    def keeps(self, iteration: int) -> bool:
        return iteration >= self.burn_in and (iteration - self.burn_in) % self.thin == 0


@dataclass(frozen=True)
class ModelSpec:
    """Model dimensions and options.

    ``variables`` lists the model's variables in identification order; the
    ``climate`` names must form a prefix of it (climate before macro).
    """

    variables: tuple[str, ...]
    climate: tuple[str, ...] = ()
    P: int = 2
    K: int = 1
    country_effects: bool = True
    time_effects: bool = True
    region_by_year: bool = False
    extras: tuple[str, ...] = ()
    theta_diagonal: bool = False
    recursive_gamma: bool = True
    priors: PriorSpec = field(default_factory=PriorSpec)
    mcmc: McmcConfig = field(default_factory=McmcConfig)

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        climate = tuple(self.climate) if self.climate else self.variables[:1]
        object.__setattr__(self, "climate", climate)
        extras = tuple(e for e in EXTRA_REGRESSORS if e in set(self.extras))
        unknown = set(self.extras) - set(EXTRA_REGRESSORS)
        if unknown:
            raise ValueError(f"unknown extra regressors {sorted(unknown)}")
        object.__setattr__(self, "extras", extras)
        self.validate()

    @property
    def N(self) -> int:
        return len(self.variables)

    def validate(self):
        if self.N < 2:
            raise ValueError("N must be >= 2")
        if len(set(self.variables)) != self.N:
            raise ValueError("variable names must be unique")
        if self.P < 1 or self.K < 0:
            raise ValueError("need P >= 1 and K >= 0")
        if tuple(self.variables[: len(self.climate)]) != tuple(self.climate):
            raise ValueError("ordering must place every climate variable before the macro variables")
        self.priors.validate(self.N)
        self.mcmc.validate()

    @property
    def first_obs(self) -> int:
        """Local index of the first usable observation in a country window."""
        return max(self.P, self.K)

    @property
    def n_extra(self) -> int:
        n = 0
        for e in self.extras:
            n += self.N if e == "squared_volatility" else 1
        return n

    def with_mcmc(self, **kw) -> "ModelSpec":
        return replace(self, mcmc=replace(self.mcmc, **kw))

    def with_priors(self, **kw) -> "ModelSpec":
        return replace(self, priors=replace(self.priors, **kw))


# ----------------------------------------------------------------------- parameters


@dataclass
class MeanCoefficients:
    """Mean-equation coefficients.

    c:     (M, N) country intercepts
    tau:   (G, Y, N) time effects per time group (G=1 unless region x year)
    beta:  (P, N, N), beta[j-1][n, m] = effect of z_{t-j, m} on equation n
    gamma: (K+1, N, N), gamma[k][n, m] = effect of h_{t-k, m} on equation n
    extra: (N, E) coefficients on the extra regressors
    """

    c: np.ndarray
    tau: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    extra: np.ndarray

    def copy(self) -> "MeanCoefficients":
        return MeanCoefficients(*(np.array(a) for a in (self.c, self.tau, self.beta, self.gamma, self.extra)))


@dataclass
class ImpactMatrix:
    A: np.ndarray

    def __post_init__(self):
        A = np.array(self.A, dtype=float)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError("A must be square")
        if not np.all(np.diag(A) == 1.0) or np.any(np.triu(A, 1) != 0.0):
            raise ValueError("A must be unit lower triangular")
        self.A = A

    @property
    def N(self) -> int:
        return self.A.shape[0]

    @classmethod
    def identity(cls, N: int) -> "ImpactMatrix":
        return cls(np.eye(N))

    @classmethod
    def from_free(cls, free: Sequence[float], N: int) -> "ImpactMatrix":
        """Build A from its N(N-1)/2 free elements in row-major order (a21, a31, a32, ...)."""
        A = np.eye(N)
        A[np.tril_indices(N, -1)] = np.asarray(free, dtype=float)
        return cls(A)

    @property
    def free(self) -> np.ndarray:
        return self.A[np.tril_indices(self.N, -1)].copy()

    def inverse(self) -> np.ndarray:
        return linalg.solve_triangular(self.A, np.eye(self.N), lower=True, unit_diagonal=True)


@dataclass
class VolatilityParams:
    alpha: np.ndarray  # (M, N)
    theta: np.ndarray  # (N, N)
    Q: np.ndarray  # (N, N)

    def __post_init__(self):
        self.alpha = np.array(self.alpha, dtype=float)
        self.theta = np.array(self.theta, dtype=float)
        self.Q = np.array(self.Q, dtype=float)

    @property
    def b0(self) -> np.ndarray:
        return np.linalg.cholesky(self.Q)

    def copy(self) -> "VolatilityParams":
        return VolatilityParams(self.alpha.copy(), self.theta.copy(), self.Q.copy())


@dataclass
class VolatilityStates:
    h: tuple[np.ndarray, ...]  # per country (T_i, N)

    def __post_init__(self):
        self.h = tuple(np.array(x, dtype=float) for x in self.h)

    def copy(self) -> "VolatilityStates":
        return VolatilityStates(tuple(x.copy() for x in self.h))


@dataclass
class ParameterSet:
    mean: MeanCoefficients
    impact: ImpactMatrix
    vol: VolatilityParams
    states: VolatilityStates | None = None

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            self.mean.copy(),
            ImpactMatrix(self.impact.A.copy()),
            self.vol.copy(),
            None if self.states is None else self.states.copy(),
        )

    def check(self):
        """Raise if any component invariant is violated."""
        ImpactMatrix(self.impact.A)
        Q = self.vol.Q
        if not np.allclose(Q, Q.T, rtol=0, atol=1e-12 * max(1.0, np.abs(Q).max())):
            raise ValueError("Q is not symmetric")
        b0 = np.linalg.cholesky(Q)
        if np.any(np.diag(b0) <= 0):
            raise ValueError("b0 must have a positive diagonal")
        arrays = [self.mean.c, self.mean.tau, self.mean.beta, self.mean.gamma, self.mean.extra,
                  self.vol.alpha, self.vol.theta]
        if self.states is not None:
            arrays.extend(self.states.h)
        for a in arrays:
            if not np.all(np.isfinite(a)):
                raise ValueError("non-finite parameter values")


# -------------------------------------------------------------------- pure functions


def factor_covariance(impact: ImpactMatrix, h_t: np.ndarray) -> np.ndarray:
    """A^{-1} diag(exp(h_t)) A^{-T}."""
    Ainv = impact.inverse()
    out = (Ainv * np.exp(np.asarray(h_t, dtype=float))) @ Ainv.T
    return 0.5 * (out + out.T)


def orthogonalize(v_t: np.ndarray, impact: ImpactMatrix) -> np.ndarray:
    return impact.A @ np.asarray(v_t, dtype=float)


def deorthogonalize(e_t: np.ndarray, impact: ImpactMatrix) -> np.ndarray:
    return linalg.solve_triangular(impact.A, np.asarray(e_t, dtype=float), lower=True, unit_diagonal=True)


def vol_to_sigma(h):
    """Log-variance to standard deviation in the variable's native units."""
    return np.exp(0.5 * np.asarray(h, dtype=float))


def sigma_to_vol(sigma):
    return 2.0 * np.log(np.asarray(sigma, dtype=float))


def gaussian_loglik(resid: np.ndarray, A: np.ndarray, h: np.ndarray) -> np.ndarray:
    """Log N(resid; 0, A^{-1} diag(exp h) A^{-T}), vectorized over leading axes.

    ``resid`` and ``h`` share shape (..., N). det(A) = 1, so the determinant
    term is the sum of h.
    """
    e = np.einsum("nm,...m->...n", A, resid)
    return -0.5 * np.sum(LOG_2PI + h + e * e * np.exp(-h), axis=-1)


def extra_regressors(spec: ModelSpec, z_lag1: np.ndarray, h_t: np.ndarray) -> np.ndarray:
    """Extra mean-equation columns: lagged squared levels, then squared current volatilities."""
    cols = []
    for e in spec.extras:
        if e == "squared_temperature":
            cols.append(z_lag1[..., :1] ** 2)
        elif e == "squared_gdp":
            cols.append(z_lag1[..., -1:] ** 2)
        elif e == "squared_volatility":
            cols.append(h_t ** 2)
    if not cols:
        return np.zeros(np.shape(h_t)[:-1] + (0,))
    return np.concatenate(cols, axis=-1)


@dataclass(frozen=True)
class Regressors:
    """Regressors for one observation other than the volatility states.

    z_lags: (P, N) with z_lags[0] = z_{t-1}; ``time_group``/``year`` index tau.
    """

    z_lags: np.ndarray
    year: int
    time_group: int = 0


def conditional_mean(
    spec: ModelSpec,
    mean: MeanCoefficients,
    country: int,
    regressors: Regressors,
    h_lags: np.ndarray,
) -> np.ndarray:
    """Mean of z_t; ``h_lags`` is (K+1, N) with h_lags[0] = h_t."""
    z_lags = np.asarray(regressors.z_lags, dtype=float)
    h_lags = np.asarray(h_lags, dtype=float)
    if z_lags.shape[0] < spec.P:
        raise ContractViolation(f"need {spec.P} lags of z, got {z_lags.shape[0]}")
    if h_lags.shape[0] < spec.K + 1:
        raise ContractViolation(f"need {spec.K + 1} volatility terms, got {h_lags.shape[0]}")
    mu = mean.c[country] + mean.tau[regressors.time_group, regressors.year]
    for j in range(spec.P):
        mu = mu + mean.beta[j] @ z_lags[j]
    for k in range(spec.K + 1):
        mu = mu + mean.gamma[k] @ h_lags[k]
    if spec.extras:
        mu = mu + mean.extra @ extra_regressors(spec, z_lags[0], h_lags[0])
    return mu


def observation_loglik(
    z_t: np.ndarray,
    regressors: Regressors,
    params: ParameterSet,
    country: int,
    t: int,
    spec: ModelSpec,
) -> float:
    """Gaussian log density of z_t given lags and the country's volatility path.

    ``t`` is the local index of the observation in the country's window.
    """
    if params.states is None:
        raise ContractViolation("parameter set carries no volatility states")
    h = params.states.h[country]
    if t < spec.K or t >= h.shape[0]:
        raise ContractViolation(f"t={t} leaves too few volatility lags (K={spec.K})")
    h_lags = h[t - spec.K : t + 1][::-1]
    mu = conditional_mean(spec, params.mean, country, regressors, h_lags)
    return float(gaussian_loglik(np.asarray(z_t, dtype=float) - mu, params.impact.A, h[t]))


def companion_matrix(beta: np.ndarray) -> np.ndarray:
    beta = np.asarray(beta, dtype=float)
    P, N, _ = beta.shape
    C = np.zeros((N * P, N * P))
    C[:N] = np.hstack(list(beta))
    if P > 1:
        C[N:, : N * (P - 1)] = np.eye(N * (P - 1))
    return C


def spectral_radius(M: np.ndarray) -> float:
    M = np.asarray(M, dtype=float)
    if M.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def is_stationary(theta: np.ndarray) -> bool:
    return spectral_radius(theta) < 1.0


def fixed_point(
    spec: ModelSpec,
    mean: MeanCoefficients,
    country: int,
    h_bar: np.ndarray,
    time_group: int = 0,
    year: int | None = None,
) -> np.ndarray:
    """Deterministic steady state of z with volatilities held at ``h_bar``.

    Squared lagged-level regressors are left out (the steady state is then
    nonlinear); squared volatilities are included.
    """
    N = spec.N
    rhs = mean.c[country] + mean.gamma.sum(axis=0) @ h_bar
    if year is not None:
        rhs = rhs + mean.tau[time_group, year]
    if "squared_volatility" in spec.extras:
        extra = extra_regressors(spec, np.zeros(N), h_bar)
        cols = [i for i, name in enumerate(extra_labels(spec)) if name.startswith("squared_volatility")]
        rhs = rhs + mean.extra[:, cols] @ extra[cols]
    return np.linalg.solve(np.eye(N) - mean.beta.sum(axis=0), rhs)


def extra_labels(spec: ModelSpec) -> list[str]:
    labels = []
    for e in spec.extras:
        if e == "squared_volatility":
            labels.extend(f"squared_volatility[{v}]" for v in spec.variables)
        else:
            labels.append(e)
    return labels

