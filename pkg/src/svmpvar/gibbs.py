"""Closed-form Gibbs blocks and the chain driver.

One iteration updates, in order: the mean coefficients (GLS), the impact
matrix (row regressions), the volatility VAR coefficients, Q, and finally the
volatility paths by CPF-AS. Every block draws from its own keyed substream
``(seed, block, iteration[, country])``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, stats

from . import rng as rng_mod
from .design import PanelDesign
from .model import (
    ImpactMatrix,
    MeanCoefficients,
    ModelSpec,
    ParameterSet,
    PriorSpec,
    VolatilityParams,
    VolatilityStates,
    companion_matrix,
    spectral_radius,
)
from .panel import PanelDataset
from .pgas import SVObservation, SweepNoise, SweepResult, Transition, WeightUnderflowError, cpf_as_batch, sv_sweep

log = logging.getLogger(__name__)


class SamplerError(ArithmeticError):
    pass


class SingularPosteriorError(SamplerError):
    def __init__(self, block: str, condition: float):
        self.block = block
        self.condition = condition
        super().__init__(f"{block}: posterior precision is singular (condition number {condition:.3g})")


class ChainError(RuntimeError):
    def __init__(self, iteration: int, block: str, cause: BaseException, checkpoint=None):
        self.iteration = iteration
        self.block = block
        self.checkpoint = checkpoint
        where = f"; resume from {checkpoint}" if checkpoint else ""
        super().__init__(f"iteration {iteration}, block {block}: {cause}{where}")


def _chol_precision(P: np.ndarray, block: str) -> np.ndarray:
    P = 0.5 * (P + P.T)
    try:
        return linalg.cholesky(P, lower=True)
    except linalg.LinAlgError:
        raise SingularPosteriorError(block, float(np.linalg.cond(P))) from None


def _gaussian_draw(P: np.ndarray, b: np.ndarray, rng, block: str) -> tuple[np.ndarray, np.ndarray]:
    """Draw from N(P^{-1} b, P^{-1}); returns (draw, mean)."""
    L = _chol_precision(P, block)
    mean = linalg.cho_solve((L, True), b)
    z = rng.standard_normal(b.shape[0])
    return mean + linalg.solve_triangular(L.T, z, lower=False), mean


# ------------------------------------------------------------------ mean block


def _as_design(data, spec: ModelSpec | None) -> PanelDesign:
    if isinstance(data, PanelDesign):
        return data
    if isinstance(data, PanelDataset):
        if spec is None:
            raise ValueError("a ModelSpec is needed with a PanelDataset")
        return PanelDesign(data, spec)
    raise TypeError("expected a PanelDesign or PanelDataset")


def gls_system(design: PanelDesign, A: np.ndarray, h) -> tuple[np.ndarray, np.ndarray]:
    """Likelihood precision and score of vec(G) (equation-major) given A and h.

    Row r contributes (I kron x_r) W_r (I kron x_r') with W_r = A' diag(exp(-h_r)) A.
    """
    N, k = design.N, design.k
    X = design.X(h)
    inv = np.exp(-design.obs_h(h))
    W = np.einsum("ln,lm,rl->rnm", A, A, inv)
    Wy = np.einsum("rnm,rm->rn", W, design.y)
    prec = np.zeros((N * k, N * k))
    score = np.zeros(N * k)
    for n in range(N):
        score[n * k : (n + 1) * k] = X.T @ Wy[:, n]
        for m in range(n, N):
            blk = (X * W[:, n, m][:, None]).T @ X
            prec[n * k : (n + 1) * k, m * k : (m + 1) * k] = blk
            if m != n:
                prec[m * k : (m + 1) * k, n * k : (n + 1) * k] = blk.T
    return prec, score


def mean_posterior(design: PanelDesign, A: np.ndarray, h, priors: PriorSpec):
    """Posterior precision, right-hand side and free-coefficient index of vec(G)."""
    prec, score = gls_system(design, A, h)
    free = design.mask.T.reshape(-1)
    P = prec[np.ix_(free, free)] + np.eye(int(free.sum())) / priors.gamma_var
    b = score[free] + priors.gamma_mean / priors.gamma_var
    return P, b, free


def _vec_to_G(design: PanelDesign, g_free: np.ndarray, free: np.ndarray) -> np.ndarray:
    g = np.zeros(design.N * design.k)
    g[free] = g_free
    return g.reshape(design.N, design.k).T.copy()


def posterior_mean_coefficients(design: PanelDesign, A: np.ndarray, h, priors: PriorSpec) -> np.ndarray:
    P, b, free = mean_posterior(design, A, h, priors)
    L = _chol_precision(P, "mean coefficients")
    return _vec_to_G(design, linalg.cho_solve((L, True), b), free)


def draw_mean_coefficients(data, current: ParameterSet, rng, spec: ModelSpec | None = None) -> MeanCoefficients:
    """Draw the mean coefficients given A and the volatility paths in ``current``."""
    design = _as_design(data, spec)
    if current.states is None:
        raise ValueError("current parameter set carries no volatility states")
    G = _draw_G(design, current.impact.A, current.states.h, design.spec.priors, rng)
    return design.to_coefficients(G)


def _draw_G(design, A, h, priors, rng) -> np.ndarray:
    P, b, free = mean_posterior(design, A, h, priors)
    g, _ = _gaussian_draw(P, b, rng, "mean coefficients")
    return _vec_to_G(design, g, free)


# ---------------------------------------------------------------- impact block


def draw_impact_matrix(residuals: np.ndarray, obs_h: np.ndarray, priors: PriorSpec, rng, return_mean=False):
    """Row n of A from the weighted regression of v_n on -v_1..-v_{n-1}.

    ``residuals`` and ``obs_h`` are (n_obs, N); the weights are exp(-h_n).
    """
    v = np.asarray(residuals, dtype=float)
    N = v.shape[1]
    A = np.eye(N)
    means = np.eye(N)
    for n in range(1, N):
        Xn = -v[:, :n]
        w = np.exp(-obs_h[:, n])
        P = (Xn * w[:, None]).T @ Xn + np.eye(n) / priors.impact_var
        b = Xn.T @ (w * v[:, n])
        A[n, :n], means[n, :n] = _gaussian_draw(P, b, rng, f"impact row {n + 1}")
    if return_mean:
        return ImpactMatrix(A), means
    return ImpactMatrix(A)


# ------------------------------------------------------------ volatility block


def _transitions(h, M: int):
    """Stacked (country, h_{t-1}, h_t) over all within-window transitions."""
    idx, prev, nxt = [], [], []
    for i in range(M):
        hi = h[i]
        if hi.shape[0] > 1:
            idx.append(np.full(hi.shape[0] - 1, i))
            prev.append(hi[:-1])
            nxt.append(hi[1:])
    N = h[0].shape[1]
    if not idx:
        return np.zeros(0, dtype=int), np.zeros((0, N)), np.zeros((0, N))
    return np.concatenate(idx), np.concatenate(prev), np.concatenate(nxt)


def stationary_moments(alpha: np.ndarray, theta: np.ndarray, Q: np.ndarray):
    N = theta.shape[0]
    mean = np.linalg.solve(np.eye(N) - theta, np.atleast_2d(alpha).T).T
    cov = linalg.solve_discrete_lyapunov(theta, Q)
    return mean, 0.5 * (cov + cov.T)


def initial_moments(vol: VolatilityParams, priors: PriorSpec):
    """Mean (M, N) and Cholesky factor of the law of each window's first state."""
    M, N = vol.alpha.shape
    if priors.initial_state == "fixed":
        return np.full((M, N), priors.h0_mean), np.sqrt(priors.h0_var) * np.eye(N)
    mean, cov = stationary_moments(vol.alpha, vol.theta, vol.Q)
    return mean, np.linalg.cholesky(cov)


def initial_logpdf(h0: np.ndarray, alpha, theta, Q) -> float:
    """Sum over countries of the stationary log density of the first states."""
    if spectral_radius(theta) >= 1.0:
        return -np.inf
    mean, cov = stationary_moments(alpha, theta, Q)
    try:
        return float(stats.multivariate_normal(np.zeros(cov.shape[0]), cov).logpdf(h0 - mean).sum())
    except (np.linalg.LinAlgError, ValueError):
        return -np.inf


def _first_states(h) -> np.ndarray:
    return np.stack([hi[0] for hi in h])


def _theta_free(N: int, theta_diagonal: bool) -> np.ndarray:
    """Free elements of vec(theta) in row-major order."""
    return np.eye(N, dtype=bool).reshape(-1) if theta_diagonal else np.ones(N * N, dtype=bool)


def theta_posterior(h, mu: np.ndarray, Q: np.ndarray, priors: PriorSpec, theta_diagonal: bool = False):
    """Gaussian precision/rhs of vec(theta) from the demeaned transitions.

    With the unconditional means mu_i held fixed, h_t - mu_i = theta (h_{t-1} - mu_i) + b0 eta_t
    is a SUR with common regressors; coefficients are row-major (theta[n, :] for n=1..N).
    """
    N = Q.shape[0]
    idx, prev, nxt = _transitions(h, len(h))
    x = prev - mu[idx]
    y = nxt - mu[idx]
    Qinv = np.linalg.inv(Q)
    prec = np.kron(Qinv, x.T @ x)
    score = (x.T @ y @ Qinv).T.reshape(-1)
    free = _theta_free(N, theta_diagonal)
    P = prec[np.ix_(free, free)] + np.eye(int(free.sum())) / priors.vol_coef_var
    b = score[free] + priors.vol_coef_mean / priors.vol_coef_var
    return P, b, free, (idx, prev)


def mean_state_posterior(h, theta: np.ndarray, Q: np.ndarray, priors: PriorSpec):
    """Per-country Gaussian (precision (M, N, N), rhs (M, N)) of mu_i given theta and Q.

    Transitions contribute h_t - theta h_{t-1} = (I - theta) mu_i + b0 eta_t; under the
    stationary initial law the first state adds h_0 ~ N(mu_i, Sigma(theta, Q)).
    """
    M = len(h)
    N = Q.shape[0]
    D = np.eye(N) - theta
    Qinv = np.linalg.inv(Q)
    DQD = D.T @ Qinv @ D
    P = np.zeros((M, N, N))
    b = np.zeros((M, N))
    stationary = priors.initial_state == "stationary"
    if stationary:
        _, cov = stationary_moments(np.zeros((1, N)), theta, Q)
        Sinv = np.linalg.inv(cov)
    for i in range(M):
        hi = h[i]
        n_i = hi.shape[0] - 1
        r = (hi[1:] - hi[:-1] @ theta.T).sum(axis=0)
        P[i] = n_i * DQD + np.eye(N) / priors.vol_coef_var
        b[i] = D.T @ Qinv @ r + priors.vol_coef_mean / priors.vol_coef_var
        if stationary:
            P[i] += Sinv
            b[i] += Sinv @ hi[0]
    return P, b


def _check_vol_design(idx, prev, M: int):
    """A path that never moves inside any country leaves theta unidentified by the data."""
    if idx.shape[0] == 0:
        return
    moving = False
    for i in range(M):
        rows = prev[idx == i]
        if rows.shape[0] > 1 and np.any(np.ptp(rows, axis=0) > 0):
            moving = True
            break
    if not moving:
        raise SingularPosteriorError("volatility VAR", np.inf)


def _stationary_mean(vol: VolatilityParams) -> np.ndarray:
    N = vol.theta.shape[0]
    return np.linalg.solve(np.eye(N) - vol.theta, vol.alpha.T).T


def draw_vol_var_params(h, current: VolatilityParams, priors: PriorSpec, rng, theta_diagonal: bool = False):
    """(alpha, theta) given the paths and Q; returns (alpha, theta, theta_accepted).

    Works in the centred form alpha_i = (I - theta) mu_i with independent
    normal priors on theta and on mu_i. First theta given mu: the demeaned
    transitions give a Gaussian proposal, corrected by MH for the
    stationary first-state density (which truncates theta to the stationary
    region). Then mu_i given theta: exact Gaussian, first state included.
    """
    M = len(h)
    N = current.Q.shape[0]
    Q = current.Q
    mu = _stationary_mean(current)
    P, b, free, (idx, prev) = theta_posterior(h, mu, Q, priors, theta_diagonal)
    if priors.vol_coef_var > 1e6:
        _check_vol_design(idx, prev, M)
    x, _ = _gaussian_draw(P, b, rng, "volatility VAR")
    u = rng.random()
    vec = np.zeros(N * N)
    vec[free] = x
    theta = vec.reshape(N, N)
    accepted = True
    if priors.initial_state == "stationary":
        h0 = _first_states(h)
        new = initial_logpdf_centred(h0 - mu, theta, Q)
        old = initial_logpdf_centred(h0 - mu, current.theta, Q)
        accepted = np.isfinite(new) and (not np.isfinite(old) or np.log(u) < new - old)
        if not accepted:
            theta = current.theta.copy()
    Pm, bm = mean_state_posterior(h, theta, Q, priors)
    z = rng.standard_normal((M, N))
    mu_new = np.zeros((M, N))
    for i in range(M):
        L = _chol_precision(Pm[i], "volatility means")
        mu_new[i] = linalg.cho_solve((L, True), bm[i]) + linalg.solve_triangular(L.T, z[i], lower=False)
    alpha = mu_new @ (np.eye(N) - theta).T
    return alpha, theta, bool(accepted)


def initial_logpdf_centred(dev: np.ndarray, theta, Q) -> float:
    """Sum of log N(dev_i; 0, Sigma(theta, Q)); -inf outside the stationary region."""
    if spectral_radius(theta) >= 1.0:
        return -np.inf
    _, cov = stationary_moments(np.zeros((1, theta.shape[0])), theta, Q)
    try:
        return float(np.sum(stats.multivariate_normal(np.zeros(cov.shape[0]), cov).logpdf(dev)))
    except (np.linalg.LinAlgError, ValueError):
        return -np.inf


def q_posterior(h, alpha, theta, priors: PriorSpec, drop_data: bool = False):
    """Inverse-Wishart (df, scale) for Q from the transition residuals."""
    M = len(h)
    N = theta.shape[0]
    idx, prev, nxt = _transitions(h, M)
    U = nxt - alpha[idx] - prev @ theta.T
    S = priors.scale(N) + (0.0 if drop_data else U.T @ U)
    return priors.df(N) + idx.shape[0], 0.5 * (S + S.T)


def draw_q(h, current: VolatilityParams, priors: PriorSpec, rng, drop_data: bool = False):
    """Q given the paths and (alpha, theta); returns (Q, accepted).

    ``drop_data`` deliberately omits the residual term (mutation test only).
    """
    df, S = q_posterior(h, current.alpha, current.theta, priors, drop_data)
    try:
        linalg.cholesky(S, lower=True)
    except linalg.LinAlgError:
        raise SingularPosteriorError("Q scale", float(np.linalg.cond(S))) from None
    Q = np.atleast_2d(stats.invwishart.rvs(df=df, scale=S, random_state=rng))
    Q = 0.5 * (Q + Q.T)
    u = rng.random()
    if priors.initial_state == "fixed":
        return Q, True
    h0 = _first_states(h)
    new = initial_logpdf(h0, current.alpha, current.theta, Q)
    old = initial_logpdf(h0, current.alpha, current.theta, current.Q)
    if not np.isfinite(old) or np.log(u) < new - old:
        return Q, True
    return current.Q, False


# ---------------------------------------------------------------- state block


def sqvol_coefficients(spec: ModelSpec, mean: MeanCoefficients) -> np.ndarray | None:
    if "squared_volatility" not in spec.extras:
        return None
    return mean.extra[:, mean.extra.shape[1] - spec.N :]


def sweep_batch(
    design: PanelDesign,
    params: ParameterSet,
    countries,
    references,
    noises,
    rule: str = "lookahead",
    base_resid=None,
    keep_system: bool = False,
) -> SweepResult:
    """CPF-AS sweeps for a set of countries given every other block."""
    spec = design.spec
    countries = list(countries)
    if base_resid is None:
        base_resid = design.base_residuals(design.from_coefficients(params.mean))
    s0 = spec.first_obs
    resid = [base_resid[i] for i in countries]
    observed = [np.arange(design.lengths[i]) >= s0 for i in countries]
    obs = SVObservation(resid, observed, params.impact.A, params.mean.gamma, sqvol_coefficients(spec, params.mean))
    init_mean, init_chol = initial_moments(params.vol, spec.priors)
    trans = Transition(
        alpha=params.vol.alpha[countries],
        theta=params.vol.theta,
        b0=params.vol.b0,
        init_mean=init_mean[countries],
        init_chol=init_chol,
    )
    return cpf_as_batch(references, trans, obs, spec.K, noises, rule, keep_system)


def draw_states(
    design: PanelDesign,
    params: ParameterSet,
    seed: int,
    iteration: int,
    workers: int = 1,
    pool: ThreadPoolExecutor | None = None,
):
    """New volatility paths for all countries; returns (states, min ESS per country, fallbacks).

    Each country's sweep reads only its own substream, so any split of the
    countries over workers gives the same paths.
    """
    spec = design.spec
    Np = spec.mcmc.particle_count
    base = design.base_residuals(design.from_coefficients(params.mean))
    init_mean, init_chol = initial_moments(params.vol, spec.priors)
    b0 = params.vol.b0
    sq = sqvol_coefficients(spec, params.mean)
    s0 = spec.first_obs
    refs = params.states.h

    def one(i):
        g = rng_mod.stream(seed, "states", iteration, i)
        T_i = int(design.lengths[i])
        noise = SweepNoise.draw(g, T_i, Np, spec.N)
        if spec.mcmc.resampling == "systematic":
            noise = noise.systematic()
        row = (params.vol.alpha[i], params.vol.theta, b0, init_mean[i], init_chol)
        try:
            return sv_sweep(refs[i], base[i], np.arange(T_i) >= s0, params.impact.A, params.mean.gamma, sq, row,
                            noise, spec.mcmc.ancestor_rule)
        except WeightUnderflowError as err:
            err.country = i
            raise

    def run(chunk):
        return [one(int(i)) for i in chunk]

    chunks = [c for c in np.array_split(np.arange(design.M), max(1, workers)) if c.size]
    if pool is not None and len(chunks) > 1:
        results = [r for part in pool.map(run, chunks) for r in part]
    else:
        results = run(np.arange(design.M))
    paths = tuple(r[0] for r in results)
    ess = np.array([np.nanmin(r[1]) for r in results])
    fallbacks = sum(r[2] for r in results)
    return VolatilityStates(paths), ess, fallbacks


# ------------------------------------------------------------------ the chain


@dataclass
class PosteriorDraws:
    """Retained draws stacked along a leading draw axis."""

    spec: ModelSpec
    c: np.ndarray
    tau: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    extra: np.ndarray
    A: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray
    Q: np.ndarray
    states: list[np.ndarray] | None  # per country (D, T_i, N)
    state_mean: list[np.ndarray]
    iterations: np.ndarray
    counters: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)  # per-iteration diagnostics
    meta: dict = field(default_factory=dict)

    BLOCKS = ("c", "tau", "beta", "gamma", "extra", "A", "alpha", "theta", "Q")

    def __len__(self) -> int:
        return self.c.shape[0]

    def __getitem__(self, d: int) -> ParameterSet:
        states = None
        if self.states is not None:
            states = VolatilityStates(tuple(s[d] for s in self.states))
        return ParameterSet(
            MeanCoefficients(self.c[d], self.tau[d], self.beta[d], self.gamma[d], self.extra[d]),
            ImpactMatrix(self.A[d]),
            VolatilityParams(self.alpha[d], self.theta[d], self.Q[d]),
            states,
        )

    def __iter__(self):
        for d in range(len(self)):
            yield self[d]

    @classmethod
    def from_sets(cls, spec: ModelSpec, sets, iterations=None, **kw) -> "PosteriorDraws":
        sets = list(sets)
        if not sets:
            raise ValueError("no draws")
        st = None
        if all(s.states is not None for s in sets):
            st = [np.stack([s.states.h[i] for s in sets]) for i in range(len(sets[0].states.h))]
        means = [x.mean(axis=0) for x in st] if st is not None else []
        return cls(
            spec=spec,
            c=np.stack([s.mean.c for s in sets]),
            tau=np.stack([s.mean.tau for s in sets]),
            beta=np.stack([s.mean.beta for s in sets]),
            gamma=np.stack([s.mean.gamma for s in sets]),
            extra=np.stack([s.mean.extra for s in sets]),
            A=np.stack([s.impact.A for s in sets]),
            alpha=np.stack([s.vol.alpha for s in sets]),
            theta=np.stack([s.vol.theta for s in sets]),
            Q=np.stack([s.vol.Q for s in sets]),
            states=st,
            state_mean=means,
            iterations=np.arange(len(sets)) if iterations is None else np.asarray(iterations),
            **kw,
        )

    def flat(self) -> tuple[list[str], np.ndarray]:
        """Labels and (D, n_params) matrix of every free scalar parameter."""
        spec = self.spec
        N, M = spec.N, self.c.shape[1]
        labels, cols = [], []
        v = spec.variables
        for i in range(M):
            for n in range(N):
                labels.append(f"c[{i},{v[n]}]")
                cols.append(self.c[:, i, n])
        for j in range(spec.P):
            for n in range(N):
                for m in range(N):
                    labels.append(f"beta{j + 1}[{v[n]},{v[m]}]")
                    cols.append(self.beta[:, j, n, m])
        for k in range(spec.K + 1):
            for n in range(N):
                for m in range(N):
                    if k == 0 and spec.recursive_gamma and m > n:
                        continue
                    labels.append(f"gamma{k}[{v[n]},{v[m]}]")
                    cols.append(self.gamma[:, k, n, m])
        for n in range(1, N):
            for m in range(n):
                labels.append(f"A[{v[n]},{v[m]}]")
                cols.append(self.A[:, n, m])
        for i in range(M):
            for n in range(N):
                labels.append(f"alpha[{i},{v[n]}]")
                cols.append(self.alpha[:, i, n])
        for n in range(N):
            for m in range(N):
                if spec.theta_diagonal and m != n:
                    continue
                labels.append(f"theta[{v[n]},{v[m]}]")
                cols.append(self.theta[:, n, m])
        for n in range(N):
            for m in range(n + 1):
                labels.append(f"Q[{v[n]},{v[m]}]")
                cols.append(self.Q[:, n, m])
        return labels, np.column_stack(cols)


def initial_parameters(design: PanelDesign, seed: int = 0, warmup: int = 10) -> ParameterSet:
    """Deterministic starting point.

    Paths start constant at the log residual variance and are then refreshed by
    ``warmup`` particle sweeps with persistent, moderately noisy dynamics held
    fixed. A constant path would make the first covariance draw collapse towards
    zero, and the chain then needs a very long time to recover.
    """
    spec = design.spec
    N, M = spec.N, design.M
    Xf = design.X_fixed.copy()
    Xf[:, design.h_columns()] = 0.0
    if design.n_obs > 0:
        ridge = Xf.T @ Xf + 1e-6 * np.eye(design.k)
        G_ols = np.linalg.solve(ridge, Xf.T @ design.y)
        resid = design.y - Xf @ G_ols
        h_bar = np.log(np.maximum(resid.var(axis=0), 1e-8))
    else:
        h_bar = np.zeros(N)
    theta = 0.9 * np.eye(N)
    states = VolatilityStates(tuple(np.tile(h_bar, (int(L), 1)) for L in design.lengths))
    A = np.eye(N)
    alpha = np.tile((np.eye(N) - theta) @ h_bar, (M, 1))
    vol = VolatilityParams(alpha, theta, 0.1 * np.eye(N))
    G = np.zeros((design.k, N))
    if design.n_obs > 0:
        G = posterior_mean_coefficients(design, A, states.h, spec.priors)
    p = ParameterSet(design.to_coefficients(G), ImpactMatrix(A), vol, states)
    if design.n_obs == 0:
        return p
    for j in range(warmup):
        try:
            p.states = draw_states(design, p, seed, j + (1 << 30))[0]
        except WeightUnderflowError:
            break
        G = posterior_mean_coefficients(design, A, p.states.h, spec.priors)
        p.mean = design.to_coefficients(G)
    return p


def gibbs_iteration(
    design: PanelDesign,
    current: ParameterSet,
    iteration: int,
    seed: int,
    pool: ThreadPoolExecutor | None = None,
    mutation: str | None = None,
    stats_out: dict | None = None,
) -> ParameterSet:
    """One sweep over all five blocks; pure function of (current, seed, iteration)."""
    spec = design.spec
    pri = spec.priors
    h = current.states.h
    out = stats_out if stats_out is not None else {}

    block = "mean coefficients"
    try:
        G = _draw_G(design, current.impact.A, h, pri, rng_mod.stream(seed, "mean", iteration))
        explosive = spectral_radius(companion_matrix(design.to_coefficients(G).beta)) >= 1.0
        out["explosive"] = bool(explosive)
        if explosive and spec.mcmc.reject_explosive:
            G = design.from_coefficients(current.mean)
        mean = design.to_coefficients(G)

        block = "impact matrix"
        if design.n_obs > 0:
            resid = design.residuals(G, h)
            impact = draw_impact_matrix(resid, design.obs_h(h), pri, rng_mod.stream(seed, "impact", iteration))
        else:
            impact = draw_impact_matrix(np.zeros((0, spec.N)), np.zeros((0, spec.N)), pri,
                                        rng_mod.stream(seed, "impact", iteration))

        block = "volatility VAR"
        alpha, theta, acc_v = draw_vol_var_params(h, current.vol, pri, rng_mod.stream(seed, "vol", iteration),
                                                  spec.theta_diagonal)
        vol = VolatilityParams(alpha, theta, current.vol.Q)
        out["vol_accept"] = acc_v

        block = "Q"
        Q, acc_q = draw_q(h, vol, pri, rng_mod.stream(seed, "q", iteration), drop_data=mutation == "q_drop_data")
        vol = VolatilityParams(alpha, theta, Q)
        out["q_accept"] = acc_q

        block = "volatility states"
        nxt = ParameterSet(mean, impact, vol, current.states)
        workers = spec.mcmc.workers if spec.mcmc.parallel_countries else 1
        states, ess, fb = draw_states(design, nxt, seed, iteration, workers, pool)
        out["ess"] = ess
        out["fallbacks"] = fb
        nxt.states = states
        nxt.check()
    except Exception as exc:
        raise ChainError(iteration, block, exc) from exc
    return nxt


class _Accumulator:
    def __init__(self, spec: ModelSpec, design: PanelDesign, store_states: bool):
        self.spec = spec
        self.store_states = store_states
        self.blocks = {b: [] for b in PosteriorDraws.BLOCKS}
        self.states = [[] for _ in range(design.M)] if store_states else None
        self.state_sum = [np.zeros((int(L), spec.N)) for L in design.lengths]
        self.iterations = []

    def add(self, it: int, p: ParameterSet):
        for name, arr in zip(PosteriorDraws.BLOCKS, (p.mean.c, p.mean.tau, p.mean.beta, p.mean.gamma,
                                                       p.mean.extra, p.impact.A, p.vol.alpha, p.vol.theta, p.vol.Q)):
            self.blocks[name].append(np.array(arr))
        for i, hi in enumerate(p.states.h):
            self.state_sum[i] += hi
            if self.store_states:
                self.states[i].append(hi.copy())
        self.iterations.append(it)

    def result(self, counters, traces, meta) -> PosteriorDraws:
        D = len(self.iterations)
        arrays = {b: np.stack(v) for b, v in self.blocks.items()}
        states = [np.stack(s) for s in self.states] if self.store_states else None
        return PosteriorDraws(
            spec=self.spec,
            states=states,
            state_mean=[s / max(D, 1) for s in self.state_sum],
            iterations=np.array(self.iterations, dtype=int),
            counters=counters,
            traces=traces,
            meta=meta,
            **arrays,
        )


def run_chain(
    data,
    spec: ModelSpec | None = None,
    init: ParameterSet | None = None,
    checkpoint_dir=None,
    resume: bool = False,
    mutation: str | None = None,
    progress=None,
    stop_after: int | None = None,
) -> PosteriorDraws:
    """Run the full sampler; deterministic given the seed regardless of workers.

    With ``checkpoint_dir`` a resumable checkpoint is written every
    ``mcmc.checkpoint_every`` iterations and whenever a block fails.
    ``stop_after`` ends the run early (after that many iterations) leaving a
    checkpoint behind, which is how interrupted runs are exercised in tests.
    """
    from . import storage

    design = _as_design(data, spec)
    spec = design.spec
    mc = spec.mcmc
    usable = spec.P + spec.K + 2
    short = [design.country_ids[i] for i in range(design.M) if design.lengths[i] < usable]
    if short:
        raise ValueError(f"countries with fewer than {usable} usable years: {short}")

    start = 0
    acc = _Accumulator(spec, design, mc.store_states)
    traces = {"ess_min": np.full(mc.iterations, np.nan), "fallbacks": np.zeros(mc.iterations, dtype=int)}
    counters = {"explosive": 0, "vol_accept": 0, "q_accept": 0, "iterations": 0}
    current = init.copy() if init is not None else initial_parameters(design, mc.seed)
    if init is not None and current.states is None:
        current.states = initial_parameters(design, mc.seed).states

    if resume and checkpoint_dir is not None and storage.has_checkpoint(checkpoint_dir):
        ck = storage.load_checkpoint(checkpoint_dir, spec, design)
        start, current, counters, traces = ck["iteration"], ck["current"], ck["counters"], ck["traces"]
        acc = ck["accumulator"]
        log.info("resuming at iteration %d", start)

    pool = ThreadPoolExecutor(mc.workers) if mc.parallel_countries and mc.workers > 1 else None
    end = mc.iterations if stop_after is None else min(mc.iterations, stop_after)
    try:
        for it in range(start, end):
            info = {}
            try:
                current = gibbs_iteration(design, current, it, mc.seed, pool, mutation, info)
            except ChainError as err:
                if checkpoint_dir is not None:
                    storage.save_checkpoint(checkpoint_dir, it, current, acc, counters, traces, spec)
                    err.checkpoint = str(checkpoint_dir)
                raise
            counters["explosive"] += int(info["explosive"])
            counters["vol_accept"] += int(info["vol_accept"])
            counters["q_accept"] += int(info["q_accept"])
            counters["iterations"] += 1
            traces["ess_min"][it] = float(np.min(info["ess"]))
            traces["fallbacks"][it] = info["fallbacks"]
            if mc.keeps(it):
                acc.add(it, current)
            if checkpoint_dir is not None and mc.checkpoint_every and (it + 1) % mc.checkpoint_every == 0:
                storage.save_checkpoint(checkpoint_dir, it + 1, current, acc, counters, traces, spec)
            if progress is not None:
                progress(it, current)
    finally:
        if pool is not None:
            pool.shutdown()
    if end < mc.iterations:
        if checkpoint_dir is not None:
            storage.save_checkpoint(checkpoint_dir, end, current, acc, counters, traces, spec)
        return None
    n = max(counters["iterations"], 1)
    meta = {
        "explosive_fraction": counters["explosive"] / n,
        "vol_accept_rate": counters["vol_accept"] / n,
        "q_accept_rate": counters["q_accept"] / n,
        "particle_count": mc.particle_count,
        "prior_choices": "package defaults (not taken from any published source)",
    }
    return acc.result(counters, traces, meta)
