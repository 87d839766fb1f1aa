"""Conditional particle filter with ancestor sampling for the volatility paths.

The mean equation depends on h_t, ..., h_{t-K}, so the filter carries a
stacked state ``(h_t, h_{t-1}, ..., h_{t-K})``: the first block is drawn from
the volatility VAR, the remaining K blocks are exact copies of the
ancestor's history. Because the last K blocks move deterministically, naive
ancestor sampling collapses onto the reference lineage. The default
``lookahead`` rule instead scores each candidate ancestor by the full
change in the joint density when the reference future is grafted onto its
history: the transition density times the K observation terms whose lags
reach back into that history.

All arrays carry a leading batch axis over countries. Countries in a batch
only interact through shared parameters, and random numbers are drawn per
country, so the result for a country does not depend on batch composition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .model import LOG_2PI


class WeightUnderflowError(FloatingPointError):
    def __init__(self, t: int, country: int | None = None):
        self.t = t
        self.country = country
        where = f" (batch row {country})" if country is not None else ""
        super().__init__(f"all particle weights vanished at t={t}{where}")


def _matvec(mat: np.ndarray, x: np.ndarray) -> np.ndarray:
    """mat @ x over the last axis using elementwise ops in a fixed order."""
    out = x[..., 0:1] * mat[:, 0]
    for m in range(1, mat.shape[1]):
        out = out + x[..., m : m + 1] * mat[:, m]
    return out


def _normalize(logw: np.ndarray, t: int) -> np.ndarray:
    """Max-subtracted normalized weights along the last axis."""
    logw = np.where(np.isnan(logw), -np.inf, logw)
    top = logw.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        bad = int(np.flatnonzero(~np.isfinite(top.reshape(-1)))[0])
        raise WeightUnderflowError(t, bad)
    w = np.exp(logw - top)
    return w / w.sum(axis=-1, keepdims=True)


def effective_sample_size(log_weights) -> float | np.ndarray:
    """1 / sum(w^2) of the normalized weights (along the last axis)."""
    lw = np.asarray(log_weights, dtype=float)
    lw = np.where(np.isnan(lw), -np.inf, lw)
    top = lw.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(top)):
        raise ValueError("effective sample size undefined: no finite log-weight")
    w = np.exp(lw - top)
    w = w / w.sum(axis=-1, keepdims=True)
    out = 1.0 / np.sum(w * w, axis=-1)
    return float(out) if out.ndim == 0 else out


def _categorical(w: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws; w (B, Np) normalized, u (B, ...) uniforms -> indices."""
    cdf = np.cumsum(w, axis=-1)
    cdf[..., -1] = 1.0
    shape = u.shape
    u2 = u.reshape(shape[0], -1)
    idx = (u2[:, :, None] >= cdf[:, None, :]).sum(axis=-1)
    return np.minimum(idx, w.shape[-1] - 1).reshape(shape)


@dataclass
class Transition:
    """Volatility VAR h_t = alpha + theta h_{t-1} + b0 eta_t for a batch of countries."""

    alpha: np.ndarray  # (B, N)
    theta: np.ndarray  # (N, N)
    b0: np.ndarray  # (N, N) lower Cholesky factor of Q
    init_mean: np.ndarray  # (B, N)
    init_chol: np.ndarray  # (N, N)
    b0_inv: np.ndarray = field(init=False)

    def __post_init__(self):
        self.b0_inv = np.linalg.inv(self.b0)
        self.log_norm = -0.5 * self.b0.shape[0] * LOG_2PI - float(np.sum(np.log(np.diag(self.b0))))

    def mean(self, h_prev: np.ndarray) -> np.ndarray:
        """h_prev (B, ..., N) -> conditional mean, alpha broadcast over the middle axes."""
        a = self.alpha.reshape(self.alpha.shape[:1] + (1,) * (h_prev.ndim - 2) + self.alpha.shape[1:])
        return a + _matvec(self.theta, h_prev)

    def logpdf(self, h_next: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
        u = _matvec(self.b0_inv, h_next - self.mean(h_prev))
        return self.log_norm - 0.5 * np.sum(u * u, axis=-1)


def ancestor_weights_degenerate(
    log_w_prev: np.ndarray,
    prev_states: np.ndarray,
    ref_future: np.ndarray,
    transition: Transition,
    lookahead: Callable[[int, np.ndarray], np.ndarray] | None = None,
    t: int = 1,
    rule: str = "lookahead",
    ref_lags: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Ancestor probabilities for the reference particle at time t.

    log_w_prev:  (B, Np) log-weights at t-1 (need not be normalized)
    prev_states: (B, Np, K+1, N) stacked states at t-1
    ref_future:  (B, K', N) reference h'_t, h'_{t+1}, ... (at least h'_t)
    lookahead:   callable ``(s, stacked (B, Np, K+1, N)) -> (B, Np)`` giving the
                 observation log-density at time s (0 where unobserved)

    ``rule='lookahead'``: weight_m x f(h'_t | h^m_{t-1}) x prod over
    s = t..t+K-1 of g(y_s | spliced history), the exact ancestor weight for
    the stacked model. ``rule='indicator'``: weight_m x f(h'_t | h^m_{t-1}) x
    1{particle m's shifted history equals ``ref_lags``}; if that prunes every
    candidate, the indicator is dropped for that row (counted in the second
    return value).

    Returns ``(probabilities (B, Np), fallback (B,) bool)``.
    """
    B, Np, K1, N = prev_states.shape
    K = K1 - 1
    logp = log_w_prev + transition.logpdf(ref_future[:, None, 0, :], prev_states[:, :, 0, :])
    fallback = np.zeros(B, dtype=bool)
    if rule == "lookahead":
        if K > 0 and lookahead is not None:
            n_ahead = min(K, ref_future.shape[1])
            for d in range(n_ahead):  # s = t + d
                spliced = np.empty_like(prev_states)
                for j in range(K + 1):
                    back = d - j  # time s - j relative to t
                    if back >= 0:
                        spliced[:, :, j, :] = ref_future[:, None, back, :]
                    else:
                        spliced[:, :, j, :] = prev_states[:, :, -back - 1, :]
                logp = logp + lookahead(t + d, spliced)
    elif rule == "indicator":
        if K > 0:
            if ref_lags is None:
                raise ValueError("indicator rule needs the reference lags")
            # NaN marks lags from before the window, which match anything
            same = (prev_states[:, :, :K, :] == ref_lags[:, None, :, :]) | np.isnan(ref_lags[:, None, :, :])
            match = np.all(same, axis=(-1, -2))
            fallback = ~match.any(axis=1)
            logp = np.where(match | fallback[:, None], logp, -np.inf)
    else:
        raise ValueError(f"unknown ancestor rule {rule!r}")
    return _normalize(logp, t), fallback


@dataclass
class SweepNoise:
    """Pre-drawn random numbers for one country's sweep."""

    init: np.ndarray  # (Np, N)
    prop: np.ndarray  # (T, Np, N)
    resample: np.ndarray  # (T, Np - 1)
    ancestor: np.ndarray  # (T,)
    final: float

    @classmethod
    def draw(cls, rng: np.random.Generator, T: int, Np: int, N: int) -> "SweepNoise":
        return cls(
            init=rng.standard_normal((Np, N)),
            prop=rng.standard_normal((T, Np, N)),
            resample=rng.random((T, Np - 1)),
            ancestor=rng.random(T),
            final=float(rng.random()),
        )

    def systematic(self) -> "SweepNoise":
        """Same noise with stratified resampling uniforms (j + u_0) / (Np - 1) from each row's first uniform."""
        n = self.resample.shape[1]
        u = (np.arange(n)[None, :] + self.resample[:, :1]) / max(n, 1)
        return SweepNoise(self.init, self.prop, u, self.ancestor, self.final)


@dataclass
class SweepResult:
    paths: list[np.ndarray]  # per country (T_i, N)
    ess: np.ndarray  # (B, T_max) ESS of the filtering weights, NaN past each window
    fallbacks: np.ndarray  # (B,) count of indicator fallbacks
    reference_kept: np.ndarray  # (B,) True if the returned path equals the reference
    system: dict | None = None


def cpf_as_batch(
    references: Sequence[np.ndarray],
    transition: Transition,
    log_obs: Callable[[int, np.ndarray], np.ndarray],
    K: int,
    noises: Sequence[SweepNoise],
    rule: str = "lookahead",
    keep_system: bool = False,
) -> SweepResult:
    """One CPF-AS sweep for each country of a batch.

    ``references[b]`` is country b's conditioned path (T_b, N); the reference
    occupies the last particle slot. ``log_obs(t, stacked)`` returns the
    observation log-density (B, Np) at local time t with zeros wherever t is
    not an observation period of a row (including t past the row's window).
    """
    B = len(references)
    lengths = np.array([r.shape[0] for r in references])
    T = int(lengths.max())
    N = references[0].shape[1]
    Np = noises[0].init.shape[0]
    ref_slot = Np - 1
    rows = np.arange(B)

    ref = np.zeros((B, T + K, N))  # padded past each window
    for b, r in enumerate(references):
        ref[b, : r.shape[0]] = r
    prop = np.zeros((B, T, Np, N))
    u_res = np.zeros((B, T, Np - 1))
    u_anc = np.zeros((B, T))
    for b, nz in enumerate(noises):
        Tb = lengths[b]
        prop[b, :Tb] = nz.prop
        u_res[b, :Tb] = nz.resample
        u_anc[b, :Tb] = nz.ancestor
    init_noise = np.stack([nz.init for nz in noises])
    u_fin = np.array([nz.final for nz in noises])

    hs = np.zeros((B, T, Np, N))
    anc = np.zeros((B, T, Np), dtype=np.int64)
    logw_hist = np.zeros((B, T, Np))
    ess = np.full((B, T), np.nan)
    fallbacks = np.zeros(B, dtype=np.int64)
    stacked_hist = np.zeros((B, T, Np, K + 1, N)) if keep_system else None

    X = np.zeros((B, Np, K + 1, N))
    X[:, :, 0, :] = transition.init_mean[:, None, :] + _matvec(transition.init_chol, init_noise)
    X[:, ref_slot, 0, :] = ref[:, 0]
    # lag blocks before the window are padding; observations never reach them
    anc[:, 0] = np.arange(Np)
    logw = log_obs(0, X)
    for t in range(T):
        active = t < lengths
        if t > 0:
            w_prev = _normalize(logw, t - 1)
            new_anc = np.empty((B, Np), dtype=np.int64)
            new_anc[:, :ref_slot] = _categorical(w_prev, u_res[:, t])
            ref_lags = None
            if K:
                ref_lags = np.stack([ref[:, t - 1 - l] if t - 1 - l >= 0 else np.full((B, N), np.nan)
                                     for l in range(K)], axis=1)
            p_anc, fb = ancestor_weights_degenerate(
                logw, X, ref[:, t : t + max(K, 1)], transition, log_obs, t, rule, ref_lags
            )
            new_anc[:, ref_slot] = _categorical(p_anc, u_anc[:, t : t + 1])[:, 0]
            fallbacks += fb & active
            Xa = X[rows[:, None], new_anc]  # (B, Np, K+1, N)
            Xn = np.empty_like(X)
            Xn[:, :, 0, :] = transition.mean(Xa[:, :, 0, :]) + _matvec(transition.b0, prop[:, t])
            Xn[:, ref_slot, 0, :] = ref[:, t]
            if K:
                Xn[:, :, 1:, :] = Xa[:, :, :K, :]
            # rows whose window ended keep their final system frozen
            X = np.where(active[:, None, None, None], Xn, X)
            anc[:, t] = np.where(active[:, None], new_anc, np.arange(Np))
            new_logw = log_obs(t, X)
            logw = np.where(active[:, None], new_logw, logw)
        hs[:, t] = X[:, :, 0, :]
        logw_hist[:, t] = logw
        if keep_system:
            stacked_hist[:, t] = X
        if active.any():
            _normalize(logw[active], t)  # raises if every weight of a row vanished
            ess[active, t] = effective_sample_size(logw[active])

    # final draw at each row's own terminal time, then trace the lineage back
    w_fin = _normalize(logw_hist[rows, lengths - 1], int(T - 1))
    idx = _categorical(w_fin, u_fin[:, None])[:, 0]
    paths = np.zeros((B, T, N))
    for t in range(T - 1, -1, -1):
        live = t <= lengths - 1
        paths[live, t] = hs[rows[live], t, idx[live]]
        if t > 0:
            idx = np.where(live, anc[rows, t, idx], idx)
    out = [paths[b, : lengths[b]].copy() for b in range(B)]
    kept = np.array([np.array_equal(o, r) for o, r in zip(out, references)])
    system = None
    if keep_system:
        system = {"stacked": stacked_hist, "ancestors": anc, "log_weights": logw_hist, "h": hs}
    return SweepResult(out, ess, fallbacks, kept, system)


def _fold_impact(A, gamma, sqvol, resid):
    """Fold A into the residuals and volatility coefficients: e = Ar - sum_k AG_k h_k - ASq h^2."""
    N = A.shape[0]
    use_sq = sqvol is not None and bool(np.any(sqvol))
    Ar = np.ascontiguousarray(resid @ A.T)
    AG = np.ascontiguousarray(np.stack([A @ g for g in gamma]))
    ASq = np.ascontiguousarray(A @ sqvol if use_sq else np.zeros((N, N)))
    return Ar, AG, ASq, use_sq


class SVObservation:
    """Observation log-density of the mean equation for a batch of countries.

    ``base_resid[b]`` (T_b, N) holds z_t minus the volatility-free part of the
    mean; ``observed[b]`` (T_b,) flags observation periods.
    """

    def __init__(
        self,
        base_resid: Sequence[np.ndarray],
        observed: Sequence[np.ndarray],
        A: np.ndarray,
        gamma: np.ndarray,
        sqvol: np.ndarray | None = None,
    ):
        B = len(base_resid)
        T = max(r.shape[0] for r in base_resid)
        N = A.shape[0]
        resid = np.zeros((B, T, N))
        self.obs = np.zeros((B, T), dtype=bool)
        for b, (r, o) in enumerate(zip(base_resid, observed)):
            resid[b, : r.shape[0]] = r
            self.obs[b, : r.shape[0]] = o
        self.T = T
        A = np.asarray(A, dtype=float)
        self.Ar, self.AG, self.ASq, self.use_sq = _fold_impact(A, np.asarray(gamma, dtype=float), sqvol, resid)

    def __call__(self, t: int, stacked: np.ndarray) -> np.ndarray:
        B, Np = stacked.shape[:2]
        if t >= self.T or not self.obs[:, t].any():
            return np.zeros((B, Np))
        h = stacked[:, :, 0, :]
        e = self.Ar[:, None, t, :]
        for k in range(self.AG.shape[0]):
            e = e - _matvec(self.AG[k], stacked[:, :, k, :])
        if self.use_sq:
            e = e - _matvec(self.ASq, h * h)
        ll = -0.5 * np.sum(LOG_2PI + h + e * e * np.exp(-h), axis=-1)
        return np.where(self.obs[:, t][:, None], ll, 0.0)


def cpf_as_sweep(
    country: int,
    reference: np.ndarray,
    params,
    design,
    rng: np.random.Generator,
    particle_count: int | None = None,
    rule: str | None = None,
) -> np.ndarray:
    """Draw a new volatility path for one country given all other blocks.

    ``params`` is a ParameterSet, ``design`` the PanelDesign its mean
    coefficients refer to. Returns the new (T_i, N) path.
    """
    from .gibbs import sweep_batch  # local import: gibbs builds on this module

    spec = design.spec
    Np = particle_count or spec.mcmc.particle_count
    T_i = int(design.lengths[country])
    if reference.shape != (T_i, spec.N):
        raise ValueError(f"reference must have shape {(T_i, spec.N)}")
    noise = SweepNoise.draw(rng, T_i, Np, spec.N)
    if spec.mcmc.resampling == "systematic":
        noise = noise.systematic()
    res = sweep_batch(design, params, [country], [reference], [noise], rule or spec.mcmc.ancestor_rule)
    return res.paths[0]


# ------------------------------------------------------ compiled SV-model sweep
#
# The compiled sweep is built per (N, K) so that every small inner loop has a
# compile-time trip count. Hot helpers are kept branch-free (branches sit at
# the call sites), which lets them inline; a non-inlined call costs more than
# the arithmetic it performs.

import functools  # noqa: E402

from numba import njit  # noqa: E402


@functools.lru_cache(maxsize=None)
def _compiled_sweep(N: int, K: int):
    K1 = K + 1

    @njit
    def obs_ll(t, H, p, Ar, AG, ASq, use_sq):
        # e = A (r_t - sum_k gamma_k h_{t-k} - sqvol h_t^2), precomputed with A folded in
        total = 0.0
        for n in range(N):
            e = Ar[t, n]
            for k in range(K1):
                for m in range(N):
                    e -= AG[k, n, m] * H[p, k, m]
            for m in range(N):
                e -= use_sq * ASq[n, m] * H[p, 0, m] * H[p, 0, m]
            h = H[p, 0, n]
            total += LOG_2PI + h + e * e * np.exp(-h)
        return -0.5 * total

    @njit
    def trans_logpdf(ref, t, X, p, alpha, theta, b0_inv, log_norm):
        q = 0.0
        for n in range(N):
            u = 0.0
            for m in range(N):
                s = theta[m, 0] * X[p, 0, 0]
                for j in range(1, N):
                    s += theta[m, j] * X[p, 0, j]
                u += b0_inv[n, m] * (ref[t, m] - (alpha[m] + s))
            q += u * u
        return log_norm - 0.5 * q

    @njit
    def normalize(logw, out):
        top = -np.inf
        for p in range(logw.shape[0]):
            if logw[p] > top:
                top = logw[p]
        if not np.isfinite(top):
            return False
        s = 0.0
        for p in range(logw.shape[0]):
            out[p] = np.exp(logw[p] - top) if np.isfinite(logw[p]) else 0.0
            s += out[p]
        for p in range(logw.shape[0]):
            out[p] /= s
        return True

    @njit(nogil=True)
    def kernel(ref, Ar, obs, AG, ASq, use_sq, alpha, theta, b0, b0_inv, log_norm,
               init_mean, init_chol, z_init, z_prop, u_res, u_anc, u_fin, rule):
        T = ref.shape[0]
        Np = z_init.shape[0]
        rs = Np - 1
        hs = np.zeros((T, Np, N))
        anc = np.zeros((T, Np), dtype=np.int64)
        X = np.zeros((Np, K1, N))
        Xn = np.zeros((Np, K1, N))
        logw = np.zeros(Np)
        w = np.zeros(Np)
        cdf = np.zeros(Np)
        lp = np.zeros(Np)
        pa = np.zeros(Np)
        ess = np.full(T, np.nan)
        spliced = np.zeros((1, K1, N))
        fallbacks = 0
        for p in range(Np):
            for n in range(N):
                s = z_init[p, 0] * init_chol[n, 0]
                for m in range(1, N):
                    s += z_init[p, m] * init_chol[n, m]
                X[p, 0, n] = init_mean[n] + s
        for n in range(N):
            X[rs, 0, n] = ref[0, n]
        for p in range(Np):
            anc[0, p] = p
            logw[p] = obs_ll(0, X, p, Ar, AG, ASq, use_sq) if obs[0] else 0.0
        for t in range(T):
            if t > 0:
                if not normalize(logw, w):
                    return hs[:, 0, :], ess, fallbacks, t - 1
                c = 0.0
                for p in range(Np):
                    c += w[p]
                    cdf[p] = c
                cdf[Np - 1] = 1.0
                for p in range(rs):
                    u = u_res[t, p]
                    a = 0
                    while a < Np - 1 and u >= cdf[a]:
                        a += 1
                    anc[t, p] = a
                for m in range(Np):
                    lp[m] = logw[m] + trans_logpdf(ref, t, X, m, alpha, theta, b0_inv, log_norm)
                if rule == 0:
                    # graft the reference future onto each candidate's history
                    for d in range(K):
                        if t + d < T and obs[t + d]:
                            for m in range(Np):
                                for j in range(K1):
                                    back = d - j
                                    for n in range(N):
                                        if back >= 0:
                                            spliced[0, j, n] = ref[t + back, n]
                                        else:
                                            spliced[0, j, n] = X[m, -back - 1, n]
                                lp[m] += obs_ll(t + d, spliced, 0, Ar, AG, ASq, use_sq)
                elif K > 0:
                    any_match = False
                    for m in range(Np):
                        ok = True
                        for l in range(K):
                            for n in range(N):
                                if t - 1 - l >= 0 and X[m, l, n] != ref[t - 1 - l, n]:
                                    ok = False
                        pa[m] = 1.0 if ok else 0.0
                        if ok:
                            any_match = True
                    if any_match:
                        for m in range(Np):
                            if pa[m] == 0.0:
                                lp[m] = -np.inf
                    else:
                        fallbacks += 1
                if not normalize(lp, pa):
                    return hs[:, 0, :], ess, fallbacks, t
                c = 0.0
                a = Np - 1
                for p in range(Np - 1):
                    c += pa[p]
                    if u_anc[t] < c:
                        a = p
                        break
                anc[t, rs] = a
                for p in range(Np):
                    a = anc[t, p]
                    for n in range(N):
                        s = theta[n, 0] * X[a, 0, 0]
                        for m in range(1, N):
                            s += theta[n, m] * X[a, 0, m]
                        e = b0[n, 0] * z_prop[t, p, 0]
                        for m in range(1, N):
                            e += b0[n, m] * z_prop[t, p, m]
                        Xn[p, 0, n] = alpha[n] + s + e
                    for k in range(K):
                        for n in range(N):
                            Xn[p, k + 1, n] = X[a, k, n]
                for n in range(N):
                    Xn[rs, 0, n] = ref[t, n]
                X, Xn = Xn, X
                for p in range(Np):
                    logw[p] = obs_ll(t, X, p, Ar, AG, ASq, use_sq) if obs[t] else 0.0
            for p in range(Np):
                for n in range(N):
                    hs[t, p, n] = X[p, 0, n]
            if not normalize(logw, w):
                return hs[:, 0, :], ess, fallbacks, t
            q = 0.0
            for p in range(Np):
                q += w[p] * w[p]
            ess[t] = 1.0 / q
        c = 0.0
        idx = Np - 1
        for p in range(Np - 1):
            c += w[p]
            if u_fin < c:
                idx = p
                break
        path = np.zeros((T, N))
        for t in range(T - 1, -1, -1):
            for n in range(N):
                path[t, n] = hs[t, idx, n]
            if t > 0:
                idx = anc[t, idx]
        return path, ess, fallbacks, -1

    return kernel


def sv_sweep(reference, resid, observed, A, gamma, sqvol, transition_row, noise: SweepNoise, rule="lookahead"):
    """Compiled CPF-AS sweep of one country under the SV-in-mean observation model.

    ``transition_row`` is ``(alpha_i, theta, b0, init_mean_i, init_chol)``.
    Returns ``(path, ess, fallbacks)``.
    """
    alpha, theta, b0, init_mean, init_chol = (np.ascontiguousarray(a, dtype=float) for a in transition_row)
    N = alpha.shape[0]
    A = np.asarray(A, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    Ar, AG, ASq, use_sq = _fold_impact(A, gamma, sqvol, np.asarray(resid, dtype=float))
    b0_inv = np.linalg.inv(b0)
    log_norm = -0.5 * N * LOG_2PI - float(np.sum(np.log(np.diag(b0))))
    kernel = _compiled_sweep(N, gamma.shape[0] - 1)
    path, ess, fb, failed = kernel(
        np.ascontiguousarray(reference, dtype=float), Ar, np.ascontiguousarray(observed, dtype=np.bool_),
        AG, ASq, float(use_sq), alpha, theta, b0, b0_inv, log_norm,
        init_mean, init_chol, noise.init, noise.prop, noise.resample, noise.ancestor, noise.final,
        0 if rule == "lookahead" else 1,
    )
    if failed >= 0:
        raise WeightUnderflowError(int(failed))
    return path, ess, int(fb)
