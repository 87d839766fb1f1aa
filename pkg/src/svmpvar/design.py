"""Stacked regression layout of the mean equation over a ragged panel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import MeanCoefficients, ModelSpec, extra_regressors
from .panel import PanelDataset


@dataclass(frozen=True)
class ColumnLayout:
    country: slice
    time: slice
    beta: slice
    gamma: slice
    extra_z: slice
    extra_h: slice
    k: int


class PanelDesign:
    """Regressor bookkeeping shared by the Gibbs blocks.

    Each country's window is indexed locally by t = 0..T_i-1. Observations are
    the periods t >= max(P, K); earlier periods serve as presample for the
    level lags while their volatilities stay latent states. Observation rows
    are stacked country by country, in time order.

    Columns of the per-equation regressor vector:
    ``[country dummies | time dummies | z lags | h terms | extra z | extra h]``.
    The coefficient matrix G has shape (k, N) with z_t = G' x_t + v_t.
    """

    def __init__(self, ds: PanelDataset, spec: ModelSpec):
        if tuple(ds.variable_names) != spec.variables:
            missing = set(spec.variables) - set(ds.variable_names)
            if missing:
                raise ValueError(f"dataset lacks variables {sorted(missing)}")
            order = [ds.variable_names.index(v) for v in spec.variables]
        else:
            order = list(range(ds.N))
        self.spec = spec
        self.M = ds.M
        self.N = spec.N
        self.Y = ds.T
        self.years = ds.years
        self.country_ids = ds.country_ids
        P, K, N = spec.P, spec.K, spec.N
        s0 = spec.first_obs

        self.offsets = []  # window start (global year index) per country
        self.lengths = []
        self.z = []
        for i in range(ds.M):
            a, b = ds.windows[i]
            self.offsets.append(a)
            self.lengths.append(b - a)
            self.z.append(np.ascontiguousarray(ds.values[i, a:b][:, order]))
        self.lengths = np.array(self.lengths, dtype=int)
        self.offsets = np.array(self.offsets, dtype=int)

        if spec.region_by_year:
            regions = sorted({c.region for c in ds.countries})
            self.time_group = np.array([regions.index(c.region) for c in ds.countries])
            self.group_names = tuple(regions)
        else:
            self.time_group = np.zeros(ds.M, dtype=int)
            self.group_names = ("all",)
        G = len(self.group_names)
        self.n_groups = G

        rows_c, rows_t, rows_y = [], [], []
        for i in range(ds.M):
            for t in range(s0, self.lengths[i]):
                rows_c.append(i)
                rows_t.append(t)
                rows_y.append(self.offsets[i] + t)
        self.obs_country = np.array(rows_c, dtype=int)
        self.obs_t = np.array(rows_t, dtype=int)
        self.obs_year = np.array(rows_y, dtype=int)
        self.n_obs = len(rows_c)
        # first stacked row of each country (n_obs for countries without observations)
        self.obs_start = np.searchsorted(self.obs_country, np.arange(ds.M + 1))

        # time dummies: drop the first observed year of every group
        time_cols: list[tuple[int, int]] = []
        if spec.time_effects or spec.region_by_year:
            for g in range(G):
                yrs = sorted({int(y) for y, c in zip(self.obs_year, self.obs_country) if self.time_group[c] == g})
                time_cols.extend((g, y) for y in yrs[1:])
        self.time_cols = time_cols

        n_c = ds.M if spec.country_effects else 1
        n_tau = len(time_cols)
        n_beta = P * N
        n_gamma = (K + 1) * N
        n_ez = sum(1 for e in spec.extras if e != "squared_volatility")
        n_eh = N if "squared_volatility" in spec.extras else 0
        edges = np.cumsum([0, n_c, n_tau, n_beta, n_gamma, n_ez, n_eh])
        self.layout = ColumnLayout(*(slice(int(edges[j]), int(edges[j + 1])) for j in range(6)), int(edges[-1]))
        self.k = self.layout.k

        self.y = np.zeros((self.n_obs, N))
        self.X_fixed = np.zeros((self.n_obs, self.k))
        L = self.layout
        col_of_time = {key: L.time.start + j for j, key in enumerate(time_cols)}
        for r in range(self.n_obs):
            i, t = self.obs_country[r], self.obs_t[r]
            zi = self.z[i]
            self.y[r] = zi[t]
            self.X_fixed[r, L.country.start + (i if spec.country_effects else 0)] = 1.0
            key = (int(self.time_group[i]), int(self.obs_year[r]))
            if key in col_of_time:
                self.X_fixed[r, col_of_time[key]] = 1.0
            lags = zi[t - P : t][::-1]  # z_{t-1}, ..., z_{t-P}
            self.X_fixed[r, L.beta] = lags.reshape(-1)
            if n_ez:
                ez = extra_regressors(spec, zi[t - 1], np.zeros(N))
                self.X_fixed[r, L.extra_z] = ez[:n_ez]
        self.mask = self._coefficient_mask()

    # ------------------------------------------------------------------ columns

    def _coefficient_mask(self) -> np.ndarray:
        """(k, N) boolean; False marks coefficients restricted to zero."""
        mask = np.ones((self.k, self.N), dtype=bool)
        if self.spec.recursive_gamma:
            N = self.N
            later = np.tril(np.ones((N, N), dtype=bool), -1)  # [m, n]: variable m ordered after equation n
            g0 = self.layout.gamma.start
            mask[g0 : g0 + N][later] = False
            if self.layout.extra_h.stop > self.layout.extra_h.start:
                e0 = self.layout.extra_h.start
                mask[e0 : e0 + N][later] = False
        return mask

    def h_block(self, h: list[np.ndarray] | tuple[np.ndarray, ...]) -> np.ndarray:
        """Volatility-dependent regressor columns (n_obs, (K+1)N [+ N])."""
        K, N = self.spec.K, self.N
        cols = np.zeros((self.n_obs, (K + 1) * N + (N if self.layout.extra_h.stop > self.layout.extra_h.start else 0)))
        for i in range(self.M):
            r0, r1 = self.obs_start[i], self.obs_start[i + 1]
            if r1 == r0:
                continue
            ts = self.obs_t[r0:r1]
            hi = h[i]
            for k in range(K + 1):
                cols[r0:r1, k * N : (k + 1) * N] = hi[ts - k]
            if cols.shape[1] > (K + 1) * N:
                cols[r0:r1, (K + 1) * N :] = hi[ts] ** 2
        return cols

    def X(self, h) -> np.ndarray:
        X = self.X_fixed.copy()
        hb = self.h_block(h)
        L = self.layout
        X[:, L.gamma] = hb[:, : (self.spec.K + 1) * self.N]
        if L.extra_h.stop > L.extra_h.start:
            X[:, L.extra_h] = hb[:, (self.spec.K + 1) * self.N :]
        return X

    def h_columns(self) -> np.ndarray:
        L = self.layout
        return np.r_[np.arange(L.gamma.start, L.gamma.stop), np.arange(L.extra_h.start, L.extra_h.stop)]

    def obs_h(self, h) -> np.ndarray:
        """Contemporaneous volatility at every observation row (n_obs, N)."""
        out = np.zeros((self.n_obs, self.N))
        for i in range(self.M):
            r0, r1 = self.obs_start[i], self.obs_start[i + 1]
            if r1 > r0:
                out[r0:r1] = h[i][self.obs_t[r0:r1]]
        return out

    # ------------------------------------------------------------- coefficients

    def to_coefficients(self, G: np.ndarray) -> MeanCoefficients:
        spec, L, N, M = self.spec, self.layout, self.N, self.M
        Gt = np.asarray(G, dtype=float).T  # (N, k)
        if spec.country_effects:
            c = Gt[:, L.country].T.copy()
        else:
            c = np.tile(Gt[:, L.country.start], (M, 1))
        tau = np.zeros((self.n_groups, self.Y, N))
        for j, (g, y) in enumerate(self.time_cols):
            tau[g, y] = Gt[:, L.time.start + j]
        beta = Gt[:, L.beta].reshape(N, spec.P, N).transpose(1, 0, 2).copy()
        gamma = Gt[:, L.gamma].reshape(N, spec.K + 1, N).transpose(1, 0, 2).copy()
        extra = np.concatenate([Gt[:, L.extra_z], Gt[:, L.extra_h]], axis=1)
        return MeanCoefficients(c=c, tau=tau, beta=beta, gamma=gamma, extra=extra)

    def from_coefficients(self, mean: MeanCoefficients) -> np.ndarray:
        spec, L, N = self.spec, self.layout, self.N
        Gt = np.zeros((N, self.k))
        if spec.country_effects:
            Gt[:, L.country] = mean.c.T
        else:
            Gt[:, L.country.start] = mean.c[0]
        for j, (g, y) in enumerate(self.time_cols):
            Gt[:, L.time.start + j] = mean.tau[g, y]
        Gt[:, L.beta] = mean.beta.transpose(1, 0, 2).reshape(N, -1)
        Gt[:, L.gamma] = mean.gamma.transpose(1, 0, 2).reshape(N, -1)
        n_ez = L.extra_z.stop - L.extra_z.start
        Gt[:, L.extra_z] = mean.extra[:, :n_ez]
        Gt[:, L.extra_h] = mean.extra[:, n_ez:]
        return Gt.T.copy()

    def column_labels(self) -> list[str]:
        spec, L = self.spec, self.layout
        labels = []
        if spec.country_effects:
            labels += [f"c[{cid}]" for cid in self.country_ids]
        else:
            labels.append("c")
        labels += [f"tau[{self.group_names[g]},{self.years[y]}]" for g, y in self.time_cols]
        labels += [f"beta{j + 1}[{v}]" for j in range(spec.P) for v in spec.variables]
        labels += [f"gamma{k}[{v}]" for k in range(spec.K + 1) for v in spec.variables]
        labels += [e for e in spec.extras if e != "squared_volatility"]
        if L.extra_h.stop > L.extra_h.start:
            labels += [f"squared_volatility[{v}]" for v in spec.variables]
        return labels

    # ---------------------------------------------------------------- residuals

    def residuals(self, G: np.ndarray, h) -> np.ndarray:
        return self.y - self.X(h) @ G

    def base_residuals(self, G: np.ndarray) -> list[np.ndarray]:
        """Per country (T_i, N): z_t minus the volatility-free part of the mean.

        Rows before the first observation are zero.
        """
        hcols = self.h_columns()
        Gf = np.array(G, dtype=float)
        Gf[hcols] = 0.0
        r = self.y - self.X_fixed @ Gf
        out = []
        for i in range(self.M):
            ri = np.zeros((self.lengths[i], self.N))
            r0, r1 = self.obs_start[i], self.obs_start[i + 1]
            ri[self.obs_t[r0:r1]] = r[r0:r1]
            out.append(ri)
        return out
