"""Reference computations that share no code with the sampler."""

import numpy as np
from scipy import stats


def direct_wls(ds, spec, A, h):
    """Coefficients of the mean equation by whitened least squares, built from scratch.

    Each observation row is premultiplied by diag(exp(-h_t/2)) A, which makes
    the errors iid standard normal; restricted coefficients (later-ordered
    contemporaneous volatilities) are dropped.
    """
    N, P, K, M = spec.N, spec.P, spec.K, ds.M
    s0 = max(P, K)
    obs = []
    for i in range(M):
        a, b = ds.windows[i]
        for t in range(s0, b - a):
            obs.append((i, a, t))
    years = sorted({a + t for _, a, t in obs})
    year_cols = {y: j for j, y in enumerate(years[1:])} if spec.time_effects else {}
    kx = M + len(year_cols) + P * N + (K + 1) * N

    def x_row(i, a, t):
        z = ds.values[i, a:]
        x = np.zeros(kx)
        x[i] = 1.0
        if a + t in year_cols:
            x[M + year_cols[a + t]] = 1.0
        off = M + len(year_cols)
        for j in range(P):
            x[off + j * N : off + (j + 1) * N] = z[t - 1 - j]
        off += P * N
        for k in range(K + 1):
            x[off + k * N : off + (k + 1) * N] = h[i][t - k]
        return x

    keep = np.ones((N, kx), dtype=bool)
    g0 = M + len(year_cols) + P * N
    for n in range(N):
        keep[n, g0 + n + 1 : g0 + N] = False
    keep = keep.reshape(-1)
    rows, rhs = [], []
    for i, a, t in obs:
        x = x_row(i, a, t)
        W = np.diag(np.exp(-0.5 * h[i][t])) @ A
        rows.append(np.kron(W, x[None, :])[:, keep])
        rhs.append(W @ ds.values[i, a + t])
    coef = np.zeros(N * kx)
    coef[keep] = np.linalg.lstsq(np.vstack(rows), np.concatenate(rhs), rcond=None)[0]
    Gt = coef.reshape(N, kx)
    tau = np.zeros((ds.T, N))
    for y, j in year_cols.items():
        tau[y] = Gt[:, M + j]
    off = M + len(year_cols)
    beta = np.stack([Gt[:, off + j * N : off + (j + 1) * N] for j in range(P)])
    off += P * N
    gamma = np.stack([Gt[:, off + k * N : off + (k + 1) * N] for k in range(K + 1)])
    return {"c": Gt[:, :M].T, "tau": tau, "beta": beta, "gamma": gamma}


def grid_smoother(y, c, gamma, alpha, theta, sd, n_grid=512, width=8.0):
    """Posterior means of h_t for y_t = c + gamma h_t + exp(h_t/2) e_t on a fixed grid.

    h_t = alpha + theta h_{t-1} + sd eta_t with h_0 from the stationary law.
    """
    m0 = alpha / (1 - theta)
    s0 = sd / np.sqrt(1 - theta**2)
    x = np.linspace(m0 - width * s0, m0 + width * s0, n_grid)
    trans = stats.norm.pdf(x[None, :], alpha + theta * x[:, None], sd)
    lik = stats.norm.pdf(np.asarray(y)[:, None], c + gamma * x[None, :], np.exp(0.5 * x)[None, :])
    T = len(y)
    fwd = np.zeros((T, n_grid))
    f = stats.norm.pdf(x, m0, s0) * lik[0]
    fwd[0] = f / f.sum()
    for t in range(1, T):
        f = (fwd[t - 1] @ trans) * lik[t]
        fwd[t] = f / f.sum()
    back = np.ones(n_grid)
    means = np.zeros(T)
    for t in range(T - 1, -1, -1):
        post = fwd[t] * back
        means[t] = post @ x / post.sum()
        back = trans @ (lik[t] * back)
        back /= back.sum()
    return means
