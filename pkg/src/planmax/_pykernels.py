"""Pure numpy kernels; reference semantics for ``_ckernels``.

States are flat cell indices ``s = row * W + col``.  ``nbr`` is an (S, A)
table of successor states per action with -1 for off-grid moves; in the
5-action layout column 4 is ``end`` and holds ``s`` itself (the goal state
at the same cell).
"""

import numpy as np

NEG_INF = -np.inf


def _logsumexp_rows(q):
    m = q.max(axis=1)
    finite = m > NEG_INF
    m_safe = np.where(finite, m, 0.0)
    with np.errstate(invalid="ignore"):
        s = np.exp(q - m_safe[:, None]).sum(axis=1)
    with np.errstate(divide="ignore"):
        out = m_safe + np.log(s)
    return np.where(finite, out, NEG_INF)


def _policy_rows(q, v):
    ok = v > NEG_INF
    with np.errstate(invalid="ignore"):
        p = np.exp(q - np.where(ok, v, 0.0)[:, None])
    return np.where(ok[:, None], p, 0.0)


def _successor_values(v, nbr):
    out = np.full(nbr.shape, NEG_INF)
    valid = nbr >= 0
    out[valid] = v[nbr[valid]]
    return out


def solve_inferred(r_path, r_goal, nbr, n_steps):
    s = r_path.shape[0]
    V = np.empty((n_steps + 1, s))
    Q = np.empty((n_steps, s, 5))
    pi = np.empty((n_steps, s, 5))
    V[n_steps] = NEG_INF
    for n in range(n_steps, 0, -1):
        q = Q[n - 1]
        q[:, :4] = r_path[:, None] + _successor_values(V[n], nbr[:, :4])
        q[:, 4] = r_path + r_goal
        V[n - 1] = _logsumexp_rows(q)
        pi[n - 1] = _policy_rows(q, V[n - 1])
    return V, Q, pi


def solve_goal(r, nbr, goal, n_steps):
    s = r.shape[0]
    V = np.empty((n_steps + 1, s))
    Q = np.empty((n_steps, s, 4))
    pi = np.empty((n_steps, s, 4))
    V[n_steps] = NEG_INF
    for n in range(n_steps, 0, -1):
        V[n, goal] = 0.0
        q = Q[n - 1]
        q[:] = r[:, None] + _successor_values(V[n], nbr[:, :4])
        V[n - 1] = _logsumexp_rows(q)
        pi[n - 1] = _policy_rows(q, V[n - 1])
    return V, Q, pi


def _spread(d, pi_n, nbr, n_moves):
    s = d.shape[0]
    out = np.zeros(s)
    w = d[:, None] * pi_n[:, :n_moves]
    for a in range(n_moves):
        valid = nbr[:, a] >= 0
        out += np.bincount(nbr[valid, a], weights=w[valid, a], minlength=s)
    return out


def propagate_inferred(pi, nbr, s_init):
    n_steps, s, _ = pi.shape
    Dp = np.zeros((n_steps + 1, s))
    Dg = np.zeros((n_steps + 1, s))
    Dp[0, s_init] = 1.0
    for n in range(n_steps):
        Dp[n + 1] = _spread(Dp[n], pi[n], nbr, 4)
        Dg[n + 1] = Dp[n] * pi[n, :, 4]
    return Dp, Dg


def propagate_goal(pi, nbr, s_init, goal):
    n_steps, s, _ = pi.shape
    Dp = np.zeros((n_steps + 1, s))
    Dp[0, s_init] = 1.0
    for n in range(n_steps):
        Dp[n, goal] = 0.0
        Dp[n + 1] = _spread(Dp[n], pi[n], nbr, 4)
    Dp[n_steps, goal] = 0.0
    return Dp


def sample_plans(pi, nbr, s_init, uniforms):
    """Ancestral sampling; returns (M, N) path-state indices (-1 padded) and lengths."""
    m, n_steps = uniforms.shape
    n_actions = pi.shape[2]
    cells = np.full((m, n_steps), -1, dtype=np.int64)
    lengths = np.zeros(m, dtype=np.int64)
    state = np.full(m, s_init, dtype=np.int64)
    active = np.arange(m)
    for n in range(n_steps):
        if active.size == 0:
            break
        st = state[active]
        cells[active, n] = st
        p = pi[n, st]
        cum = np.cumsum(p, axis=1)
        a = np.sum(cum <= uniforms[active, n][:, None], axis=1)
        over = a >= n_actions
        if over.any():
            # rounding left u above the total; take the last action with mass
            last = n_actions - 1 - np.argmax(p[over][:, ::-1] > 0, axis=1)
            a[over] = last
        done = a == n_actions - 1
        lengths[active[done]] = n + 1
        keep = ~done
        state[active[keep]] = nbr[st[keep], a[keep]]
        active = active[keep]
    lengths[active] = n_steps
    return cells, lengths


def assign_nearest(x, centers):
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    return labels, d2[np.arange(len(x)), labels]
