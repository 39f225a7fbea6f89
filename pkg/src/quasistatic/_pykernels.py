"""Pure numpy implementations of the hot loops.

Same signatures as the compiled ``_ckernels`` module. Loops run over time
steps and are vectorized across ensemble members.
"""

import numpy as np

TWO_PI = 2.0 * np.pi
_TWO_M53 = 2.0 ** -53


def galerkin_entries(breaks, degree, freqs, amps, M, gx, gw):
    """Sparse triplets of the hat-projected transfer operator (see ``transfer``)."""
    b = np.asarray(breaks, dtype=float)
    length = np.append(b[1:], b[0] + 1.0) - b
    yq = (b[:, None] + length[:, None] * gx[None, :]).ravel() % 1.0
    wq = (length[:, None] * gw[None, :]).ravel() * M
    u = yq * M - 0.5
    a = np.floor(u)
    alpha = u - a
    a = a.astype(np.int64) % M
    ty = degree * yq
    if len(freqs):
        ty = ty + np.sin(TWO_PI * np.multiply.outer(yq, freqs)) @ amps
    v = (ty % 1.0) * M - 0.5
    i = np.floor(v)
    beta = v - i
    i = i.astype(np.int64) % M
    a1 = (a + 1) % M
    i1 = (i + 1) % M
    rows = np.concatenate([i, i, i1, i1])
    cols = np.concatenate([a, a1, a, a1])
    vals = np.concatenate([wq * (1 - beta) * (1 - alpha), wq * (1 - beta) * alpha,
                           wq * beta * (1 - alpha), wq * beta * alpha])
    return rows, cols, vals


def eval_observable(obs, x):
    """Packed observable (see ``kernels.pack_observable``) at points ``x``; shape ``(len(x), d)``."""
    d = obs["const"].shape[0]
    out = np.empty((x.shape[0], d))
    out[:] = obs["const"]
    if obs["freq"].size:
        ang = TWO_PI * np.multiply.outer(x, obs["freq"])
        out += np.cos(ang) @ obs["cos"].T + np.sin(ang) @ obs["sin"].T
    off = obs["step_offsets"]
    for c in range(d):
        lo, hi = off[c], off[c + 1]
        if hi > lo:
            br = obs["step_breaks"][lo:hi]
            vals = obs["step_vals"][lo:hi]
            idx = np.searchsorted(br, x, side="right") - 1
            out[:, c] += vals[idx]
    return out


def _record(out, partial, fx, k, k_idx, fracs, ptr):
    while ptr < k_idx.size and k_idx[ptr] == k:
        out[:, ptr, :] = partial + fracs[ptr] * fx
        ptr += 1
    return ptr


def birkhoff_float(x0, degrees, amps, freqs, obs, k_idx, fracs):
    """Birkhoff sums ``S(x, t_j) = sum_{k < K_j} f(x_k) + frac_j f(x_{K_j})``.

    ``degrees[k-1], amps[k-1]`` describe ``T_{n,k}``. Returns ``(m, J, d)``.
    """
    x = np.array(x0, dtype=float)
    m, J, d = x.size, k_idx.size, obs["const"].shape[0]
    out = np.zeros((m, J, d))
    partial = np.zeros((m, d))
    kmax = int(k_idx[-1]) if J else 0
    ptr = 0
    for k in range(kmax + 1):
        fx = eval_observable(obs, x)
        ptr = _record(out, partial, fx, k, k_idx, fracs, ptr)
        if k == kmax:
            break
        partial += fx
        y = degrees[k] * x
        if freqs.size:
            y += np.sin(TWO_PI * np.multiply.outer(x, freqs)) @ amps[k]
        x = y - np.floor(y)
    return out


def _window(words, k):
    q, s = divmod(k, 64)
    if s == 0:
        return words[:, q]
    s = np.uint64(s)
    return (words[:, q] << s) | (words[:, q + 1] >> (np.uint64(64) - s))


def birkhoff_bits(words, obs, k_idx, fracs):
    """Birkhoff sums for the doubling map from exact binary expansions.

    ``words[i]`` holds the binary digits of member ``i`` most significant
    first; ``x_k`` is read from digits ``k .. k+52``.
    """
    m, J, d = words.shape[0], k_idx.size, obs["const"].shape[0]
    out = np.zeros((m, J, d))
    partial = np.zeros((m, d))
    kmax = int(k_idx[-1]) if J else 0
    if words.shape[1] < kmax // 64 + 2:
        raise ValueError("not enough binary digits for the requested horizon")
    ptr = 0
    for k in range(kmax + 1):
        x = (_window(words, k) >> np.uint64(11)).astype(float) * _TWO_M53
        fx = eval_observable(obs, x)
        ptr = _record(out, partial, fx, k, k_idx, fracs, ptr)
        if k == kmax:
            break
        partial += fx
    return out
