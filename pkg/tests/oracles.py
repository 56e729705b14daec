"""Independent fp64 reference implementations used as test oracles.

Everything here is written with explicit loops over plain numpy arrays and
shares no code with the package, so agreement is evidence of correctness
rather than of consistency.
"""
import math

import numpy as np


def silu(x):
    return x / (1.0 + np.exp(-x))


def softplus(x):
    return np.where(x > 20.0, x, np.log1p(np.exp(np.minimum(x, 20.0))))


def rmsnorm(x, w, eps, group=None, div=None):
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    group = group or d
    div = div or group
    out = np.empty_like(x)
    flat = x.reshape(-1, d)
    o = out.reshape(-1, d)
    for r in range(flat.shape[0]):
        for s in range(0, d, group):
            seg = flat[r, s : s + group]
            o[r, s : s + group] = w[s : s + group] * seg / math.sqrt(float(seg @ seg) / div + eps)
    return out


def conv_causal(x, w, b):
    """x [C, T], w [C, K], b [C]."""
    C, T = x.shape
    K = w.shape[1]
    y = np.zeros((C, T))
    for c in range(C):
        for t in range(T):
            acc = b[c]
            for k in range(K):
                src = t - (K - 1) + k
                if src >= 0:
                    acc += w[c, k] * x[c, src]
            y[c, t] = acc
    return y


def ssd(x, B, C, dt_raw, A_log, D, dt_bias, h0=None):
    T, H, P = x.shape
    G, N = B.shape[1], B.shape[2]
    S = np.zeros((H, P, N)) if h0 is None else np.array(h0, dtype=np.float64)
    y = np.zeros((T, H, P))
    for t in range(T):
        for h in range(H):
            g = h * G // H
            delta = float(softplus(np.array(dt_raw[t, h] + dt_bias[h])))
            decay = math.exp(delta * -math.exp(A_log[h]))
            for p in range(P):
                for n in range(N):
                    S[h, p, n] = decay * S[h, p, n] + delta * x[t, h, p] * B[t, g, n]
                y[t, h, p] = float(S[h, p] @ C[t, g]) + D[h] * x[t, h, p]
    return y, S


def cross_entropy(logits, targets):
    tot = 0.0
    for row, tg in zip(logits, targets):
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        tot += lse - row[tg]
    return tot / len(targets)


def block(ts, u, d_model, H, P, N, G, K, norm_div=None, eps=1e-5):
    """One block from a dict of component arrays (checkpoint names), fp64 throughout."""
    ts = {k: np.asarray(v, dtype=np.float64) for k, v in ts.items()}
    u = np.asarray(u, dtype=np.float64)
    T = u.shape[0]
    W = ts["in_proj.weight"]
    proj = u @ W
    z = proj[:, : H * P]
    xbc = proj[:, H * P : 2 * H * P + 2 * G * N]
    dt = proj[:, 2 * H * P + 2 * G * N :]
    xbc = silu(conv_causal(xbc.T, ts["conv1d.weight"], ts["conv1d.bias"]).T)
    x = xbc[:, : H * P].reshape(T, H, P)
    B = xbc[:, H * P : H * P + G * N].reshape(T, G, N)
    C = xbc[:, H * P + G * N :].reshape(T, G, N)
    y, _ = ssd(x, B, C, dt, ts["A_log"], ts["D"], ts["dt_bias"])
    y = y.reshape(T, H * P) * silu(z)
    y = rmsnorm(y, ts["norm.weight"], eps, group=P, div=norm_div or P)
    out = y @ ts["out_proj.weight"]
    if "out_proj.bias" in ts:
        out = out + ts["out_proj.bias"]
    h = u + out
    if "mlp.gate.weight" in ts:
        act = silu(h @ ts["mlp.gate.weight"]) * (h @ ts["mlp.up.weight"])
        h = h + act @ ts["mlp.down.weight"]
    return h


def model_logits(model, tokens):
    d = model.dims
    emb = model.params.embedding.numpy().astype(np.float64)
    h = emb[np.asarray(tokens)]
    for i, blk in enumerate(model.params.layers):
        bd = d.block(i)
        ts = {k: v.numpy() for k, v in blk.tensors().items()}
        h = block(ts, h, d.d_model, bd.n_heads, bd.head_dim, bd.d_state, bd.n_groups, bd.d_conv, bd.norm_div, d.norm_eps)
    h = rmsnorm(h, model.params.norm_f.numpy().astype(np.float64), d.norm_eps)
    return h @ emb.T


def ranks(a):
    a = np.asarray(a, dtype=np.float64)
    order = np.argsort(a, kind="stable")
    r = np.empty(len(a))
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and a[order[j + 1]] == a[order[i]]:
            j += 1
        r[order[i : j + 1]] = (i + j) / 2.0
        i = j + 1
    return r


def spearman(a, b):
    ra, rb = ranks(a), ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    return float(ra @ rb / math.sqrt((ra @ ra) * (rb @ rb)))


def central_diff(f, leaves, h=1e-6):
    """Gradient of scalar ``f(leaves)`` by central differences, fp64."""
    grads = {}
    for name, arr in leaves.items():
        g = np.zeros_like(arr, dtype=np.float64)
        for idx in np.ndindex(arr.shape):
            plus = {k: v.astype(np.float64).copy() for k, v in leaves.items()}
            minus = {k: v.astype(np.float64).copy() for k, v in leaves.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            g[idx] = (f(plus) - f(minus)) / (2 * h)
        grads[name] = g
    return grads
