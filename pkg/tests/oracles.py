"""Slow reference implementations used to cross-check the fast paths.

Everything in here is deliberately written as plain Python loops over
scalars, directly transcribing the defining formulas. No vectorized
shortcuts: these results are only trusted because they are too simple
to be wrong in the same way as the real code.
"""

import numpy as np


def conv2d_loops(x, w, stride=1, padding="same"):
    """Cross-correlation by six nested loops. x (N,C,H,W), w (K,K,Cin,Cout)."""
    n, c, h, wd = x.shape
    k = w.shape[0]
    if padding == "same":
        ho = -(-h // stride)
        wo = -(-wd // stride)
        ph = max((ho - 1) * stride + k - h, 0)
        pw = max((wo - 1) * stride + k - wd, 0)
        pt, pl = ph // 2, pw // 2
        xp = np.zeros((n, c, h + ph, wd + pw), dtype=x.dtype)
        xp[:, :, pt:pt + h, pl:pl + wd] = x
    elif padding == "valid":
        ho = (h - k) // stride + 1
        wo = (wd - k) // stride + 1
        xp = x
    else:
        raise ValueError(padding)
    cout = w.shape[3]
    y = np.zeros((n, cout, ho, wo), dtype=x.dtype)
    for b in range(n):
        for f in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[b, ci, i * stride + u, j * stride + v] \
                                    * w[u, v, ci, f]
                    y[b, f, i, j] = acc
    return y


def depthwise_conv2d_loops(x, w, stride=1, padding="same"):
    """Per-channel cross-correlation by five nested loops. w is (K,K,C)."""
    n, c, h, wd = x.shape
    k = w.shape[0]
    if padding == "same":
        ho = -(-h // stride)
        wo = -(-wd // stride)
        ph = max((ho - 1) * stride + k - h, 0)
        pw = max((wo - 1) * stride + k - wd, 0)
        pt, pl = ph // 2, pw // 2
        xp = np.zeros((n, c, h + ph, wd + pw), dtype=x.dtype)
        xp[:, :, pt:pt + h, pl:pl + wd] = x
    else:
        ho = (h - k) // stride + 1
        wo = (wd - k) // stride + 1
        xp = x
    y = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for b in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for u in range(k):
                        for v in range(k):
                            acc += xp[b, ci, i * stride + u, j * stride + v] \
                                * w[u, v, ci]
                    y[b, ci, i, j] = acc
    return y


def dense_loops(x, w):
    """(N,D) @ (D,M) by three nested loops."""
    n, d = x.shape
    m = w.shape[1]
    y = np.zeros((n, m), dtype=x.dtype)
    for b in range(n):
        for j in range(m):
            acc = 0.0
            for i in range(d):
                acc += x[b, i] * w[i, j]
            y[b, j] = acc
    return y


def max_pool_loops(x, k, stride):
    """Valid-window max pooling by explicit window scans."""
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    y = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for b in range(n):
        for ci in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = -np.inf
                    for u in range(k):
                        for v in range(k):
                            val = x[b, ci, i * stride + u, j * stride + v]
                            if val > best:
                                best = val
                    y[b, ci, i, j] = best
    return y


def batch_norm_loops(x, gamma, beta, eps=1e-5):
    """Train-mode batch norm per channel, biased variance."""
    n, c, h, w = x.shape
    y = np.zeros_like(x)
    m = n * h * w
    for ci in range(c):
        vals = [x[b, ci, i, j] for b in range(n) for i in range(h) for j in range(w)]
        mu = sum(vals) / m
        var = sum((v - mu) ** 2 for v in vals) / m
        for b in range(n):
            for i in range(h):
                for j in range(w):
                    y[b, ci, i, j] = gamma[ci] * (x[b, ci, i, j] - mu) \
                        / np.sqrt(var + eps) + beta[ci]
    return y


def kl_term_loops(t_logits, s_logits, tau):
    """tau^2 * mean over rows of KL(softmax(t/tau) || softmax(s/tau))."""
    t = np.asarray(t_logits, dtype=np.float64) / tau
    s = np.asarray(s_logits, dtype=np.float64) / tau
    total = 0.0
    for r in range(t.shape[0]):
        pt = np.exp(t[r] - t[r].max())
        pt /= pt.sum()
        ps = np.exp(s[r] - s[r].max())
        ps /= ps.sum()
        total += sum(pt[k] * (np.log(pt[k]) - np.log(ps[k])) for k in range(t.shape[1]))
    return tau * tau * total / t.shape[0]


def best_mask_exhaustive(scores, n_keep, min_f):
    """Exhaustive search over all keep-sets of size n_keep honoring the
    per-layer floor; returns the set of (layer, idx) pairs with maximum
    total score. Only usable for tiny instances."""
    import itertools

    entries = [(lid, i) for lid in sorted(scores) for i in range(len(scores[lid]))]
    best, best_total = None, -np.inf
    for combo in itertools.combinations(entries, n_keep):
        per_layer = {lid: 0 for lid in scores}
        for lid, _ in combo:
            per_layer[lid] += 1
        if any(per_layer[lid] < min(min_f, len(scores[lid])) for lid in scores):
            continue
        total = sum(scores[lid][i] for lid, i in combo)
        if total > best_total:
            best, best_total = set(combo), total
    return best


def surrogate_loops(dY, x, w, stride=1, padding="same"):
    """Score gradient by definition: elementwise product of the upstream
    gradient with the unmasked conv output, summed per out-channel."""
    pre = conv2d_loops(x, w, stride, padding)
    cout = pre.shape[1]
    g = np.zeros(cout, dtype=np.float64)
    for n in range(cout):
        for b in range(pre.shape[0]):
            for i in range(pre.shape[2]):
                for j in range(pre.shape[3]):
                    g[n] += dY[b, n, i, j] * pre[b, n, i, j]
    return g


def fd_grad(f, x, h=1e-5):
    """Central finite-difference gradient of scalar-valued f at x (f64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def rel_err(a, b):
    """max |a-b| / max(1, |a|, |b|), elementwise then reduced."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.abs(a - b) / denom) if a.ndim == 0 \
        else float((np.abs(a - b) / denom).max())


def int_tensor(rng, shape, lo=-4, hi=5, dtype=np.float64):
    """Integer-valued float array: sums are order-independent, so results
    from differently associated reductions must agree exactly."""
    return rng.integers(lo, hi, size=shape).astype(dtype)
