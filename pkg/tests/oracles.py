"""Naive reference implementations used as test oracles."""
import math

import numpy as np


def loop_cross_attention(z, c, wk, wv, wq):
    """Attention output computed position by position with scalar loops."""
    n, s = z.shape[0], c.shape[0]
    d = wq.shape[1]
    q = [[sum(z[i, a] * wq[a, j] for a in range(z.shape[1])) for j in range(d)] for i in range(n)]
    k = [[sum(c[t, a] * wk[a, j] for a in range(c.shape[1])) for j in range(d)] for t in range(s)]
    v = [[sum(c[t, a] * wv[a, j] for a in range(c.shape[1])) for j in range(wv.shape[1])] for t in range(s)]
    out = np.zeros((n, wv.shape[1]))
    for i in range(n):
        logits = [sum(q[i][j] * k[t][j] for j in range(d)) / math.sqrt(d) for t in range(s)]
        m = max(logits)
        e = [math.exp(x - m) for x in logits]
        tot = sum(e)
        for t in range(s):
            for j in range(wv.shape[1]):
                out[i, j] += e[t] / tot * v[t][j]
    return out


def loop_relevance(z, c_obj, wk, wq):
    """Mean over object tokens of each token's softmax over positions."""
    n, s = z.shape[0], c_obj.shape[0]
    d = wq.shape[1]
    q = [[sum(z[i, a] * wq[a, j] for a in range(z.shape[1])) for j in range(d)] for i in range(n)]
    k = [[sum(c_obj[t, a] * wk[a, j] for a in range(c_obj.shape[1])) for j in range(d)] for t in range(s)]
    out = np.zeros(n)
    for t in range(s):
        logits = [sum(k[t][j] * q[i][j] for j in range(d)) / math.sqrt(d) for i in range(n)]
        m = max(logits)
        e = [math.exp(x - m) for x in logits]
        tot = sum(e)
        for i in range(n):
            out[i] += e[i] / tot / s
    return out


def ddim_with_true_eps(x0, noise, sched, ts):
    """Deterministic DDIM chain whose noise prediction is the ground truth."""
    x = sched.alpha[ts[0]] * x0 + sched.sigma[ts[0]] * noise
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        eps = (x - sched.alpha[t] * x0) / sched.sigma[t]
        x0_hat = (x - sched.sigma[t] * eps) / sched.alpha[t]
        x = sched.alpha[t_prev] * x0_hat + sched.sigma[t_prev] * eps
    return x
