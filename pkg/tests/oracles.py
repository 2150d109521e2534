"""Independent brute-force implementations used as test oracles.

Everything here is written as direct loops over the defining formulas, with
no shared code or vectorisation tricks from the package under test.
"""

import numpy as np


def naive_neg_logpl(time, status, X, beta, weights=None, n_ref=None):
    """Direct double-loop negative log partial likelihood.

    Unit weights reproduce the classical (1/n) * sum definition; explicit
    weights normalise by total weight and use ``n_ref`` (default: the full
    size) inside the log term.
    """
    m = len(time)
    w = np.ones(m) if weights is None else np.asarray(weights, float)
    W = w.sum()
    n_ref = (m if weights is None else n_ref) or m
    total = 0.0
    for i in range(m):
        if status[i] != 1:
            continue
        denom = 0.0
        for j in range(m):
            if time[j] >= time[i]:
                denom += w[j] * np.exp(X[j] @ beta)
        total += w[i] * (X[i] @ beta - np.log(n_ref * denom / W))
    return -total / W


def naive_score(time, status, X, beta, weights=None):
    m, p = X.shape
    w = np.ones(m) if weights is None else np.asarray(weights, float)
    W = w.sum()
    out = np.zeros(p)
    for i in range(m):
        if status[i] != 1:
            continue
        num = np.zeros(p)
        den = 0.0
        for j in range(m):
            if time[j] >= time[i]:
                e = w[j] * np.exp(X[j] @ beta)
                num += e * X[j]
                den += e
        out += w[i] * (X[i] - num / den)
    return -out / W


def naive_hessian(time, status, X, beta, weights=None):
    m, p = X.shape
    w = np.ones(m) if weights is None else np.asarray(weights, float)
    W = w.sum()
    out = np.zeros((p, p))
    for i in range(m):
        if status[i] != 1:
            continue
        s0 = 0.0
        s1 = np.zeros(p)
        s2 = np.zeros((p, p))
        for j in range(m):
            if time[j] >= time[i]:
                e = w[j] * np.exp(X[j] @ beta)
                s0 += e
                s1 += e * X[j]
                s2 += e * np.outer(X[j], X[j])
        xbar = s1 / s0
        out += w[i] * (s2 / s0 - np.outer(xbar, xbar))
    return out / W


def naive_nelson_aalen(time, status):
    """Classical increment-per-event-time estimator: d_k / (number at risk)."""
    event_times = np.unique(np.asarray(time)[np.asarray(status) == 1])
    jumps = []
    for t in event_times:
        d = sum(1 for i in range(len(time)) if time[i] == t and status[i] == 1)
        at_risk = sum(1 for i in range(len(time)) if time[i] >= t)
        jumps.append(d / at_risk)
    return event_times, np.asarray(jumps)


def naive_breslow(time, status, X, beta):
    """Per-record loop over the defining sum, grouped by distinct event time."""
    event_times = np.unique(np.asarray(time)[np.asarray(status) == 1])
    jumps = []
    for t in event_times:
        total = 0.0
        for i in range(len(time)):
            if time[i] == t and status[i] == 1:
                denom = sum(
                    np.exp(X[j] @ beta) for j in range(len(time)) if time[j] >= time[i]
                )
                total += 1.0 / denom
        jumps.append(total)
    return event_times, np.asarray(jumps)


def naive_score_residual(time, status, X, i, xbar_at, jump_times, jumps, beta):
    """Exact sum over hazard jumps for one record.

    ``xbar_at`` is a callable t -> p-vector.
    """
    p = X.shape[1]
    out = np.zeros(p)
    if status[i] == 1:
        out += X[i] - xbar_at(time[i])
    risk = np.exp(X[i] @ beta)
    for t, dlam in zip(jump_times, jumps):
        if t <= time[i]:
            out -= (X[i] - xbar_at(t)) * risk * dlam
    return out


def finite_diff_grad(f, x, h=1e-6):
    x = np.asarray(x, float)
    out = np.zeros_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def finite_diff_jacobian(g, x, h=1e-5):
    x = np.asarray(x, float)
    g0 = np.asarray(g(x))
    out = np.zeros((g0.size, x.size))
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        out[:, k] = (np.asarray(g(x + e)) - np.asarray(g(x - e))) / (2 * h)
    return out
