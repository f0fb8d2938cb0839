"""Exact likelihoods for the toy models, computed independently of the filters."""
import math

import numpy as np
from scipy import stats


def hmm_forward(y, p):
    """Two-state HMM; the hidden state moves once before each emission."""
    P = np.array([[1 - p["p01"], p["p01"]], [p["p10"], 1 - p["p10"]]])
    alpha = np.array([1 - p["pi1"], p["pi1"]])
    e1 = np.array([p["e0"], p["e1"]])
    total = 0.0
    for obs in y:
        alpha = alpha @ P
        alpha = alpha * (e1 if obs == 1 else 1 - e1)
        s = alpha.sum()
        total += math.log(s)
        alpha /= s
    return total


def deterministic_exact(y, p):
    flows = [round(p["x0"])] + [round(p["a"])] * (len(y) - 1)
    return float(sum(stats.poisson.logpmf(v, p["rho"] * f) for v, f in zip(y, flows)))


def immigration_death_exact(y, p, tail=1e-13):
    """Forward recursion over the population size, truncated where the Poisson tail is below ``tail``.

    Survivors k ~ Bin(x, s), deaths d = x - k are reported as Bin(d, rho), and
    the next size is k + Poisson(alpha).
    """
    alpha, s, rho, lam0 = p["alpha"], p["s"], p["rho"], p["lambda0"]
    top = max(lam0, alpha / (1 - s))
    xmax = int(stats.poisson.isf(tail, top)) + 10
    xs = np.arange(xmax + 1)
    w = stats.poisson.pmf(xs, lam0)
    # surv[x, k] = P(k survivors | x)
    surv = stats.binom.pmf(xs[None, :], xs[:, None], s)
    imm = stats.poisson.pmf(xs, alpha)
    # arrive[k, x'] = P(x' | k survivors)
    arrive = np.zeros((xmax + 1, xmax + 1))
    for k in range(xmax + 1):
        arrive[k, k:] = imm[: xmax + 1 - k]
    total = 0.0
    for obs in y:
        deaths = xs[:, None] - xs[None, :]
        report = np.where(deaths >= 0, stats.binom.pmf(obs, np.maximum(deaths, 0), rho), 0.0)
        joint = w[:, None] * surv * report  # over (x, k)
        post_k = joint.sum(axis=0)
        lik = post_k.sum()
        total += math.log(lik)
        w = (post_k / lik) @ arrive
    return total


def arma_dense_loglik(x, ar, ma, mean, variance, lags=4000):
    """Gaussian loglik from the full autocovariance matrix, built from truncated psi weights."""
    psi = np.zeros(lags)
    psi[0] = 1.0
    for j in range(1, lags):
        acc = ma[j - 1] if j - 1 < len(ma) else 0.0
        for i, a in enumerate(ar, start=1):
            if j - i >= 0:
                acc += a * psi[j - i]
        psi[j] = acc
    n = len(x)
    acov = variance * np.array([psi[: lags - h] @ psi[h:] for h in range(n)])
    idx = np.arange(n)
    cov = acov[np.abs(idx[:, None] - idx[None, :])]
    return float(stats.multivariate_normal(np.full(n, mean), cov).logpdf(x))
