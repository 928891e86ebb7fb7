"""Independent reference computations used by the unit and acceptance tests."""
import itertools

import numpy as np
from scipy.optimize import minimize


def exponent(p, mu, scale=1.0):
    """``min_j (mu_I - mu_j)^2 / (2 scale (1/p_I + 1/p_j))``, vectorised over rows of ``p``."""
    p = np.atleast_2d(p)
    lead = int(np.argmax(mu))
    others = [j for j in range(len(mu)) if j != lead]
    with np.errstate(divide="ignore"):
        vals = [(mu[lead] - mu[j]) ** 2 / (2 * scale * (1 / p[:, lead] + 1 / p[:, j]))
                for j in others]
    return np.min(vals, axis=0)


def simplex_grid(k, n):
    """All points of the simplex with coordinates in multiples of 1/n."""
    pts = [c for c in itertools.product(range(n + 1), repeat=k - 1) if sum(c) <= n]
    a = np.array(pts, dtype=float)
    return np.column_stack([a, n - a.sum(axis=1)]) / n


def local_grid(center, half_width, step):
    """Simplex points on a ``step`` lattice within ``half_width`` of ``center``."""
    k = center.size
    offs = np.arange(-half_width, half_width + step / 2, step)
    axes = [np.round(center[i] + offs, 12) for i in range(k - 1)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, k - 1)
    last = 1.0 - mesh.sum(axis=1)
    pts = np.column_stack([mesh, last])
    return pts[np.all(pts > 0, axis=1)]


def grid_p_star(mu, scale=1.0, resolution=1e-3):
    """Grid-search maximiser of the exponent at the given resolution.

    Exhaustive for k <= 3; for k = 4 a 1e-2 grid locates the peak and a
    ``resolution`` lattice around it finishes the search.
    """
    mu = np.asarray(mu, dtype=float)
    k = mu.size
    n = int(round(1 / resolution))
    if k <= 3:
        pts = simplex_grid(k, n)
    else:
        coarse = simplex_grid(k, 100)
        best = coarse[np.argmax(exponent(coarse, mu, scale))]
        pts = local_grid(best, 0.03, resolution)
    vals = exponent(pts, mu, scale)
    i = int(np.argmax(vals))
    return pts[i], float(vals[i])


def polish(p0, mu, scale=1.0):
    """Refine a grid maximiser with SLSQP on the epigraph form."""
    mu = np.asarray(mu, dtype=float)
    k = mu.size
    lead = int(np.argmax(mu))
    others = [j for j in range(k) if j != lead]

    def ratio(x, j):
        p = x[:k]
        return (mu[lead] - mu[j]) ** 2 / (2 * scale * (1 / p[lead] + 1 / p[j]))

    cons = [{"type": "eq", "fun": lambda x: x[:k].sum() - 1.0}]
    cons += [{"type": "ineq", "fun": (lambda x, j=j: ratio(x, j) - x[k])} for j in others]
    x0 = np.append(p0, exponent(p0, mu, scale)[0])
    res = minimize(lambda x: -x[k], x0, method="SLSQP", constraints=cons,
                   bounds=[(1e-9, 1.0)] * k + [(0.0, None)],
                   options={"ftol": 1e-15, "maxiter": 500})
    p = res.x[:k] / res.x[:k].sum()
    return p, float(exponent(p, mu, scale)[0])


def batch_posterior(prior_mean, prior_cov, sigma2, features, rewards):
    """Posterior mean and covariance by direct inversion of the precision."""
    P0 = np.linalg.inv(prior_cov)
    Phi = np.asarray(features)
    prec = P0 + Phi.T @ Phi / sigma2
    cov = np.linalg.inv(prec)
    mean = cov @ (P0 @ prior_mean + Phi.T @ np.asarray(rewards) / sigma2)
    return mean, cov
