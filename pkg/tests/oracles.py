"""Independent oracle implementations used to verify the library.

Everything here re-derives a quantity through a different route than the
library: numerical quadrature instead of series expansions, EM instead of
variational inference, a hand-rolled Newton solver instead of IRLS, direct
summation instead of vectorized table algebra.  Oracles intentionally do not
import the code paths they check.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate


# ---------------------------------------------------------------------------
# Privacy accounting oracles


def rdp_sgm_quadrature(sigma: float, q: float, alpha: float) -> float:
    """Renyi divergence of one Poisson-subsampled Gaussian step, by quadrature.

    Integrates the alpha-th moment of the likelihood ratio between N(0, s^2)
    and the mixture (1-q) N(0, s^2) + q N(1, s^2) over the privacy-loss
    distribution, instead of expanding it as a binomial series.  The moment
    can exceed float range, so the integral is evaluated in log space with a
    peak shift.
    """
    if q == 1.0:
        return alpha / (2.0 * sigma**2)

    def log_integrand(x: np.ndarray) -> np.ndarray:
        log_base = -x * x / (2.0 * sigma**2) - math.log(sigma * math.sqrt(2.0 * math.pi))
        log_ratio = np.logaddexp(
            math.log1p(-q), math.log(q) + (2.0 * x - 1.0) / (2.0 * sigma**2)
        )
        return log_base + alpha * log_ratio

    lo = -40.0 * sigma
    hi = alpha + 40.0 * sigma
    grid = np.linspace(lo, hi, 20001)
    peak = float(np.max(log_integrand(grid)))

    shifted, _ = integrate.quad(
        lambda x: math.exp(float(log_integrand(np.array(x))) - peak), lo, hi, limit=500
    )
    log_moment = math.log(shifted) + peak
    return log_moment / (alpha - 1.0)


def epsilon_oracle(sigma: float, q: float, steps: int, delta: float) -> float:
    """(epsilon, delta) conversion of the composed RDP curve, quadrature route.

    Uses a dense order grid independent of the library's.
    """
    orders = np.concatenate(
        [np.linspace(1.05, 2.0, 20), np.arange(2.25, 80.0, 0.25), np.arange(80, 600, 5.0)]
    )
    best = math.inf
    for alpha in orders:
        rdp = steps * rdp_sgm_quadrature(sigma, q, float(alpha))
        best = min(best, rdp + math.log(1.0 / delta) / (alpha - 1.0))
    return best


def gaussian_delta_root_sigma(epsilon: float, delta: float, sensitivity: float) -> float:
    """Smallest sigma whose exact Gaussian-mechanism delta meets the target.

    Root-find on the tail-bound characterization; independent of the closed
    form used by the library.
    """

    def exact_delta(sig: float) -> float:
        a = sensitivity / (2 * sig) - epsilon * sig / sensitivity
        b = -sensitivity / (2 * sig) - epsilon * sig / sensitivity
        phi = lambda v: 0.5 * math.erfc(-v / math.sqrt(2))
        return phi(a) - math.exp(epsilon) * phi(b)

    lo, hi = 1e-6 * sensitivity, 1e6 * sensitivity
    for _ in range(200):
        mid = math.sqrt(lo * hi)
        if exact_delta(mid) > delta:
            lo = mid
        else:
            hi = mid
    return hi


# ---------------------------------------------------------------------------
# Mixture / inference oracles


def em_bernoulli_mixture(
    x: np.ndarray, n_components: int, seed: int = 0, iters: int = 500
) -> tuple[np.ndarray, np.ndarray]:
    """EM for a mixture of independent Bernoulli features.

    Returns (weights (K,), p (K, D)).
    """
    rng = np.random.default_rng(seed)
    n, d = x.shape
    p = rng.uniform(0.25, 0.75, size=(n_components, d))
    w = np.full(n_components, 1.0 / n_components)
    for _ in range(iters):
        log_p = x @ np.log(p).T + (1 - x) @ np.log(1 - p).T + np.log(w)[None, :]
        log_norm = np.logaddexp.reduce(log_p, axis=1, keepdims=True)
        resp = np.exp(log_p - log_norm)
        nk = resp.sum(axis=0)
        w = nk / n
        p = (resp.T @ x + 1e-9) / (nk[:, None] + 2e-9)
        p = np.clip(p, 1e-6, 1 - 1e-6)
    return w, p


def gauss_hermite_expectation(fn, mean: float, std: float, points: int = 200) -> float:
    """E[fn(u)] for u ~ N(mean, std^2) by Gauss-Hermite quadrature."""
    nodes, weights = np.polynomial.hermite_e.hermegauss(points)
    u = mean + std * nodes
    return float(np.sum(weights * np.array([fn(v) for v in u])) / math.sqrt(2 * math.pi))


# ---------------------------------------------------------------------------
# GLM oracle


def newton_glm(
    x: np.ndarray,
    y: np.ndarray,
    family: str,
    offset: np.ndarray | None = None,
    tol: float = 1e-12,
    max_iter: int = 200,
) -> np.ndarray:
    """Hand-rolled Newton-Raphson on the GLM log-likelihood.

    Gradient and Hessian are assembled with explicit einsums rather than the
    weighted-least-squares arrangement.
    """
    n, p = x.shape
    off = np.zeros(n) if offset is None else offset
    beta = np.zeros(p)
    for _ in range(max_iter):
        eta = x @ beta + off
        if family == "poisson":
            mu = np.exp(eta)
            w = mu
        elif family == "logistic":
            mu = 1.0 / (1.0 + np.exp(-eta))
            w = mu * (1 - mu)
        else:
            raise ValueError(family)
        grad = np.einsum("ij,i->j", x, y - mu)
        hess = np.einsum("ij,i,ik->jk", x, w, x)
        step = np.linalg.solve(hess, grad)
        beta = beta + step
        if np.max(np.abs(step)) < tol:
            break
    return beta


# ---------------------------------------------------------------------------
# Information-theory oracles


def mi_direct(a: np.ndarray, b_cols: list[np.ndarray]) -> float:
    """Mutual information in bits by direct summation over observed cells."""
    n = a.shape[0]
    joint: dict = {}
    for i in range(n):
        key = (int(a[i]), tuple(int(c[i]) for c in b_cols))
        joint[key] = joint.get(key, 0) + 1
    pa: dict = {}
    pb: dict = {}
    for (va, vb), c in joint.items():
        pa[va] = pa.get(va, 0) + c
        pb[vb] = pb.get(vb, 0) + c
    total = 0.0
    for (va, vb), c in joint.items():
        pj = c / n
        total += pj * math.log2(pj / ((pa[va] / n) * (pb[vb] / n)))
    return total


def empirical_joint(columns: list[np.ndarray], cards: list[int]) -> np.ndarray:
    """Exact joint pmf over the full category product, by enumeration."""
    n = columns[0].shape[0]
    joint = np.zeros(cards)
    for i in range(n):
        joint[tuple(int(c[i]) for c in columns)] += 1
    return joint / n


def tv_distance(p: np.ndarray, q: np.ndarray) -> float:
    return 0.5 * float(np.abs(p - q).sum())
