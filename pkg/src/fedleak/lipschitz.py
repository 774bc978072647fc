"""Spectral norms by power iteration and the AutoLip bound for affine/clip chains."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LipschitzEstimate:
    upper: float
    per_layer: np.ndarray
    empirical_lower: float

    def to_dict(self):
        return {
            "upper": self.upper,
            "per_layer": [float(v) for v in self.per_layer],
            "empirical_lower": self.empirical_lower,
        }


def spectral_norm(M, iters=1000, seed=0, tol=1e-12, restarts=3):
    """Largest singular value of M by power iteration on M^T M.

    Each step applies the gradient of 0.5*||M v||^2 (i.e. M^T M v) and
    renormalises; the estimate is ||M v||. `restarts` random starts run as
    one block and the largest estimate is returned, so an unlucky start
    cannot under-estimate. Iteration stops early once every estimate changes
    by less than `tol` relative.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2:
        raise ValueError("spectral_norm expects a matrix")
    if not np.any(M):
        return 0.0
    rng = np.random.default_rng(seed)
    n = M.shape[1]
    gram = M.T @ M
    V = rng.standard_normal((n, restarts))
    V /= np.linalg.norm(V, axis=0)
    est = np.zeros(restarts)
    for _ in range(iters):
        U = gram @ V
        # ||M v||^2 = v^T M^T M v comes for free from the product
        new = np.sqrt(np.maximum(np.sum(V * U, axis=0), 0.0))
        lam = np.linalg.norm(U, axis=0)
        dead = lam == 0.0
        if np.any(dead):
            # start landed in the null space
            U[:, dead] = rng.standard_normal((n, int(dead.sum())))
            lam[dead] = np.linalg.norm(U[:, dead], axis=0)
        V = U / lam
        done = np.all(np.abs(new - est) <= tol * new)
        est = np.maximum(est, new)
        if done:
            break
    est = np.maximum(est, np.linalg.norm(M @ V, axis=0))
    return float(est.max())


def empirical_lipschitz(f, d, n_pairs=10_000, seed=0, chunk=2_000):
    """max ||f(u) - f(v)|| / ||u - v|| over random pairs in [0,1]^d; a lower bound on L_f."""
    rng = np.random.default_rng(seed)
    best = 0.0
    done = 0
    while done < n_pairs:
        m = min(chunk, n_pairs - done)
        u = rng.uniform(size=(m, d))
        v = rng.uniform(size=(m, d))
        num = np.linalg.norm(f(u) - f(v), axis=1)
        den = np.linalg.norm(u - v, axis=1)
        best = max(best, float(np.max(num / den)))
        done += m
    return best


def autolip_chain(net, n_pairs=10_000, seed=0):
    """AutoLip for a feed-forward chain with 1-Lipschitz activations.

    The upper bound is the product of the layers' spectral norms; the
    empirical lower bound comes from random input pairs.
    """
    if not net.layers:
        raise ValueError("network has no layers")
    per_layer = np.array([spectral_norm(M, seed=seed + h) for h, (M, _) in enumerate(net.layers)])
    lower = empirical_lipschitz(net.forward_batch, net.d, n_pairs=n_pairs, seed=seed) if n_pairs else 0.0
    return LipschitzEstimate(float(np.prod(per_layer)), per_layer, lower)
