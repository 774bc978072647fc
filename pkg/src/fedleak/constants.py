"""Constants consumed by the FedAvg convergence bounds: L, mu, sigma_k, G, Gamma, B, C, gamma."""

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.optimize import minimize

from . import model as M
from .errors import ConvergenceError, DegenerateProblemError, PartitionError
from .lipschitz import spectral_norm


@dataclass
class ConvergenceConstants:
    L: float
    mu: float
    sigma: np.ndarray = None
    G: float = None
    Gamma: float = None
    B: float = None
    C: float = 0.0
    gamma_lr: float = None
    p: np.ndarray = None
    E: int = None
    K: int = None
    participation: str = "full"

    def __post_init__(self):
        if self.gamma_lr is None:
            self.gamma_lr = schedule_offset(self.L, self.mu, self.E or 1)

    def to_dict(self):
        out = asdict(self)
        for key in ("sigma", "p"):
            if out[key] is not None:
                out[key] = [float(v) for v in np.asarray(out[key])]
        return out

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("sigma", "p"):
            if d.get(key) is not None:
                d[key] = np.asarray(d[key], dtype=np.float64)
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict())


def schedule_offset(L, mu, E):
    return max(8.0 * L / mu, float(E))


def _shards(ds, partition):
    if any(len(ix) == 0 for ix in partition.device_indices):
        raise PartitionError("a device holds no samples")
    return [partition.shard(ds, k) for k in range(partition.n_devices)]


def patch_gram(spec, X):
    """(1/n) sum_j sum_u patch_u(x_j) patch_u(x_j)^T, shape (patch_dim, patch_dim)."""
    P = X[:, spec._patch_index]  # (n, U, k)
    P = P.reshape(-1, P.shape[-1])
    return P.T @ P / len(X)


def smoothness(spec, partition, data):
    shards = _shards(data, partition)
    if spec.kind == "logreg":
        factor = 0.25 if spec.binary else 0.5
        per = [factor * float(np.mean(np.sum(s.samples**2, axis=1))) for s in shards]
        return max(per) + 2.0 * spec.reg_gamma
    return max(spectral_norm(patch_gram(spec, s.samples)) for s in shards)


def strong_convexity(spec, partition, data):
    if spec.kind == "logreg":
        return spec.reg_gamma
    shards = _shards(data, partition)
    mu = min(float(np.linalg.eigvalsh(patch_gram(spec, s.samples))[0]) for s in shards)
    if mu <= 1e-12:
        raise DegenerateProblemError(f"patch Gram matrix is singular (lambda_min={mu:.3g})")
    return mu


def noise_stats(spec, w, X, T):
    """(max_j ||g_j - mean g||^2, max_j ||g_j||^2) over the per-sample gradients at w.

    Per-sample gradients are rank-one plus the regulariser, r_j f_j^T + D, so
    both norms are expanded instead of materialising the (n, o, m) stack.
    """
    W = np.asarray(w, dtype=np.float64).reshape(spec.n_out, spec.n_features)
    F = M.features(spec, X)
    Z, P = M._forward(spec, W, F)
    R = M._residual(spec, Z, P, T)
    rf = np.sum(R**2, axis=1) * np.sum(F**2, axis=1)
    Mbar = R.T @ F / len(F)
    D = M.reg_grad(spec, W)
    dev = rf - 2.0 * np.einsum("no,om,nm->n", R, Mbar, F) + np.sum(Mbar**2)
    full = rf + 2.0 * np.einsum("no,om,nm->n", R, D, F) + np.sum(D**2)
    return float(max(np.max(dev), 0.0)), float(np.max(full))


def noise_bounds(spec, partition, data, trace):
    """sigma_k and G maximised over the recorded rounds of a training trace.

    Uses the statistics gathered at the local iterates during training when
    present, otherwise evaluates them at the recorded global snapshots.
    """
    log = getattr(trace, "noise_log", None)
    if log is not None and len(log.get("sigma2", [])):
        s2 = np.asarray(log["sigma2"])
        g2 = np.asarray(log["g2"])
    else:
        if not trace.snapshots:
            raise ValueError("trace has no recorded rounds")
        shards = _shards(data, partition)
        targets = [M.encode_targets(spec, s.labels) for s in shards]
        s2 = np.zeros((len(trace.snapshots), len(shards)))
        g2 = np.zeros_like(s2)
        for i, (_, p) in enumerate(trace.snapshots):
            for k, (s, T) in enumerate(zip(shards, targets)):
                s2[i, k], g2[i, k] = noise_stats(spec, p.w, s.samples, T)
    sigma = np.sqrt(np.nanmax(s2, axis=0))
    return sigma, float(np.sqrt(np.nanmax(g2)))


def minimize_objective(spec, X, T, tol=1e-8, max_iter=100_000, w0=None):
    """Minimum of the regularised mean loss over (X, T) by L-BFGS; returns (w, value)."""
    shape = (spec.n_out, spec.n_features)

    def fun(w):
        W = w.reshape(shape)
        val = float(np.mean(M.sample_losses(spec, W, X, T)) + M.reg_value(spec, W))
        return val, M.mean_grad(spec, W, X, T).ravel()

    w0 = np.zeros(spec.n_params) if w0 is None else np.asarray(w0, dtype=np.float64)
    res = minimize(fun, w0, jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "ftol": tol * 1e-3, "gtol": 1e-10})
    if not res.success and res.nit >= max_iter:
        raise ConvergenceError(f"local solver hit the iteration cap ({max_iter})")
    return res.x, float(res.fun)


def heterogeneity(spec, partition, data, tol=1e-8):
    """Gamma = L* - sum_k p_k L_k*, clamped at zero."""
    shards = _shards(data, partition)
    if len(shards) == 1:
        return 0.0
    p = partition.weights
    Xs = [s.samples for s in shards]
    Ts = [M.encode_targets(spec, s.labels) for s in shards]
    X_all = np.concatenate(Xs)
    T_all = np.concatenate(Ts)
    # p_k = n_k / n, so the weighted global objective is the pooled mean
    _, L_star = minimize_objective(spec, X_all, T_all, tol=tol)
    local = [minimize_objective(spec, X, T, tol=tol)[1] for X, T in zip(Xs, Ts)]
    return max(0.0, L_star - float(np.dot(p, local)))


def compose(L, mu, sigma, G, Gamma, p, E, K=None, participation="full"):
    sigma = np.asarray(sigma, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    B = float(np.sum(p**2 * sigma**2) + 6.0 * L * Gamma + 8.0 * (E - 1) ** 2 * G**2)
    if participation == "full":
        C = 0.0
        K = len(p) if K is None else K
    else:
        C = 4.0 / K * E**2 * G**2
    gamma_lr = schedule_offset(L, mu, E)
    eta1 = 2.0 / (mu * (gamma_lr + 1.0))
    assert eta1 <= 1.0 / (4.0 * L) * (1 + 1e-12), "schedule offset violates eta_1 <= 1/(4L)"
    return ConvergenceConstants(L=float(L), mu=float(mu), sigma=sigma, G=float(G), Gamma=float(Gamma),
                                B=B, C=C, gamma_lr=gamma_lr, p=p, E=int(E), K=int(K),
                                participation=participation)


def check_schedule(constants, horizon):
    """Assert eta_t is non-increasing and eta_t <= 2 eta_{t+E} for t = 1..horizon."""
    E = constants.E or 1
    t = np.arange(1, horizon + 1, dtype=np.float64)
    eta = 2.0 / (constants.mu * (constants.gamma_lr + t))
    eta_e = 2.0 / (constants.mu * (constants.gamma_lr + t + E))
    assert np.all(np.diff(eta) <= 0)
    assert np.all(eta <= 2.0 * eta_e)
