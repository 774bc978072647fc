"""Convex models with analytic loss, parameter gradient and mixed second derivative.

Two kinds are supported:

* ``logreg``: l2-regularised logistic regression. Two classes use a single
  sigmoid weight vector; more classes use a softmax over C weight rows.
* ``linconvnet``: the convex two-layer linear convolutional network,
  ``f(x) = sum_u <patch_u(x), w_u>`` with squared loss. Two classes are encoded
  as a single head with targets in {-1, +1}; more classes run one regression
  head per class against one-hot targets.

Every model reduces to ``z = W @ phi(x)`` where ``phi`` is the identity
(logreg) or patch extraction (linconvnet) and ``W`` has one row per output.
Losses are batch means.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, log_softmax, softmax

KINDS = ("logreg", "linconvnet")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    d: int
    n_classes: int
    reg_gamma: float = 0.1
    image_shape: tuple = ()
    patch: tuple = (4, 4, 4)  # (k_h, k_w, stride)
    _patch_index: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        shape = tuple(self.image_shape) or (self.d,)
        if int(np.prod(shape)) != self.d:
            raise ValueError(f"image_shape {shape} does not match d={self.d}")
        object.__setattr__(self, "image_shape", shape)
        if self.kind == "logreg" and self.reg_gamma <= 0:
            raise ValueError("logreg needs reg_gamma > 0 for strong convexity")
        if self.kind == "linconvnet":
            object.__setattr__(self, "_patch_index", _patch_index(shape, self.patch))

    @property
    def binary(self):
        return self.n_classes == 2

    @property
    def n_out(self):
        return 1 if self.binary else self.n_classes

    @property
    def n_features(self):
        if self.kind == "logreg":
            return self.d
        return self._patch_index.size

    @property
    def n_patches(self):
        return self._patch_index.shape[0]

    @property
    def patch_dim(self):
        return self._patch_index.shape[1]

    @property
    def n_params(self):
        return self.n_out * self.n_features

    def to_dict(self):
        return {
            "kind": self.kind,
            "d": self.d,
            "n_classes": self.n_classes,
            "reg_gamma": self.reg_gamma,
            "image_shape": list(self.image_shape),
            "patch": list(self.patch),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            kind=d["kind"],
            d=int(d["d"]),
            n_classes=int(d["n_classes"]),
            reg_gamma=float(d.get("reg_gamma", 0.1)),
            image_shape=tuple(d.get("image_shape", ())),
            patch=tuple(d.get("patch", (4, 4, 4))),
        )


def _patch_index(shape, patch):
    """Flat pixel indices of every patch, shape (U, channels * k_h * k_w)."""
    if len(shape) == 1:
        shape = (1, 1, shape[0])
    elif len(shape) == 2:
        shape = (1,) + tuple(shape)
    ch, h, w = shape
    kh, kw, s = patch
    if kh > h or kw > w or (h - kh) % s or (w - kw) % s:
        raise ValueError(f"{kh}x{kw} patches with stride {s} do not tile a {h}x{w} grid")
    grid = np.arange(ch * h * w).reshape(ch, h, w)
    rows = []
    for i in range(0, h - kh + 1, s):
        for j in range(0, w - kw + 1, s):
            rows.append(grid[:, i:i + kh, j:j + kw].ravel())
    return np.array(rows)


@dataclass(frozen=True)
class Params:
    w: np.ndarray
    spec: ModelSpec

    def __post_init__(self):
        w = np.array(self.w, dtype=np.float64).ravel()
        if w.size != self.spec.n_params:
            raise ValueError(f"expected {self.spec.n_params} parameters, got {w.size}")
        w.flags.writeable = False
        object.__setattr__(self, "w", w)

    @property
    def W(self):
        return self.w.reshape(self.spec.n_out, self.spec.n_features)

    @classmethod
    def zeros(cls, spec):
        return cls(np.zeros(spec.n_params), spec)


def save_params(params, path):
    """Flat little-endian float64 array plus a JSON sidecar holding the ModelSpec."""
    path = Path(path)
    params.w.astype("<f8").tofile(path.with_suffix(".bin"))
    path.with_suffix(".json").write_text(json.dumps({"spec": params.spec.to_dict(), "n_params": params.spec.n_params}))


def load_params(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    spec = ModelSpec.from_dict(meta["spec"])
    return Params(np.fromfile(path.with_suffix(".bin"), dtype="<f8"), spec)


# ---------------------------------------------------------------- patches


def extract_patches(spec, x):
    """Rows are the flattened patches of a single input, shape (U, patch_dim)."""
    x = np.asarray(x, dtype=np.float64)
    if spec.kind != "linconvnet":
        raise ValueError("patch extraction needs a linconvnet spec")
    if x.shape != (spec.d,):
        raise ValueError(f"expected input of length {spec.d}")
    return x[spec._patch_index]


def patches_adjoint(spec, M):
    """Adjoint of extract_patches: scatter-add patch rows back onto the pixel grid."""
    M = np.asarray(M, dtype=np.float64)
    if M.shape != spec._patch_index.shape:
        raise ValueError(f"expected patch matrix of shape {spec._patch_index.shape}")
    out = np.zeros(spec.d)
    np.add.at(out, spec._patch_index.ravel(), M.ravel())
    return out


def features(spec, X):
    """phi applied row-wise: (n, d) -> (n, n_features)."""
    if spec.kind == "logreg":
        return X
    return X[:, spec._patch_index.ravel()]


def features_adjoint(spec, F):
    """Adjoint of `features` row-wise: (n, n_features) -> (n, d)."""
    if spec.kind == "logreg":
        return F
    idx = spec._patch_index.ravel()
    if np.unique(idx).size == idx.size:
        out = np.empty((F.shape[0], spec.d))
        out[:, idx] = F
        return out
    out = np.zeros((F.shape[0], spec.d))
    for col, pix in enumerate(idx):
        out[:, pix] += F[:, col]
    return out


# ---------------------------------------------------------------- targets


def encode_targets(spec, labels):
    """Integer class labels -> target matrix (n, n_out) used by the loss."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.min() < 0 or labels.max() >= spec.n_classes:
        raise ValueError("label out of range")
    if spec.binary:
        t = labels.astype(np.float64)
        if spec.kind == "linconvnet":
            t = 2.0 * t - 1.0  # {0,1} -> {-1,+1}
        return t[:, None]
    return np.eye(spec.n_classes)[labels]


def _as_targets(spec, y, n):
    y = np.asarray(y)
    if y.dtype.kind in "iu":
        return encode_targets(spec, np.broadcast_to(y, (n,)))
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1 and spec.n_out == 1:
        y = y[:, None]
    if y.ndim == 1:
        y = y[None, :]
    return np.broadcast_to(y, (n, spec.n_out))


def _check(spec, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != spec.d:
        raise ValueError(f"input dimension {X.shape[1]} does not match model d={spec.d}")
    return X


# ---------------------------------------------------------------- core math


def _forward(spec, W, F):
    """Logits and residual r = dloss/dz for features F (n, m)."""
    Z = F @ W.T
    if spec.kind == "linconvnet":
        return Z, None
    if spec.binary:
        return Z, expit(Z)
    return Z, softmax(Z, axis=1)


def _residual(spec, Z, P, T):
    if spec.kind == "linconvnet":
        return Z - T
    return P - T


def sample_losses(spec, W, X, T):
    """Per-sample data loss (no regulariser), shape (n,)."""
    F = features(spec, X)
    Z, _ = _forward(spec, W, F)
    if spec.kind == "linconvnet":
        return 0.5 * np.sum((Z - T) ** 2, axis=1)
    if spec.binary:
        z = Z[:, 0]
        return np.logaddexp(0.0, z) - T[:, 0] * z
    return -np.sum(T * log_softmax(Z, axis=1), axis=1)


def reg_value(spec, W):
    if spec.kind == "logreg":
        return spec.reg_gamma * float(np.sum(W * W))
    return 0.0


def reg_grad(spec, W):
    if spec.kind == "logreg":
        return 2.0 * spec.reg_gamma * W
    return np.zeros_like(W)


def sample_grads(spec, W, X, T):
    """Per-sample gradients including the regulariser, shape (n, n_out, m)."""
    F = features(spec, X)
    Z, P = _forward(spec, W, F)
    R = _residual(spec, Z, P, T)
    return R[:, :, None] * F[:, None, :] + reg_grad(spec, W)[None]


def mean_grad(spec, W, X, T):
    F = features(spec, X)
    Z, P = _forward(spec, W, F)
    R = _residual(spec, Z, P, T)
    return R.T @ F / len(F) + reg_grad(spec, W)


def _jr_apply(spec, P, A):
    """Apply dr/dz (per sample) to A (n, n_out)."""
    if spec.kind == "linconvnet":
        return A
    if spec.binary:
        return P * (1.0 - P) * A
    return P * A - P * np.sum(P * A, axis=1, keepdims=True)


def mixed_vjp_rows(spec, W, X, T, V):
    """grad_x <g_w(x_j, t_j), V_j> for each row j.

    V is (n_out, m) shared by all rows or (n, n_out, m) per row. Returns (n, d).
    """
    F = features(spec, X)
    Z, P = _forward(spec, W, F)
    R = _residual(spec, Z, P, T)
    if V.ndim == 2:
        A = F @ V.T
        G = _jr_apply(spec, P, A) @ W + R @ V
    else:
        A = np.einsum("nm,nom->no", F, V)
        G = _jr_apply(spec, P, A) @ W + np.einsum("no,nom->nm", R, V)
    return features_adjoint(spec, G)


def target_vjp_rows(spec, W, X, V):
    """d/dT <g_w(x_j, T_j), V_j>, shape (n, n_out); the gradient is linear in T."""
    F = features(spec, X)
    if V.ndim == 2:
        return -(F @ V.T)
    return -np.einsum("nm,nom->no", F, V)


# ---------------------------------------------------------------- public ops


def loss(p, batch):
    """Mean loss over a batch (samples, labels), regulariser included."""
    X, y = batch
    X = _check(p.spec, X)
    T = _as_targets(p.spec, y, len(X))
    return float(np.mean(sample_losses(p.spec, p.W, X, T)) + reg_value(p.spec, p.W))


def grad_w(p, batch):
    """Gradient of `loss` w.r.t. the flat parameter vector."""
    X, y = batch
    X = _check(p.spec, X)
    T = _as_targets(p.spec, y, len(X))
    return mean_grad(p.spec, p.W, X, T).ravel()


def mixed_vjp(p, x, y, v):
    """grad_x <g_w(x, y), v> for a single sample x with label (or soft target) y."""
    X = _check(p.spec, x)
    if len(X) != 1:
        raise ValueError("mixed_vjp takes a single sample")
    v = np.asarray(v, dtype=np.float64)
    if v.size != p.spec.n_params:
        raise ValueError(f"v must have {p.spec.n_params} entries")
    T = _as_targets(p.spec, y, 1)
    return mixed_vjp_rows(p.spec, p.W, X, T, v.reshape(p.spec.n_out, p.spec.n_features))[0]


def predict(p, X):
    X = _check(p.spec, X)
    Z = features(p.spec, X) @ p.W.T
    if p.spec.binary:
        return (Z[:, 0] > 0).astype(np.int64)
    return np.argmax(Z, axis=1)


# ---------------------------------------------------------------- stacked ops
# Attack iterates are held as X of shape (R, B, d): R independent restarts (or
# victims), each a batch of B candidate inputs whose mean gradient is matched.


def stacked_forward(spec, W, X, T):
    """Features, residuals and predictions for X (R, B, d) with targets T (R, B, n_out)."""
    R_, B, d = X.shape
    F = features(spec, X.reshape(R_ * B, d))
    Z, P = _forward(spec, W, F)
    Rs = _residual(spec, Z, P, T.reshape(R_ * B, -1))
    m = F.shape[1]
    P = None if P is None else P.reshape(R_, B, -1)
    return F.reshape(R_, B, m), Rs.reshape(R_, B, -1), P


def stacked_grads(spec, W, F, Rs):
    """Batch-mean gradient per restart, regulariser included: (R, n_out, m)."""
    B = F.shape[1]
    return np.einsum("rbo,rbm->rom", Rs, F) / B + reg_grad(spec, W)[None]


def stacked_mixed_vjp(spec, W, F, Rs, P, V):
    """grad_X <g_r, V_r> for every restart r, where g_r is the batch-mean gradient.

    Returns (R, B, d).
    """
    R_, B, m = F.shape
    A = np.einsum("rom,rbm->rbo", V, F)
    Pf = None if P is None else P.reshape(R_ * B, -1)
    JA = _jr_apply(spec, Pf, A.reshape(R_ * B, -1))
    G = JA @ W + np.einsum("rbo,rom->rbm", Rs, V).reshape(R_ * B, m)
    return features_adjoint(spec, G / B).reshape(R_, B, spec.d)


def stacked_target_vjp(F, V):
    """d/dT <g_r, V_r> for every restart r, shape (R, B, n_out)."""
    B = F.shape[1]
    return -np.einsum("rom,rbm->rbo", V, F) / B
