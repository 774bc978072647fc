"""Small generator used by the GGL attack: latent z -> image in [0,1]^d."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DivergenceError
from .rng import child_rng


@dataclass
class GGLDecoder:
    W1: np.ndarray  # (h, u)
    b1: np.ndarray
    W2: np.ndarray  # (d, h)
    b2: np.ndarray

    @property
    def latent_dim(self):
        return self.W1.shape[1]

    @property
    def d(self):
        return self.W2.shape[0]

    def _pre(self, Z):
        H1 = Z @ self.W1.T + self.b1
        A1 = np.maximum(H1, 0.0)
        return H1, A1, A1 @ self.W2.T + self.b2

    def decode(self, Z):
        """Z (..., u) -> images (..., d), clipped to [0,1]."""
        Z = np.asarray(Z, dtype=np.float64)
        _, _, out = self._pre(Z)
        return np.clip(out, 0.0, 1.0)

    def decode_with_vjp(self, Z):
        """Images and a function mapping dL/dx to dL/dz (clip subgradient 1 inside (0,1))."""
        H1, _, pre = self._pre(Z)
        X = np.clip(pre, 0.0, 1.0)

        def vjp(dX):
            dpre = dX * ((pre > 0.0) & (pre < 1.0))
            dH1 = (dpre @ self.W2) * (H1 > 0.0)
            return dH1 @ self.W1

        return X, vjp

    def save(self, path):
        path = Path(path)
        np.savez(path.with_suffix(".npz"), W1=self.W1, b1=self.b1, W2=self.W2, b2=self.b2)

    @classmethod
    def load(cls, path):
        z = np.load(Path(path).with_suffix(".npz"))
        return cls(z["W1"], z["b1"], z["W2"], z["b2"])


def train_ggl_decoder(data, latent_dim=32, epochs=30, seed=0, hidden=256, lr=0.5,
                      momentum=0.9, batch_size=32, history=None):
    """Train a linear-encoder / relu-decoder autoencoder by SGD on reconstruction MSE.

    Only the decoder is returned. Its first layer absorbs the empirical mean and
    scale of the training codes so that standard-normal latents decode to
    images near the data manifold.
    """
    X = np.asarray(data.samples, dtype=np.float64)
    n, d = X.shape
    if n == 0:
        raise ValueError("empty dataset")
    rng = child_rng(seed, "ggl-decoder")
    u, h = latent_dim, hidden
    We = rng.standard_normal((u, d)) / np.sqrt(d)
    be = np.zeros(u)
    W1 = rng.standard_normal((h, u)) * np.sqrt(2.0 / u)
    b1 = np.zeros(h)
    W2 = rng.standard_normal((d, h)) * 0.01 / np.sqrt(h)
    b2 = np.clip(X.mean(axis=0), 0.01, 0.99)
    params = [We, be, W1, b1, W2, b2]
    vel = [np.zeros_like(p) for p in params]
    for ep in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, batch_size):
            xb = X[order[s:s + batch_size]]
            m = len(xb)
            Z = xb @ We.T + be
            H1 = Z @ W1.T + b1
            A1 = np.maximum(H1, 0.0)
            pre = A1 @ W2.T + b2
            out = np.clip(pre, 0.0, 1.0)
            err = out - xb
            total += float(np.sum(err**2))
            dpre = (2.0 / (m * d)) * err * ((pre > 0.0) & (pre < 1.0))
            gW2 = dpre.T @ A1
            gb2 = dpre.sum(axis=0)
            dH1 = (dpre @ W2) * (H1 > 0.0)
            gW1 = dH1.T @ Z
            gb1 = dH1.sum(axis=0)
            dZ = dH1 @ W1
            gWe = dZ.T @ xb
            gbe = dZ.sum(axis=0)
            for p, v, g in zip(params, vel, [gWe, gbe, gW1, gb1, gW2, gb2]):
                v *= momentum
                v -= lr * g
                p += v
        mse = total / (n * d)
        if not np.isfinite(mse):
            raise DivergenceError(f"decoder training diverged at epoch {ep + 1}")
        if history is not None:
            history.append(mse)
    codes = X @ We.T + be
    mean = codes.mean(axis=0)
    scale = codes.std(axis=0) + 1e-12
    return GGLDecoder(W1 * scale, b1 + W1 @ mean, W2, b2)
