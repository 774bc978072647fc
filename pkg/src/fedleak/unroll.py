"""Unrolled feed-forward networks fitted to attack trajectories.

Each recorded attack run x'_0 -> x'_1 -> ... -> x'_I is resampled to H+1
checkpoints. Layer h is an affine map trained greedily on the pairs
(c_{h-1}, c_h); a clip to [0,1] follows every layer except the last.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DivergenceError, EstimationError

log = logging.getLogger(__name__)


@dataclass
class UnrolledNet:
    layers: list  # [(M_h (d, d), b_h (d,))]
    fit_mse: list = field(default_factory=list)
    clip_last: bool = False
    chain_mse: float = float("nan")  # mean ||forward(c_0) - c_H||^2 over the training chains

    @property
    def H(self):
        return len(self.layers)

    @property
    def d(self):
        return self.layers[0][0].shape[1]

    @property
    def avg_fit_mse(self):
        return float(np.mean(self.fit_mse)) if self.fit_mse else float("nan")

    def forward_batch(self, X):
        X = np.asarray(X, dtype=np.float64)
        for h, (M, b) in enumerate(self.layers):
            X = X @ M.T + b
            if h < self.H - 1 or self.clip_last:
                X = np.clip(X, 0.0, 1.0)
        return X

    def forward(self, x0):
        return self.forward_batch(np.asarray(x0)[None, :])[0]

    def save(self, path):
        """Row-major M_h then b_h for every layer, float64 little-endian, plus a JSON manifest."""
        path = Path(path)
        flat = np.concatenate([np.concatenate([M.ravel(), b]) for M, b in self.layers])
        flat.astype("<f8").tofile(path.with_suffix(".bin"))
        path.with_suffix(".json").write_text(
            json.dumps({"H": self.H, "d": self.d, "fit_mse": [float(v) for v in self.fit_mse],
                        "clip_last": self.clip_last})
        )

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        H, d = meta["H"], meta["d"]
        flat = np.fromfile(path.with_suffix(".bin"), dtype="<f8").reshape(H, d * d + d)
        layers = [(row[: d * d].reshape(d, d).copy(), row[d * d:].copy()) for row in flat]
        return cls(layers, list(meta["fit_mse"]), meta.get("clip_last", False))


def _chains(traj):
    ck = np.asarray(traj.checkpoints)
    if ck.ndim == 2:
        return [ck]
    return [ck[:, j, :] for j in range(ck.shape[1])]


def collect(trajectories, H):
    """Per-layer training pairs [(inputs (n, d), targets (n, d))] for h = 1..H.

    Checkpoints are picked at iterations round(h * I / H); a batch trajectory
    contributes one chain per image.
    """
    ins = [[] for _ in range(H)]
    outs = [[] for _ in range(H)]
    used = 0
    for traj in trajectories:
        steps = np.asarray(traj.steps)
        if len(steps) < H + 1:
            log.warning("trajectory with %d checkpoints is shorter than H+1=%d; skipped", len(steps), H + 1)
            continue
        want = np.rint(np.arange(H + 1) * steps[-1] / H)
        pos = np.searchsorted(steps, want)
        pos = np.clip(pos, 0, len(steps) - 1)
        # nearest recorded step when the exact iteration was not stored
        lower = np.clip(pos - 1, 0, len(steps) - 1)
        pos = np.where(np.abs(steps[lower] - want) < np.abs(steps[pos] - want), lower, pos)
        for chain in _chains(traj):
            c = chain[pos]
            for h in range(H):
                ins[h].append(c[h])
                outs[h].append(c[h + 1])
        used += 1
    if used == 0:
        raise EstimationError("no trajectory long enough to unroll")
    return [(np.array(a), np.array(c)) for a, c in zip(ins, outs)]


def _lstsq_start(A, C):
    """Minimum-norm affine least-squares map, used when the identity start sits in the clip's flat region."""
    Aa = np.hstack([A, np.ones((len(A), 1))])
    sol = np.linalg.lstsq(Aa, C, rcond=None)[0]
    return sol[:-1].T.copy(), sol[-1].copy()


def _fit_layer(A, C, clip, epochs, lr, ridge, init="identity"):
    n, d = A.shape
    if lr is None:
        # 1 / smoothness of the unclipped least-squares objective
        Aa = np.hstack([A, np.ones((n, 1))])
        top = np.linalg.eigvalsh(Aa.T @ Aa / n)[-1]
        lr = 1.0 / (2.0 * top + 2.0 * ridge)
    for attempt in range(6):
        if init == "lstsq":
            M, b = _lstsq_start(A, C)
        else:
            M, b = np.eye(d), np.zeros(d)
        ok = True
        for _ in range(epochs):
            pre = A @ M.T + b
            if clip:
                out = np.clip(pre, 0.0, 1.0)
                Err = (out - C) * ((pre > 0.0) & (pre < 1.0))
            else:
                Err = pre - C
            gM = (2.0 / n) * (Err.T @ A) + 2.0 * ridge * M
            gb = (2.0 / n) * Err.sum(axis=0)
            M -= lr * gM
            b -= lr * gb
            if not np.all(np.isfinite(M)):
                ok = False
                break
        if ok:
            out = A @ M.T + b
            if clip:
                out = np.clip(out, 0.0, 1.0)
            mse = float(np.mean(np.sum((out - C) ** 2, axis=1)))
            if np.isfinite(mse):
                return M, b, mse
        lr *= 0.5
        log.warning("unrolled layer fit diverged; retrying with lr=%g", lr)
    raise DivergenceError("unrolled layer fit diverged after 5 learning-rate reductions")


def fit(pairs, H=None, epochs=50, lr=None, seed=0, ridge=1e-6, clip_last=False, init="identity"):
    """Greedy layer-wise fit; layer h is frozen once trained.

    Every layer starts at the identity map and runs full-batch gradient
    descent on mean ||clip(M a + b) - c||^2 + ridge * ||M||_F^2. The last
    layer has no clip unless `clip_last`. With init="lstsq" every layer
    starts from the minimum-norm affine least-squares map instead. `seed` is
    accepted for interface symmetry; the fit is deterministic.
    """
    H = len(pairs) if H is None else H
    if H < 1 or len(pairs) < H or any(len(a) == 0 for a, _ in pairs[:H]):
        raise EstimationError("need nonempty training pairs for every layer")
    layers, mses = [], []
    for h in range(H):
        A, C = pairs[h]
        M, b, mse = _fit_layer(A, C, clip=h < H - 1 or clip_last, epochs=epochs, lr=lr, ridge=ridge,
                                 init=init)
        layers.append((M, b))
        mses.append(mse)
    net = UnrolledNet(layers, mses, clip_last)
    if len(pairs[0][0]) == len(pairs[H - 1][1]):
        net.chain_mse = float(np.mean(np.sum((net.forward_batch(pairs[0][0]) - pairs[H - 1][1]) ** 2, axis=1)))
    return net
