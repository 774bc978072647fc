"""FedAvg with local SGD, full or sampled aggregation, and a recorded training trace."""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .constants import noise_stats
from .errors import ConvergenceError, DivergenceError
from .model import ModelSpec, Params
from .rng import child_rng

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FedConfig:
    N: int = 10
    K: int = None  # None -> N
    E: int = 2
    T: int = 100
    participation: str = "full"  # "full" | "partial"
    partial_rule: str = "uniform"  # "uniform": (1/K) sum over S_t; "weighted": (N/K) sum p_k w_k
    seed: int = 0
    snapshot_every: int = 1
    noise_every: int = 1  # rounds between gradient-noise recordings (0 disables)

    def __post_init__(self):
        if self.K is None:
            object.__setattr__(self, "K", self.N)
        for name in ("N", "K", "E", "T", "snapshot_every", "noise_every"):
            if not isinstance(getattr(self, name), (int, np.integer)) or isinstance(getattr(self, name), bool):
                raise ValueError(f"{name} must be an integer")
        if not 1 <= self.K <= self.N:
            raise ValueError("need 1 <= K <= N")
        if self.E < 0 or self.T < 1:
            raise ValueError("need E >= 0 and T >= 1")
        if self.participation not in ("full", "partial"):
            raise ValueError(f"unknown participation {self.participation!r}")
        if self.partial_rule not in ("uniform", "weighted"):
            raise ValueError(f"unknown partial rule {self.partial_rule!r}")

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainingTrace:
    spec: ModelSpec
    snapshots: list = field(default_factory=list)  # [(round, Params)]
    loss_curve: np.ndarray = None
    noise_log: dict = field(default_factory=lambda: {"rounds": [], "sigma2": [], "g2": []})
    participants: list = field(default_factory=list)
    w_star: Params = None
    delta1: float = None
    grad_norm_star: float = None

    def snapshot(self, t):
        for r, p in self.snapshots:
            if r == t:
                return p
        raise KeyError(f"no snapshot at round {t}")

    @property
    def rounds(self):
        return [r for r, _ in self.snapshots]

    def set_optimum(self, opt):
        self.w_star = opt.params
        self.grad_norm_star = opt.grad_norm
        w1 = self.snapshots[0][1].w
        self.delta1 = float(np.sum((w1 - opt.params.w) ** 2))

    def save(self, out_dir):
        """JSON manifest, one float64 .bin per snapshot, and loss.csv (t, loss)."""
        out = Path(out_dir)
        (out / "snapshots").mkdir(parents=True, exist_ok=True)
        files = []
        for r, p in self.snapshots:
            name = f"snapshots/round_{r:05d}.bin"
            p.w.astype("<f8").tofile(out / name)
            files.append({"t": r, "file": name})
        if self.w_star is not None:
            self.w_star.w.astype("<f8").tofile(out / "w_star.bin")
        with open(out / "loss.csv", "w", newline="") as f:
            wr = csv.writer(f, lineterminator="\n")
            wr.writerow(["t", "loss"])
            for t, v in enumerate(self.loss_curve, start=1):
                wr.writerow([t, repr(float(v))])
        manifest = {
            "spec": self.spec.to_dict(),
            "snapshots": files,
            "w_star": "w_star.bin" if self.w_star is not None else None,
            "delta1": self.delta1,
            "grad_norm_star": self.grad_norm_star,
            "noise_log": {k: np.asarray(v).tolist() for k, v in self.noise_log.items()},
            "participants": [list(map(int, s)) for s in self.participants],
        }
        (out / "trace.json").write_text(json.dumps(manifest))

    @classmethod
    def load(cls, out_dir):
        out = Path(out_dir)
        meta = json.loads((out / "trace.json").read_text())
        spec = ModelSpec.from_dict(meta["spec"])
        read = lambda name: Params(np.fromfile(out / name, dtype="<f8"), spec)  # noqa: E731
        with open(out / "loss.csv") as f:
            rows = list(csv.DictReader(f))
        trace = cls(spec, [(s["t"], read(s["file"])) for s in meta["snapshots"]],
                    np.array([float(r["loss"]) for r in rows]),
                    meta["noise_log"], meta["participants"])
        if meta["w_star"]:
            trace.w_star = read(meta["w_star"])
        trace.delta1 = meta["delta1"]
        trace.grad_norm_star = meta["grad_norm_star"]
        return trace


@dataclass(frozen=True)
class Optimum:
    params: Params
    loss: float
    grad_norm: float
    iters: int


def lr(t, constants):
    """eta_t = 2 / (mu (gamma + t))."""
    if t < 1:
        raise ValueError("step index starts at 1")
    return 2.0 / (constants.mu * (constants.gamma_lr + t))


def _local_sgd(spec, W, X, T, E, t0, constants, rng, stats=None):
    W = W.copy()
    n = len(X)
    for j in range(1, E + 1):
        if stats is not None:
            s2, g2 = noise_stats(spec, W, X, T)
            stats[0] = max(stats[0], s2)
            stats[1] = max(stats[1], g2)
        i = rng.integers(n)
        g = M.mean_grad(spec, W, X[i:i + 1], T[i:i + 1])
        W -= lr(t0 + j, constants) * g
    return W


def local_update(w, shard, E, t0, constants, rng):
    """E SGD steps on single uniformly drawn samples with step sizes eta_{t0+1..t0+E}."""
    spec = w.spec
    X, y = shard
    X = np.asarray(X, dtype=np.float64)
    T = M._as_targets(spec, y, len(X))
    return Params(_local_sgd(spec, w.W, X, T, E, t0, constants, rng), spec)


def aggregate(models, cfg, weights, rng=None):
    """Full: sum_k p_k w_k. Partial: K devices drawn i.i.d. from p (with replacement)."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(models) != len(weights):
        raise ValueError("one model per device weight required")
    ws = np.array([m.w if isinstance(m, Params) else np.asarray(m, dtype=np.float64) for m in models])
    if cfg.participation == "full":
        out = weights @ ws
    else:
        chosen = rng.choice(len(models), size=cfg.K, replace=True, p=weights)
        out = _partial_mean(ws, chosen, weights, cfg)
    spec = models[0].spec if isinstance(models[0], Params) else None
    return Params(out, spec) if spec is not None else out


def _partial_mean(ws, chosen, weights, cfg):
    if cfg.partial_rule == "uniform":
        return ws[chosen].mean(axis=0)
    return cfg.N / cfg.K * (weights[chosen] @ ws[chosen])


def global_loss(spec, W, X, T):
    return float(np.mean(M.sample_losses(spec, W, X, T)) + M.reg_value(spec, W))


def run(spec, data, partition, cfg, constants, w0=None):
    """Run T FedAvg rounds. Round r uses SGD step indices (r-1)E+1 .. rE."""
    shards = [partition.shard(data, k) for k in range(partition.n_devices)]
    Xs = [s.samples for s in shards]
    Ts = [M.encode_targets(spec, s.labels) for s in shards]
    X_all, T_all = np.concatenate(Xs), np.concatenate(Ts)
    p = partition.weights
    sgd_rngs = [child_rng(cfg.seed, "sgd", k) for k in range(len(shards))]
    part_rng = child_rng(cfg.seed, "participation")
    W = (Params.zeros(spec) if w0 is None else w0).W.copy()
    trace = TrainingTrace(spec, loss_curve=np.zeros(cfg.T))
    for r in range(1, cfg.T + 1):
        t0 = (r - 1) * cfg.E
        record = cfg.noise_every > 0 and ((r - 1) % cfg.noise_every == 0 or r == cfg.T)
        local, s2, g2 = [], [], []
        for k in range(len(shards)):
            stats = [0.0, 0.0] if record else None
            local.append(_local_sgd(spec, W, Xs[k], Ts[k], cfg.E, t0, constants, sgd_rngs[k], stats))
            if record:
                s2.append(stats[0])
                g2.append(stats[1])
        stack = np.array([Wk.ravel() for Wk in local])
        if cfg.participation == "full":
            w = p @ stack
        else:
            chosen = part_rng.choice(len(shards), size=cfg.K, replace=True, p=p)
            trace.participants.append(chosen)
            w = _partial_mean(stack, chosen, p, cfg)
        W = w.reshape(W.shape)
        trace.loss_curve[r - 1] = global_loss(spec, W, X_all, T_all)
        if not np.isfinite(trace.loss_curve[r - 1]):
            raise DivergenceError(f"global loss is not finite at round {r}", round=r)
        if record and cfg.E > 0:
            trace.noise_log["rounds"].append(r)
            trace.noise_log["sigma2"].append(s2)
            trace.noise_log["g2"].append(g2)
        if r == 1 or r % cfg.snapshot_every == 0 or r == cfg.T:
            trace.snapshots.append((r, Params(W.ravel(), spec)))
    return trace


def solve_optimum(spec, data, partition, constants=None, tol=1e-5, max_iter=1_000_000, w0=None):
    """Full-batch gradient descent with backtracking on the global objective.

    Stops at the first iterate whose loss differs from the previous one by
    less than `tol`.
    """
    idx = np.concatenate(partition.device_indices)
    X = data.samples[idx]
    T = M.encode_targets(spec, data.labels[idx])
    W = np.zeros((spec.n_out, spec.n_features)) if w0 is None else w0.W.copy()
    if constants is not None:
        step = 1.0 / constants.L
    else:
        step = 1.0 / max(1.0, float(np.mean(np.sum(M.features(spec, X) ** 2, axis=1))))
    f = global_loss(spec, W, X, T)
    for it in range(1, max_iter + 1):
        g = M.mean_grad(spec, W, X, T)
        gg = float(np.sum(g * g))
        if gg == 0.0:
            return Optimum(Params(W.ravel(), spec), f, 0.0, it - 1)
        while True:
            Wn = W - step * g
            fn = global_loss(spec, Wn, X, T)
            if fn <= f - 0.5 * step * gg or step < 1e-20:
                break
            step *= 0.5
        done = abs(f - fn) < tol
        W, f = Wn, fn
        if done:
            gn = float(np.linalg.norm(M.mean_grad(spec, W, X, T)))
            return Optimum(Params(W.ravel(), spec), f, gn, it)
        step *= 2.0
    raise ConvergenceError(f"optimum not reached within {max_iter} iterations")
