"""Gradient-matching reconstruction attacks and closed-form Robbing.

The four optimisation attacks share one projected-SGD loop over the dummy
input (or, for GGL, the generator latent). All victims and restarts are
stacked into rows and updated together.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq, linear_sum_assignment
from scipy.special import expit, softmax

from . import model as M
from .decoder import GGLDecoder, train_ggl_decoder  # noqa: F401  (re-exported)
from .errors import EstimationError, InferenceError, UnderdeterminedError
from .rng import child_rng

log = logging.getLogger(__name__)

OPT_KINDS = ("dlg", "idlg", "invgrad", "ggl")
KINDS = OPT_KINDS + ("robbing",)
DEFAULT_LAMBDA = {"dlg": 0.0, "idlg": 0.0, "invgrad": 1e-2, "ggl": 1e-1, "robbing": 0.0}
DEFAULT_ETA = {"logreg": 0.1, "linconvnet": 0.01}


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    I: int = 200
    eta: float = None  # None -> model default
    lam: float = None  # None -> kind default
    init_mean: float = 1.0
    init_std: float = 1.0
    restarts: int = 10
    seed: int = 0
    record_every: int = 1
    clip_S: float = None  # GGL defence threshold; None -> ||g_true|| (no-op)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack {self.kind!r}")
        if self.I < 0 or self.restarts < 1 or self.init_std <= 0 or self.record_every < 1:
            raise ValueError("need I >= 0, restarts >= 1, init_std > 0, record_every >= 1")

    def step_size(self, spec):
        return DEFAULT_ETA[spec.kind] if self.eta is None else self.eta

    def weight(self):
        return DEFAULT_LAMBDA[self.kind] if self.lam is None else self.lam

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class Trajectory:
    kind: str
    checkpoints: np.ndarray  # (n_ckpt, d) or (n_ckpt, B, d)
    steps: np.ndarray  # attack iteration of every checkpoint
    target_round: int = None
    restart_id: int = 0
    victim_id: int = 0
    diverged: bool = False

    @property
    def final(self):
        return self.checkpoints[-1]

    def save(self, path):
        path = Path(path)
        self.checkpoints.astype("<f8").tofile(path.with_suffix(".bin"))
        meta = {"kind": self.kind, "t": self.target_round, "restart": self.restart_id,
                "victim": self.victim_id, "diverged": self.diverged,
                "shape": list(self.checkpoints.shape), "steps": [int(s) for s in self.steps]}
        path.with_suffix(".json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        ck = np.fromfile(path.with_suffix(".bin"), dtype="<f8").reshape(meta["shape"])
        return cls(meta["kind"], ck, np.array(meta["steps"]), meta["t"], meta["restart"],
                   meta["victim"], meta["diverged"])


# ---------------------------------------------------------------- pieces


def gml(kind, g_true, g_est):
    """Gradient matching loss and its gradient w.r.t. g_est."""
    g_true = np.asarray(g_true, dtype=np.float64)
    g_est = np.asarray(g_est, dtype=np.float64)
    if g_true.shape != g_est.shape:
        raise ValueError("gradient shapes differ")
    v, dg = _gml_rows(kind, g_true.reshape(1, -1), g_est.reshape(1, -1))
    return float(v[0]), dg[0].reshape(g_est.shape)


def _gml_rows(kind, Gt, Ge):
    """Row-wise GML for flattened gradients (R, n)."""
    if kind == "mse":
        D = Ge - Gt
        return np.sum(D * D, axis=1), 2.0 * D
    if kind != "cosine":
        raise ValueError(f"unknown matching loss {kind!r}")
    nt = np.linalg.norm(Gt, axis=1)
    if np.any(nt == 0):
        raise ValueError("cosine matching needs a nonzero true gradient")
    ne = np.linalg.norm(Ge, axis=1)
    ok = ne >= 1e-12
    ne_safe = np.where(ok, ne, 1.0)
    c = np.sum(Gt * Ge, axis=1) / (nt * ne_safe)
    val = np.where(ok, 1.0 - c, 1.0)
    grad = -(Gt / (nt * ne_safe)[:, None] - (c / ne_safe**2)[:, None] * Ge)
    return val, np.where(ok[:, None], grad, 0.0)


def _grid_shape(d, image_shape):
    shape = tuple(image_shape) if image_shape else ()
    if not shape:
        side = int(round(np.sqrt(d)))
        if side * side != d:
            raise ValueError(f"d={d} is not a square image; pass image_shape")
        shape = (side, side)
    if int(np.prod(shape)) != d:
        raise ValueError("image shape does not match d")
    # a flat feature vector is treated as a single-row image
    return (1,) * (3 - len(shape)) + shape


def reg_tv(x, image_shape=()):
    """Anisotropic total variation and its subgradient (sign(0) = 0).

    x may carry leading batch axes; the last axis is the flattened image.
    """
    x = np.asarray(x, dtype=np.float64)
    c, h, w = _grid_shape(x.shape[-1], image_shape)
    g = x.reshape(x.shape[:-1] + (c, h, w))
    dv = np.diff(g, axis=-2)
    dh = np.diff(g, axis=-1)
    val = np.abs(dv).sum(axis=(-3, -2, -1)) + np.abs(dh).sum(axis=(-3, -2, -1))
    sv, sh = np.sign(dv), np.sign(dh)
    grad = np.zeros_like(g)
    grad[..., 1:, :] += sv
    grad[..., :-1, :] -= sv
    grad[..., :, 1:] += sh
    grad[..., :, :-1] -= sh
    return val, grad.reshape(x.shape)


def reg_ggl(z):
    """(||z||^2 - u)^2 with u the latent dimension; batched over leading axes."""
    z = np.asarray(z, dtype=np.float64)
    u = z.shape[-1]
    s = np.sum(z * z, axis=-1) - u
    return s**2, 4.0 * s[..., None] * z


def defense_clip(g, S):
    """T(g, S) = g / max(1, ||g|| / S)."""
    g = np.asarray(g, dtype=np.float64)
    return g / max(1.0, float(np.linalg.norm(g)) / S)


def _clip_rows(Ge, S):
    """Row-wise clipping transform and a VJP through it."""
    n = np.linalg.norm(Ge, axis=1)
    scale = np.maximum(1.0, n / S)
    out = Ge / scale[:, None]

    def vjp(A):
        active = n > S
        res = A.copy()
        if np.any(active):
            gh = Ge[active] / n[active, None]
            Aa = A[active]
            res[active] = (S[active] / n[active])[:, None] * (Aa - np.sum(Aa * gh, axis=1)[:, None] * gh)
        return res

    return out, vjp


# ---------------------------------------------------------------- labels


def infer_labels(w, g_true, batch_size=1):
    """Labels from the sign structure of the last-layer gradient.

    The known regulariser gradient is removed first. A single sample's class
    is the row with the most negative sum; for a batch, classes whose row
    minimum is negative are taken in order of that minimum and cycled to fill
    the batch.
    """
    spec = w.spec
    G = np.asarray(g_true, dtype=np.float64).reshape(spec.n_out, spec.n_features) - M.reg_grad(spec, w.W)
    if spec.binary:
        if batch_size > 1:
            raise InferenceError("batch labels cannot be read off a single binary output")
        return np.array([int(G.sum() < 0)])
    if batch_size == 1:
        return np.array([int(np.argmin(G.sum(axis=1)))])
    mins = G.min(axis=1)
    found = [int(c) for c in np.argsort(mins) if mins[c] < 0]
    if not found:
        raise InferenceError("no gradient row has a negative entry")
    found = found[:batch_size]
    return np.array([found[i % len(found)] for i in range(batch_size)])


# ---------------------------------------------------------------- engine


def _soft_targets(spec, logits):
    if not spec.binary:
        return softmax(logits, axis=-1)
    if spec.kind == "linconvnet":
        return np.tanh(logits)
    return expit(logits)


def _soft_vjp(spec, T, A):
    if not spec.binary:
        return T * (A - np.sum(T * A, axis=-1, keepdims=True))
    if spec.kind == "linconvnet":
        return (1.0 - T * T) * A
    return T * (1.0 - T) * A


@dataclass
class AttackState:
    X: np.ndarray  # (R, B, d) in [0,1]
    T: np.ndarray = None  # fixed targets (R, B, n_out)
    logits: np.ndarray = None  # DLG label logits (R, B, n_out)
    Z: np.ndarray = None  # GGL latents (R, B, u)


def objective(cfg, spec, W, Gt, state, decoder=None, S=None, image_shape=()):
    """Attack loss per row and its gradients.

    Returns (value (R,), grad wrt X or Z, grad wrt logits or None).
    """
    R_, B, d = state.X.shape
    image_shape = image_shape or spec.image_shape
    T = _soft_targets(spec, state.logits) if cfg.kind == "dlg" else state.T
    if cfg.kind == "ggl":
        X, dec_vjp = decoder.decode_with_vjp(state.Z)
    else:
        X = state.X
    F, Rs, P = M.stacked_forward(spec, W, X, T)
    Ge = M.stacked_grads(spec, W, F, Rs).reshape(R_, -1)
    Gt_f = Gt.reshape(R_, -1)
    if cfg.kind == "invgrad":
        val, dG = _gml_rows("cosine", Gt_f, Ge)
    elif cfg.kind == "ggl":
        Gc, clip_vjp = _clip_rows(Ge, S)
        val, dGc = _gml_rows("mse", Gt_f, Gc)
        dG = clip_vjp(dGc)
    else:
        val, dG = _gml_rows("mse", Gt_f, Ge)
    V = dG.reshape(R_, spec.n_out, spec.n_features)
    gX = M.stacked_mixed_vjp(spec, W, F, Rs, P, V)
    gL = None
    if cfg.kind == "dlg":
        gL = _soft_vjp(spec, T, M.stacked_target_vjp(F, V))
    lam = cfg.weight()
    if cfg.kind == "invgrad" and lam:
        tv, gtv = reg_tv(X, image_shape)
        val = val + lam * tv.sum(axis=1)
        gX = gX + lam * gtv
    if cfg.kind == "ggl":
        gZ = dec_vjp(gX)
        if lam:
            rv, gr = reg_ggl(state.Z)
            val = val + lam * rv.sum(axis=1)
            gZ = gZ + lam * gr
        return val, gZ, None
    return val, gX, gL


def _init_state(cfg, spec, victim_ids, B, labels, decoder):
    """Per-(victim, restart) Gaussian starts drawn from independent streams."""
    X, Z, L = [], [], []
    for v in victim_ids:
        for r in range(cfg.restarts):
            rng = child_rng(cfg.seed, "attack-init", v, r)
            if cfg.kind == "ggl":
                Z.append(rng.standard_normal((B, decoder.latent_dim)))
            else:
                X.append(np.clip(cfg.init_mean + cfg.init_std * rng.standard_normal((B, spec.d)), 0.0, 1.0))
            if cfg.kind == "dlg":
                L.append(rng.standard_normal((B, spec.n_out)))
    state = AttackState(None)
    if cfg.kind == "ggl":
        state.Z = np.array(Z)
        state.X = decoder.decode(state.Z)
    else:
        state.X = np.array(X)
    if cfg.kind == "dlg":
        state.logits = np.array(L)
    else:
        state.T = np.repeat(np.array([M.encode_targets(spec, y) for y in labels]), cfg.restarts, axis=0)
    return state


def attack_rows(cfg, w_t, g_trues, batch_size=1, decoder=None, target_round=None,
                victim_ids=None, labels=None, image_shape=()):
    """Run an optimisation attack against several victims at once.

    g_trues: (V, n_params) true gradients. Returns a list of V * restarts
    trajectories ordered by (victim, restart).
    """
    if cfg.kind not in OPT_KINDS:
        raise ValueError("attack_rows runs optimisation attacks only; use robbing()")
    if cfg.kind == "ggl" and decoder is None:
        raise ValueError("GGL needs a decoder")
    spec, W = w_t.spec, w_t.W
    g_trues = np.atleast_2d(np.asarray(g_trues, dtype=np.float64))
    V = len(g_trues)
    victim_ids = list(range(V)) if victim_ids is None else list(victim_ids)
    if labels is None and cfg.kind != "dlg":
        labels = [infer_labels(w_t, g, batch_size) for g in g_trues]
    image_shape = image_shape or spec.image_shape
    state = _init_state(cfg, spec, victim_ids, batch_size, labels, decoder)
    Gt = np.repeat(g_trues.reshape(V, spec.n_out, spec.n_features), cfg.restarts, axis=0)
    S = None
    if cfg.kind == "ggl":
        nt = np.linalg.norm(Gt.reshape(len(Gt), -1), axis=1)
        S = nt if cfg.clip_S is None else np.full(len(Gt), float(cfg.clip_S))
    eta = cfg.step_size(spec)
    rows = len(state.X)
    alive = np.ones(rows, dtype=bool)
    steps = [0]
    ckpts = [state.X.copy()]
    for i in range(1, cfg.I + 1):
        _, g, gL = objective(cfg, spec, W, Gt, state, decoder, S, image_shape)
        if cfg.kind == "ggl":
            Zn = state.Z - eta * g
            Xn = decoder.decode(Zn)
        else:
            Xn = np.clip(state.X - eta * g, 0.0, 1.0)
        Ln = state.logits - eta * gL if gL is not None else None
        bad = ~np.isfinite(Xn).all(axis=(1, 2))
        if Ln is not None:
            bad |= ~np.isfinite(Ln).all(axis=(1, 2))
        if cfg.kind == "ggl":
            bad |= ~np.isfinite(Zn).all(axis=(1, 2))
        newly = bad & alive
        if np.any(newly):
            log.warning("%d %s restart(s) diverged at iteration %d", int(newly.sum()), cfg.kind, i)
        alive &= ~bad
        keep = alive[:, None, None]
        state.X = np.where(keep, Xn, state.X)
        if Ln is not None:
            state.logits = np.where(keep, Ln, state.logits)
        if cfg.kind == "ggl":
            state.Z = np.where(keep, Zn, state.Z)
        if i % cfg.record_every == 0 or i == cfg.I:
            steps.append(i)
            ckpts.append(state.X.copy())
    ck = np.stack(ckpts, axis=1)  # (rows, n_ckpt, B, d)
    out = []
    for j in range(rows):
        v, r = divmod(j, cfg.restarts)
        c = ck[j] if batch_size > 1 else ck[j][:, 0, :]
        out.append(Trajectory(cfg.kind, c, np.array(steps), target_round, r, victim_ids[v], not alive[j]))
    return out


def run_attack(cfg, w_t, g_true, true_batch_shape=(1,), decoder=None, target_round=None, victim_id=0,
               labels=None):
    """All restarts of one attack against one victim gradient."""
    B = int(true_batch_shape[0]) if np.ndim(true_batch_shape) else int(true_batch_shape)
    labels = None if labels is None else [np.atleast_1d(labels)]
    return attack_rows(cfg, w_t, np.asarray(g_true)[None], B, decoder, target_round, [victim_id], labels)


# ---------------------------------------------------------------- robbing


@dataclass
class Reconstruction:
    x_hat: np.ndarray  # (B, d)
    labels: np.ndarray
    scalars: np.ndarray
    mixed: np.ndarray = field(default=None)  # slot shares its class row with other slots
    unresolved: np.ndarray = field(default=None)  # no scalar found; estimate left from an earlier sweep


def _feature_row_to_input(spec, row):
    """Map feature-space rows (..., m) back to inputs (..., d), averaging pixels shared by patches."""
    if spec.kind == "logreg":
        return row
    counts = M.features_adjoint(spec, np.ones((1, spec.n_features)))[0]
    rows = np.atleast_2d(row)
    out = M.features_adjoint(spec, rows) / np.maximum(counts, 1.0)
    return out if np.ndim(row) == 2 else out[0]


def _residual_fn(spec, W, c, target):
    """Residual of output c for a stack of candidate inputs X (k, d)."""

    def r(X):
        F = M.features(spec, np.atleast_2d(X))
        Z, P = M._forward(spec, W, F)
        return M._residual(spec, Z, P, np.broadcast_to(target, (len(F), len(target))))[:, c]

    return r


def _scalar_signs(spec, c):
    """Possible signs of the output-gradient scalar for a slot of class c."""
    if spec.kind == "linconvnet":
        return (-1.0, 1.0)
    # logistic residual p - t is negative on the true class
    if spec.binary and c == 0:
        return (1.0,)
    return (-1.0,)


def _solve_scalar(spec, W, row, c, row_id, scale, match):
    """Find s with r(row / s) = scale * s; among all roots keep the best full-gradient match."""
    target = M.encode_targets(spec, [c])[0]
    r = _residual_fn(spec, W, row_id, target)
    x_of = lambda s: _feature_row_to_input(spec, row / s)  # noqa: E731
    phi = lambda s: float(r(x_of(s))[0]) - scale * s  # noqa: E731
    top = float(np.max(np.abs(row)))
    if top < 1e-12:
        raise UnderdeterminedError("gradient row vanishes; scalar cannot be identified")
    hi = 1.0 / scale if spec.kind == "logreg" else 1e6

    def scan(lo):
        found = []
        for sign in _scalar_signs(spec, c):
            grid = sign * np.geomspace(lo, max(hi, lo * 10.0), 400)
            vals = r(_feature_row_to_input(spec, row[None] / grid[:, None])) - scale * grid
            for a, b, fa, fb in zip(grid[:-1], grid[1:], vals[:-1], vals[1:]):
                if fa == 0.0:
                    found.append(a)
                elif np.sign(fa) != np.sign(fb):
                    found.append(brentq(phi, a, b, xtol=1e-15, rtol=1e-15, maxiter=200))
        return found

    # |s| >= max|row| keeps row/s inside the box; pixels at exactly 1 put the
    # root on that edge, and leftover contamination in a peeled batch row can
    # push it just below, so a wider bracket is tried before giving up
    roots = scan(top * (1.0 - 1e-6)) or scan(top * 0.25)
    if not roots:
        raise UnderdeterminedError("no self-consistent scalar found for the gradient row")
    scores = np.array([match(np.clip(x_of(s), 0.0, 1.0)) for s in roots])
    # several roots can reproduce the gradient equally well (a single binary
    # output sees only s * x); prefer the smallest |s| among the tied ones
    tied = scores <= scores.min() + 1e-12 * (1.0 + float(np.sum(row * row)))
    best = min(np.asarray(roots)[tied], key=abs)
    if abs(best) < 1e-12:
        raise UnderdeterminedError("divisor below 1e-12")
    return best


def robbing(w_t, g_true, spec=None, batch_size=1, labels=None, max_sweeps=50):
    """Closed-form recovery: divide a class's weight-gradient row by its output-gradient scalar.

    The model has no bias, so the scalar is not observed directly; it is the
    value s making the row/s input self-consistent, r_c(row/s) = B*s/m,
    where m is the number of batch slots with class c. Every such root
    reproduces its own row exactly, so roots are ranked by how well the
    whole gradient (all output rows) is reproduced. With several classes in
    the batch, each class row also carries the other slots' contributions;
    these are subtracted using the current estimates and the classes are
    re-solved in sweeps until the estimates stop moving.
    """
    spec = spec or w_t.spec
    W = w_t.W
    G = np.asarray(g_true, dtype=np.float64).reshape(spec.n_out, spec.n_features) - M.reg_grad(spec, W)
    if labels is None:
        labels = infer_labels(w_t, g_true, batch_size)
    labels = np.atleast_1d(np.asarray(labels))
    B = len(labels)
    Tb = M.encode_targets(spec, labels)
    x_hat = np.zeros((B, spec.d))
    scalars = np.zeros(B)
    mixed = np.zeros(B, dtype=bool)
    unresolved = np.zeros(B, dtype=bool)
    classes = np.unique(labels)
    sweeps = 1 if len(classes) == 1 else max_sweeps
    for _ in range(sweeps):
        prev = x_hat.copy()
        for c in classes:
            slots = np.flatnonzero(labels == c)
            others = np.flatnonzero(labels != c)
            m = len(slots)
            row_id = 0 if spec.binary else int(c)
            row = G[row_id].copy()
            if len(others):
                # peel off what the current estimates of the other slots put into this row
                Fo = M.features(spec, x_hat[others])
                Zo, Po = M._forward(spec, W, Fo)
                Ro = M._residual(spec, Zo, Po, Tb[others])
                row -= Ro[:, row_id] @ Fo / B

            def match(x, slots=slots):
                Xb = x_hat.copy()
                Xb[slots] = x
                g = M.mean_grad(spec, W, Xb, Tb) - M.reg_grad(spec, W)
                return float(np.sum((g - G) ** 2))

            try:
                s = _solve_scalar(spec, W, row, int(c), row_id, B / m, match)
            except UnderdeterminedError:
                if B == 1:
                    raise
                unresolved[slots] = True  # keep the previous estimate for these slots
                continue
            unresolved[slots] = False
            x_hat[slots] = np.clip(_feature_row_to_input(spec, row / s), 0.0, 1.0)
            scalars[slots] = s
            mixed[slots] = m > 1
        if np.max(np.abs(x_hat - prev)) < 1e-13:
            break
    if np.any(mixed):
        log.info("robbing: %d slot(s) share a label; their rows mix several inputs", int(mixed.sum()))
    if np.any(unresolved):
        log.info("robbing: no self-consistent scalar for %d slot(s)", int(unresolved.sum()))
    return Reconstruction(x_hat, labels, scalars, mixed, unresolved)


# ---------------------------------------------------------------- metrics


def match_batch(x_hat, x):
    """Reorder the rows of x_hat to minimise total squared error against x (Hungarian)."""
    x_hat = np.atleast_2d(x_hat)
    x = np.atleast_2d(x)
    if len(x) == 1:
        return x_hat
    cost = np.sum((x_hat[:, None, :] - x[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    out = np.empty_like(x_hat)
    out[cols] = x_hat[rows]
    return out


def similarity(x_hat, x):
    """(total squared error ||x_hat - x||^2, PSNR from the per-pixel MSE); batches are matched first."""
    x_hat = np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    err = float(np.sum((match_batch(x_hat, x) - x) ** 2))
    per_pixel = err / x.size
    psnr = float("inf") if per_pixel == 0 else -10.0 * np.log10(per_pixel)
    return err, psnr


def errors_of(trajectories, victims_x):
    """Squared errors of the final iterates (NaN for diverged restarts)."""
    out = []
    for tr in trajectories:
        if tr.diverged:
            out.append(np.nan)
            continue
        out.append(similarity(tr.final, victims_x[tr.victim_id])[0])
    if out and np.all(np.isnan(out)):
        raise EstimationError("every restart diverged")
    return np.array(out)
