"""Experiment pipeline: data -> FedAvg -> attacks per snapshot -> unrolled nets -> bounds -> reports."""

import copy
import csv
import json
import logging
import math
import os
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import attacks as A
from . import constants as K
from . import data as D
from . import fedavg as F
from . import model as M
from . import unroll as U
from .bounds import BoundReport, bound_curve, reconstruction_errors
from .decoder import train_ggl_decoder
from .errors import FedLeakError, StageError, UndefinedCorrelationError
from .lipschitz import autolip_chain
from .rng import child_rng

log = logging.getLogger(__name__)

SWEEP_AXES = ("E", "N", "T", "batch_size", "classes_per_client", "init_mean", "init_std")
BATCH_DEVICES = {"mnist": 15, "fmnist": 10, "cifar10": 5, "synthetic": 10}
ROW_FIELDS = ("sweep_value", "attack", "t", "empirical_mse_mean", "empirical_mse_std", "bound_first",
              "bound_second", "bound_total", "L_R", "psnr_mean")


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    data: dict = field(default_factory=lambda: {"limit": 1000, "sample_dir": "data"})
    model: dict = field(default_factory=lambda: {"kind": "logreg", "reg_gamma": 0.1, "patch": [4, 4, 4]})
    fed: dict = field(default_factory=dict)
    partition: dict = field(default_factory=lambda: {"mode": "iid"})
    attacks: list = field(default_factory=lambda: [{"kind": k} for k in A.KINDS])
    attack_every: int = 5
    victims_per_device: int = 1
    batch_size: int = 1
    unroll: dict = field(default_factory=lambda: {"H": 20, "epochs": 50, "max_trajectories": 1000})
    ggl: dict = field(default_factory=lambda: {"latent_dim": 32, "hidden": 256, "epochs": 30})
    lipschitz_pairs: int = 10_000
    sweep: dict = None  # {"axis": ..., "values": [...]}
    output_dir: str = "results"
    seed: int = 0

    def __post_init__(self):
        fed = {"E": 2, "T": 100}
        fed["N"] = 10 if self.batch_size == 1 else BATCH_DEVICES.get(self.dataset, 10)
        fed.update(self.fed)
        self.fed = fed
        F.FedConfig(**fed)  # validates the federated settings early
        if self.sweep is not None:
            if self.sweep.get("axis") not in SWEEP_AXES:
                raise ValueError(f"sweep axis must be one of {SWEEP_AXES}")
            if not self.sweep.get("values"):
                raise ValueError("sweep needs a nonempty value list")
        if self.batch_size < 1 or self.victims_per_device < 1 or self.attack_every < 1:
            raise ValueError("batch_size, victims_per_device and attack_every must be >= 1")
        for a in self.attacks:
            A.AttackConfig(**a)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def from_json(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)

    def with_value(self, axis, value):
        """Copy with one sweep axis set."""
        d = self.to_dict()
        d["sweep"] = None
        if axis in ("E", "N", "T"):
            d["fed"][axis] = value
        elif axis == "batch_size":
            d["batch_size"] = value
        elif axis == "classes_per_client":
            d["partition"] = {"mode": "classes_per_client", "classes": value}
        elif axis in ("init_mean", "init_std"):
            for a in d["attacks"]:
                a[axis] = value
        else:
            raise ValueError(f"unknown sweep axis {axis!r}")
        return ExperimentConfig.from_dict(d)


@dataclass
class ResultRow:
    sweep_value: object
    attack: str
    t: int
    empirical_mse_mean: float
    empirical_mse_std: float
    bound_first: float
    bound_second: float
    bound_total: float
    L_R: float
    psnr_mean: float


@dataclass
class CellResult:
    """Everything computed for one sweep value."""

    sweep_value: object
    rows: list
    reports: dict  # attack -> BoundReport
    constants: K.ConvergenceConstants
    errors: dict  # attack -> {round: (V, restarts) errors}; round "opt" is w*
    lipschitz: dict  # attack -> LipschitzEstimate
    fit_mse: dict  # attack -> list
    trace: F.TrainingTrace = None


@contextmanager
def stage(name):
    try:
        yield
    except FedLeakError as e:
        if e.stage is None:
            e.stage = name
        raise
    except Exception as e:  # anything else is tagged and wrapped
        raise StageError(name, e) from e


def _seed(cfg):
    env = os.environ.get("FEDLEAK_SEED")
    return int(env) if env is not None else int(cfg.seed)


def load_dataset(cfg):
    src = cfg.data
    limit = src.get("limit")
    if cfg.dataset == "synthetic":
        return D.synthesize(src.get("n", 200), src.get("d", 10), src.get("n_classes", 2), seed=src.get("seed", 0))
    if cfg.dataset == "cifar10":
        return D.load_cifar10(src["batches"], limit=limit)
    if "images" in src:
        return D.load_idx(src["images"], src["labels"], limit=limit)
    if cfg.dataset == "mnist":
        from .sample import mnist_sample
        return mnist_sample(src.get("sample_dir", "data"), limit=limit or 1000)
    raise ValueError(f"dataset {cfg.dataset!r} needs 'images' and 'labels' paths")


def build_spec(cfg, ds):
    m = cfg.model
    return M.ModelSpec(m.get("kind", "logreg"), ds.d, ds.n_classes, m.get("reg_gamma", 0.1),
                       tuple(ds.shape) if len(ds.shape) > 1 else (), tuple(m.get("patch", (4, 4, 4))))


def pick_victims(ds, partition, per_device, batch_size, seed):
    """One (x, y, device) per victim: `per_device` batches drawn from every shard."""
    out = []
    for k, idx in enumerate(partition.device_indices):
        rng = child_rng(seed, "victims", k)
        take = min(len(idx), per_device * batch_size)
        chosen = rng.choice(idx, size=take, replace=False)
        for v in range(per_device):
            sel = chosen[v * batch_size:(v + 1) * batch_size]
            if len(sel) < batch_size:
                break
            x = ds.samples[sel]
            out.append((x[0] if batch_size == 1 else x, ds.labels[sel], k))
    return out


def _victim_grads(w, victims):
    return [(x, y, M.grad_w(w, (np.atleast_2d(x), y))) for x, y, _ in victims]


def _subsample(items, limit):
    if len(items) <= limit:
        return items
    pick = np.unique(np.linspace(0, len(items) - 1, limit).round().astype(int))
    return [items[i] for i in pick]


def fit_unrolled(trajectories, batch_size, ucfg):
    H = ucfg.get("H", 20)
    per = max(1, ucfg.get("max_trajectories", 1000) // batch_size)
    usable = [t for t in trajectories if not t.diverged]
    pairs = U.collect(_subsample(usable, per), H)
    return U.fit(pairs, H, epochs=ucfg.get("epochs", 50))


def robbing_pairs(w, victims, recs):
    """(gradient row of each slot's class, reconstruction) pairs for the one-layer Robbing map."""
    ins, outs = [], []
    for (x, y, g), rec in zip(victims, recs):
        G = g.reshape(w.spec.n_out, w.spec.n_features) - M.reg_grad(w.spec, w.W)
        for j, c in enumerate(rec.labels):
            row = G[0 if w.spec.binary else int(c)]
            ins.append(A._feature_row_to_input(w.spec, row))
            outs.append(rec.x_hat[j])
    return np.array(ins), np.array(outs)


def _errors_summary(errs):
    e = errs[np.isfinite(errs)]
    return float(np.mean(e)), float(np.std(e))


def _psnr(errs, d):
    e = errs[np.isfinite(errs)] / d
    with np.errstate(divide="ignore"):
        return float(np.mean(np.where(e > 0, -10.0 * np.log10(np.maximum(e, 1e-300)), np.inf)))


_DECODERS = {}


def decoder_for(cfg, ds, seed):
    key = (cfg.dataset, ds.n, ds.d, seed, json.dumps(cfg.ggl, sort_keys=True))
    if key not in _DECODERS:
        g = cfg.ggl
        _DECODERS[key] = train_ggl_decoder(ds, g.get("latent_dim", 32), g.get("epochs", 30), seed=seed,
                                           hidden=g.get("hidden", 256))
    return _DECODERS[key]


@dataclass
class Trained:
    """FedAvg output shared by the attack stages of a cell."""

    ds: D.Dataset
    spec: M.ModelSpec
    partition: D.Partition
    trace: F.TrainingTrace
    constants: K.ConvergenceConstants


def train_federated(cfg, ds=None):
    """Partition, schedule constants, FedAvg, w*, then sigma/G/Gamma and the composed constants."""
    seed = _seed(cfg)
    with stage("data"):
        ds = load_dataset(cfg) if ds is None else ds
        spec = build_spec(cfg, ds)
        pmode = cfg.partition.get("mode", "iid")
        part = D.partition(ds, cfg.fed["N"], pmode, seed=seed, classes=cfg.partition.get("classes"))
    fed = F.FedConfig(**{**cfg.fed, "seed": seed, "snapshot_every": cfg.attack_every})
    with stage("constants"):
        L = K.smoothness(spec, part, ds)
        mu = K.strong_convexity(spec, part, ds)
        schedule = K.ConvergenceConstants(L=L, mu=mu, E=fed.E)
    with stage("fedavg"):
        trace = F.run(spec, ds, part, fed, schedule)
        opt = F.solve_optimum(spec, ds, part, schedule)
        trace.set_optimum(opt)
    with stage("constants"):
        sigma, G = K.noise_bounds(spec, part, ds, trace)
        Gamma = K.heterogeneity(spec, part, ds)
        consts = K.compose(L, mu, sigma, G, Gamma, part.weights, fed.E, fed.K, fed.participation)
        K.check_schedule(consts, fed.T * max(fed.E, 1))
    return Trained(ds, spec, part, trace, consts)


def run_cell(cfg, sweep_value=None, ds=None, keep_trace=False):
    """Full pipeline for one configuration."""
    seed = _seed(cfg)
    tr = train_federated(cfg, ds)
    ds, spec, part, trace, consts = tr.ds, tr.spec, tr.partition, tr.trace, tr.constants
    victims = pick_victims(ds, part, cfg.victims_per_device, cfg.batch_size, seed)
    xs = [v[0] for v in victims]
    rounds = trace.rounds
    models = {t: trace.snapshot(t) for t in rounds}
    models["opt"] = trace.w_star
    vgrads = {t: _victim_grads(w, victims) for t, w in models.items()}
    rows, reports, errors, lips, fits = [], {}, {}, {}, {}
    for acfg_d in cfg.attacks:
        acfg = A.AttackConfig(**{**acfg_d, "seed": seed})
        H = cfg.unroll.get("H", 20)
        if acfg.kind != "robbing" and acfg.I % H == 0 and acfg.I >= H:
            acfg = replace(acfg, record_every=acfg.I // H)
        decoder = decoder_for(cfg, ds, seed) if acfg.kind == "ggl" else None
        with stage(f"attack:{acfg.kind}"):
            errs, trajs, rob_in, rob_out = {}, [], [], []
            for t, w in models.items():
                e, tr = reconstruction_errors(acfg, w, vgrads[t], decoder, None if t == "opt" else t)
                errs[t] = e
                if acfg.kind == "robbing":
                    a, b = robbing_pairs(w, vgrads[t], tr)
                    rob_in.append(a)
                    rob_out.append(b)
                else:
                    trajs.extend(tr)
        with stage(f"unroll:{acfg.kind}"):
            if acfg.kind == "robbing":
                net = U.fit([(np.concatenate(rob_in), np.concatenate(rob_out))], 1,
                            epochs=cfg.unroll.get("epochs", 50), clip_last=True, init="lstsq")
            else:
                net = fit_unrolled(trajs, cfg.batch_size, cfg.unroll)
            del trajs
        with stage(f"lipschitz:{acfg.kind}"):
            est = autolip_chain(net, n_pairs=cfg.lipschitz_pairs, seed=seed)
        with stage(f"bound:{acfg.kind}"):
            first = 2.0 * float(np.nanmean(errs["opt"]))
            rep = bound_curve(acfg, trace, consts, est.upper, rounds=rounds, first=first,
                              lipschitz={**est.to_dict(), "fit_mse": list(net.fit_mse)})
        reports[acfg.kind] = rep
        errors[acfg.kind] = errs
        lips[acfg.kind] = est
        fits[acfg.kind] = list(net.fit_mse)
        d_total = len(np.atleast_2d(xs[0])) * spec.d
        for i, t in enumerate(rounds):
            mean, std = _errors_summary(errs[t])
            rows.append(ResultRow(sweep_value, acfg.kind, int(t), mean, std, rep.first_term,
                                  float(rep.second_term[i]), float(rep.total[i]), rep.L_R,
                                  _psnr(errs[t], d_total)))
    return CellResult(sweep_value, rows, reports, consts, errors, lips, fits, trace if keep_trace else None)


def run_experiment(cfg, keep_trace=False):
    """Run every sweep value (or the single default cell). Partial results are flushed on failure."""
    cells = []
    values = cfg.sweep["values"] if cfg.sweep else [None]
    ds = None
    try:
        with stage("data"):
            ds = load_dataset(cfg) if cfg.dataset != "synthetic" or not cfg.sweep else None
        for v in values:
            cell_cfg = cfg.with_value(cfg.sweep["axis"], v) if cfg.sweep else cfg
            cells.append(run_cell(cell_cfg, v, ds, keep_trace))
    except FedLeakError:
        if cells and cfg.output_dir:
            emit(cells, cfg.output_dir, cfg)
        raise
    return cells


# ---------------------------------------------------------------- metrics and reports


def metric_pearson(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("need two vectors of equal length >= 2")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.sum(da * da)), np.sqrt(np.sum(db * db))
    if sa == 0 or sb == 0:
        raise UndefinedCorrelationError("a vector has zero variance")
    return float(np.clip(np.sum(da * db) / (sa * sb), -1.0, 1.0))


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_rows(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ROW_FIELDS)
        for r in rows:
            w.writerow([_fmt(getattr(r, k)) for k in ROW_FIELDS])


def _parse_value(s):
    if s == "":
        return None
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def read_rows(path):
    with open(path, encoding="utf-8") as f:
        rd = csv.DictReader(f)
        out = []
        for rec in rd:
            out.append(ResultRow(
                _parse_value(rec["sweep_value"]), rec["attack"], int(rec["t"]),
                *(float(rec[k]) for k in ROW_FIELDS[3:]),
            ))
    return out


def summarize(cells):
    """Best empirical error (log10 of the min over snapshots and restarts) and Pearson per attack."""
    out = {}
    for cell in cells:
        key = "default" if cell.sweep_value is None else str(cell.sweep_value)
        per = {}
        for kind, errs in cell.errors.items():
            snap = np.concatenate([e.ravel() for t, e in errs.items() if t != "opt"])
            snap = snap[np.isfinite(snap)]
            best = float(snap.min()) if snap.size else None
            rows = [r for r in cell.rows if r.attack == kind]
            try:
                rho = metric_pearson([r.bound_total for r in rows], [r.empirical_mse_mean for r in rows])
            except (UndefinedCorrelationError, ValueError):
                rho = None
            per[kind] = {
                "best_empirical_error": best,
                "best_empirical_log10": (math.log10(best) if best and best > 0 else None),
                "pearson": rho,
                "L_R": cell.lipschitz[kind].upper,
                "empirical_lipschitz_lower": cell.lipschitz[kind].empirical_lower,
                "fit_mse_mean": float(np.mean(cell.fit_mse[kind])),
                "first_term": cell.reports[kind].first_term,
                "terminal_bound_total": float(cell.reports[kind].total[-1]),
            }
        out[key] = {"attacks": per, "constants": cell.constants.to_dict()}
    return out


def emit(cells, out_dir, cfg=None):
    out = Path(out_dir)
    (out / "bounds").mkdir(parents=True, exist_ok=True)
    (out / "plotdata").mkdir(parents=True, exist_ok=True)
    rows = [r for c in cells for r in c.rows]
    write_rows(rows, out / "results.csv")
    kinds = sorted({k for c in cells for k in c.reports})
    for kind in kinds:
        reps = [{"sweep_value": c.sweep_value, **c.reports[kind].to_dict()} for c in cells if kind in c.reports]
        (out / "bounds" / f"{kind}.json").write_text(json.dumps(reps, indent=1))
    summary = summarize(cells) if cells else {"default": None}
    if cfg is not None:
        summary["config"] = cfg.to_dict()
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    sweep = cfg.sweep["axis"] if cfg is not None and cfg.sweep else "default"
    with open(out / "plotdata" / f"{sweep}.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sweep_value", "attack", "t", "empirical", "bound_total", "bound_first", "bound_second"])
        for r in rows:
            w.writerow([_fmt(r.sweep_value), r.attack, r.t, _fmt(r.empirical_mse_mean), _fmt(r.bound_total),
                        _fmt(r.bound_first), _fmt(r.bound_second)])
    return out


def sweep_init(cfg, means, stds, round_=None, kinds=("dlg", "idlg")):
    """Empirical error of DLG and iDLG at one snapshot over a grid of Gaussian init parameters.

    The bound does not depend on the init except through L_R and the first
    term, which are fixed at the default init, so it is computed once and
    repeated on every row.
    """
    base_attacks = [next((a for a in cfg.attacks if a["kind"] == k), {"kind": k}) for k in kinds]
    base = ExperimentConfig.from_dict({**cfg.to_dict(), "attacks": base_attacks, "sweep": None})
    ds = load_dataset(base)
    cell = run_cell(base, None, ds, keep_trace=True)
    trace = cell.trace
    t = trace.rounds[-1] if round_ is None else round_
    w = trace.snapshot(t)
    seed = _seed(base)
    part = D.partition(ds, base.fed["N"], base.partition.get("mode", "iid"), seed=seed,
                       classes=base.partition.get("classes"))
    victims = _victim_grads(w, pick_victims(ds, part, base.victims_per_device, base.batch_size, seed))
    idx = trace.rounds.index(t)
    rows = []
    for a in base_attacks:
        rep = cell.reports[a["kind"]]
        for m in means:
            for s in stds:
                acfg = A.AttackConfig(**{**a, "init_mean": m, "init_std": s, "seed": seed})
                errs, _ = reconstruction_errors(acfg, w, victims)
                mean, std = _errors_summary(errs)
                # spread over restarts alone, averaged across victims
                restart_std = float(np.nanmean(np.nanstd(errs, axis=1)))
                rows.append({"attack": a["kind"], "init_mean": m, "init_std": s, "t": t,
                             "empirical_mse_mean": mean, "empirical_mse_std": std,
                             "restart_std": restart_std, "bound_total": float(rep.total[idx])})
    return rows
