"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 pipeline stage error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks as A
from . import data as D
from . import harness as Hn
from . import unroll as U
from .bounds import bound_curve, first_term, reconstruction_errors
from .constants import ConvergenceConstants
from .errors import FedLeakError
from .fedavg import TrainingTrace
from .lipschitz import autolip_chain

log = logging.getLogger("fedleak")

EXIT_CONFIG = 2
EXIT_STAGE = 3


class ConfigError(Exception):
    pass


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d, pairs):
    """Set dotted keys (`fed.E=4`, `attacks.0.I=50`) on a config dict; values are parsed as JSON."""
    for item in pairs or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        parts = key.split(".")
        node = d
        for p in parts[:-1]:
            if isinstance(node, list):
                node = node[int(p)]
            else:
                if node.get(p) is None:
                    node[p] = {}
                node = node[p]
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = _parse_value(val)
        else:
            node[last] = _parse_value(val)
    return d


def load_config(args):
    d = {}
    if getattr(args, "config", None):
        try:
            d = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from e
    apply_overrides(d, getattr(args, "set", None))
    for flag, key in (("seed", "seed"), ("output_dir", "output_dir"), ("dataset", "dataset")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    try:
        return Hn.ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def _dump(obj, path=None):
    text = json.dumps(obj, indent=1)
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    print(text)


# ---------------------------------------------------------------- subcommands


def cmd_data(args):
    if args.action == "fetch-sample":
        from .sample import export_mnist_sample
        imgs, labels = export_mnist_sample(args.out, seed=args.seed or 0)
        print(imgs)
        print(labels)
        return
    cfg = load_config(args)
    with Hn.stage("data"):
        ds = Hn.load_dataset(cfg)
    counts = np.bincount(ds.labels, minlength=ds.n_classes)
    _dump({"n": ds.n, "d": ds.d, "shape": list(ds.shape), "n_classes": ds.n_classes,
           "class_counts": counts.tolist()})


def cmd_train(args):
    cfg = load_config(args)
    tr = Hn.train_federated(cfg)
    out = Path(args.out or Path(cfg.output_dir) / "train")
    tr.trace.save(out / "trace")
    (out / "constants.json").write_text(tr.constants.to_json())
    _dump({"trace": str(out / "trace"), "rounds": tr.trace.rounds, "delta1": tr.trace.delta1,
           "final_loss": float(tr.trace.loss_curve[-1]), "constants": tr.constants.to_dict()})


def _model_at(trace, t):
    if t == "opt":
        if trace.w_star is None:
            raise ConfigError("trace has no optimum")
        return trace.w_star
    if t not in trace.rounds:
        raise ConfigError(f"no snapshot at round {t}; available {trace.rounds}")
    return trace.snapshot(t)


def _victims_for(cfg, trace, t):
    w = _model_at(trace, t)
    with Hn.stage("data"):
        ds = Hn.load_dataset(cfg)
        part = D.partition(ds, cfg.fed["N"], cfg.partition.get("mode", "iid"), seed=Hn._seed(cfg),
                           classes=cfg.partition.get("classes"))
    victims = Hn.pick_victims(ds, part, cfg.victims_per_device, cfg.batch_size, Hn._seed(cfg))
    return ds, w, Hn._victim_grads(w, victims)


def _attack_config(cfg, kind, args):
    base = next((a for a in cfg.attacks if a["kind"] == kind), {"kind": kind})
    extra = {k: v for k, v in (("I", args.iters), ("restarts", args.restarts)) if v is not None}
    return A.AttackConfig(**{**base, **extra, "seed": Hn._seed(cfg)})


def cmd_attack(args):
    cfg = load_config(args)
    trace = TrainingTrace.load(args.trace)
    try:
        t = "opt" if args.round == "opt" else int(args.round)
    except ValueError as e:
        raise ConfigError(f"--round must be an integer or 'opt', got {args.round!r}") from e
    ds, w, victims = _victims_for(cfg, trace, t)
    acfg = _attack_config(cfg, args.kind, args)
    H = args.H or cfg.unroll.get("H", 20)
    if acfg.kind != "robbing" and acfg.I % H == 0 and acfg.I >= H:
        acfg = A.AttackConfig(**{**acfg.to_dict(), "record_every": acfg.I // H})
    decoder = Hn.decoder_for(cfg, ds, Hn._seed(cfg)) if acfg.kind == "ggl" else None
    with Hn.stage(f"attack:{acfg.kind}"):
        errs, out = reconstruction_errors(acfg, w, victims, decoder, None if t == "opt" else t)
    dest = Path(args.out or Path(cfg.output_dir) / "attacks" / acfg.kind)
    dest.mkdir(parents=True, exist_ok=True)
    if acfg.kind != "robbing":
        for tr in out:
            tr.save(dest / f"t{t}_v{tr.victim_id}_r{tr.restart_id}")
    _dump({"attack": acfg.kind, "t": t, "errors": errs.tolist(),
           "mean": float(np.nanmean(errs))}, dest / f"errors_t{t}.json")


def cmd_unroll(args):
    cfg = load_config(args)
    paths = sorted(Path(args.trajectories).glob("*.json"))
    trajs = [A.Trajectory.load(p) for p in paths if not p.name.startswith("errors")]
    if not trajs:
        raise ConfigError(f"no trajectories under {args.trajectories}")
    ucfg = {**cfg.unroll, **({"H": args.H} if args.H else {})}
    with Hn.stage("unroll"):
        net = Hn.fit_unrolled(trajs, cfg.batch_size, ucfg)
    net.save(args.out)
    _dump({"H": net.H, "d": net.d, "fit_mse": list(net.fit_mse), "chain_mse": net.chain_mse})


def cmd_lipschitz(args):
    cfg = load_config(args)
    net = U.UnrolledNet.load(args.net)
    with Hn.stage("lipschitz"):
        est = autolip_chain(net, n_pairs=args.pairs or cfg.lipschitz_pairs, seed=Hn._seed(cfg))
    _dump(est.to_dict(), args.out)


def cmd_bound(args):
    cfg = load_config(args)
    trace = TrainingTrace.load(args.trace)
    consts = ConvergenceConstants.from_dict(json.loads(Path(args.constants).read_text()))
    if args.L_R is not None:
        L_R = args.L_R
    elif args.net:
        L_R = autolip_chain(U.UnrolledNet.load(args.net), n_pairs=cfg.lipschitz_pairs).upper
    else:
        raise ConfigError("bound needs --L-R or --net")
    acfg = _attack_config(cfg, args.kind, args)
    first = args.first
    if first is None:
        ds, w, victims = _victims_for(cfg, trace, "opt")
        with Hn.stage(f"attack:{acfg.kind}"):
            decoder = Hn.decoder_for(cfg, ds, Hn._seed(cfg)) if acfg.kind == "ggl" else None
            first = first_term(acfg, w, victims, decoder=decoder)
    with Hn.stage(f"bound:{acfg.kind}"):
        rep = bound_curve(acfg, trace, consts, L_R, first=first)
    _dump(rep.to_dict(), args.out)


def cmd_experiment(args):
    cfg = load_config(args)
    cells = Hn.run_experiment(cfg)
    out = Hn.emit(cells, cfg.output_dir, cfg)
    print(out / "results.csv")


def _floats(text):
    return [float(v) for v in text.split(",") if v]


def cmd_sweep_init(args):
    cfg = load_config(args)
    rows = Hn.sweep_init(cfg, _floats(args.means), _floats(args.stds), args.round)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0]) if rows else ["attack", "init_mean", "init_std", "t", "empirical_mse_mean",
                                       "empirical_mse_std", "restart_std", "bound_total"]
    with open(out / "sweep_init.csv", "w", encoding="utf-8") as f:
        f.write(",".join(keys) + "\n")
        for r in rows:
            f.write(",".join(Hn._fmt(r[k]) for k in keys) + "\n")
    print(out / "sweep_init.csv")


# ---------------------------------------------------------------- parser


def build_parser():
    ap = argparse.ArgumentParser(prog="fedleak", description="Reconstruction-error bounds for FedAvg.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, dotted (fed.E=4); repeatable")
        p.add_argument("--seed", type=int)
        p.add_argument("--output-dir", dest="output_dir")
        p.add_argument("--dataset")
        return p

    p = common(sub.add_parser("data", help="fetch the MNIST sample or describe a configured dataset"))
    p.add_argument("action", choices=["fetch-sample", "info"])
    p.add_argument("--out", default="data")
    p.set_defaults(fn=cmd_data)

    p = common(sub.add_parser("train", help="run FedAvg, solve w*, save the trace and constants"))
    p.add_argument("--out")
    p.set_defaults(fn=cmd_train)

    p = common(sub.add_parser("attack", help="attack the victims at one snapshot of a saved trace"))
    p.add_argument("--trace", required=True)
    p.add_argument("--kind", required=True, choices=A.KINDS)
    p.add_argument("--round", required=True, help="snapshot round or 'opt' for w*")
    p.add_argument("--iters", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--H", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_attack)

    p = common(sub.add_parser("unroll", help="fit an unrolled network to saved trajectories"))
    p.add_argument("--trajectories", required=True)
    p.add_argument("--H", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_unroll)

    p = common(sub.add_parser("lipschitz", help="AutoLip bound of a saved unrolled network"))
    p.add_argument("--net", required=True)
    p.add_argument("--pairs", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_lipschitz)

    p = common(sub.add_parser("bound", help="bound curve for one attack over a saved trace"))
    p.add_argument("--trace", required=True)
    p.add_argument("--constants", required=True)
    p.add_argument("--kind", required=True, choices=A.KINDS)
    p.add_argument("--L-R", dest="L_R", type=float)
    p.add_argument("--net")
    p.add_argument("--first", type=float, help="first term; estimated at w* when omitted")
    p.add_argument("--iters", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_bound)

    p = common(sub.add_parser("experiment", help="full pipeline, optionally over a sweep"))
    p.set_defaults(fn=cmd_experiment)

    p = common(sub.add_parser("sweep-init", help="DLG/iDLG error over a grid of init mean/std"))
    p.add_argument("--means", default="0.5,1,2")
    p.add_argument("--stds", default="0.5,1,2")
    p.add_argument("--round", type=int)
    p.set_defaults(fn=cmd_sweep_init)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FedLeakError as e:
        print(f"stage {e.stage or '?'} failed: {e}", file=sys.stderr)
        return EXIT_STAGE
    except (OSError, KeyError, ValueError) as e:
        # raised outside any stage: unreadable inputs, unknown rounds, invalid attack settings
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
