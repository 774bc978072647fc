"""Certified reconstruction-error curves: first term at w* plus the convergence term."""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import attack_rows, errors_of, robbing, similarity
from .errors import EstimationError


@dataclass
class BoundReport:
    attack: str
    first_term: float
    rounds: np.ndarray
    second_term: np.ndarray
    total: np.ndarray
    constants_used: object
    L_R: float
    delta1: float
    mc_samples: int
    lipschitz: dict = field(default=None)

    def to_dict(self):
        return {
            "attack": self.attack,
            "first_term": self.first_term,
            "rounds": [int(t) for t in self.rounds],
            "second_term": [float(v) for v in self.second_term],
            "total": [float(v) for v in self.total],
            "constants": self.constants_used.to_dict(),
            "L_R": self.L_R,
            "lipschitz": self.lipschitz,
            "delta1": self.delta1,
            "mc_samples": self.mc_samples,
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))


def reconstruction_errors(attack_cfg, w, victims, decoder=None, target_round=None):
    """||x - R(w)||^2 for every (victim, restart); returns (errors (V, restarts), trajectories).

    victims: list of (x (B, d), y (B,), g_true). Robbing is deterministic, so
    its single error is repeated over the restarts and its Reconstructions
    are returned in place of trajectories.
    """
    if attack_cfg.kind == "robbing":
        errs, recs = [], []
        for x, _, g in victims:
            rec = robbing(w, g, batch_size=len(np.atleast_2d(x)))
            recs.append(rec)
            errs.append([similarity(rec.x_hat, x)[0]] * attack_cfg.restarts)
        return np.array(errs), recs
    B = len(np.atleast_2d(victims[0][0]))
    g = np.array([v[2] for v in victims])
    trajs = attack_rows(attack_cfg, w, g, B, decoder, target_round)
    xs = [np.atleast_2d(v[0]) if B > 1 else np.asarray(v[0]).ravel() for v in victims]
    errs = errors_of(trajs, xs).reshape(len(victims), attack_cfg.restarts)
    return errs, trajs


def first_term(attack_cfg, w_star, victims, restarts=None, decoder=None, attack_fn=None):
    """2 * mean over victims and restarts of ||x - R(w*)||^2.

    `attack_fn(w, x, y, g) -> list of reconstructions` replaces the configured
    attack when given.
    """
    if attack_fn is not None:
        errs = [similarity(xh, x)[0] for x, y, g in victims for xh in attack_fn(w_star, x, y, g)]
        errs = np.array(errs, dtype=np.float64)
    else:
        if restarts is not None and restarts != attack_cfg.restarts:
            from dataclasses import replace
            attack_cfg = replace(attack_cfg, restarts=restarts)
        errs, _ = reconstruction_errors(attack_cfg, w_star, victims, decoder)
    if errs.size == 0 or np.all(np.isnan(errs)):
        raise EstimationError("no finite reconstruction at w*")
    return 2.0 * float(np.nanmean(errs))


def second_term(constants, L_R, delta1, t, participation=None):
    """2 L_R^2 / (gamma + t) * (4 (B + C) / mu^2 + (gamma + 1) * delta1)."""
    participation = participation or constants.participation
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 1):
        raise ValueError("rounds start at 1")
    C = constants.C if participation != "full" else 0.0
    g = constants.gamma_lr
    v = 4.0 * (constants.B + C) / constants.mu**2 + (g + 1.0) * delta1
    out = 2.0 * L_R**2 / (g + t) * v
    return float(out) if out.ndim == 0 else out


def bound_curve(attack_cfg, trace, constants, L_R, victims=None, rounds=None, first=None,
                decoder=None, lipschitz=None):
    """BoundReport over the given rounds (default: every snapshot of the trace)."""
    if trace.w_star is None or trace.delta1 is None:
        raise ValueError("trace has no optimum; call solve_optimum first")
    rounds = np.array(trace.rounds if rounds is None else rounds)
    if first is None:
        if victims is None:
            raise ValueError("victims are needed to estimate the first term")
        first = first_term(attack_cfg, trace.w_star, victims, decoder=decoder)
    second = second_term(constants, L_R, trace.delta1, rounds)
    second = np.atleast_1d(second)
    return BoundReport(attack_cfg.kind, float(first), rounds, second, first + second, constants,
                       float(L_R), float(trace.delta1), attack_cfg.restarts, lipschitz)
