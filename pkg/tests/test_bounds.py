import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedleak import attacks as A
from fedleak import constants as K
from fedleak import data as D
from fedleak import fedavg as F
from fedleak import model as M
from fedleak import bounds as Bd
from fedleak.errors import EstimationError


def example_constants(**kw):
    base = dict(L=1.2, mu=0.1, sigma=np.zeros(2), G=1.0, Gamma=0.0, B=11.6125, C=0.0, gamma_lr=96.0,
                p=np.array([0.5, 0.5]), E=2, K=2)
    base.update(kw)
    return K.ConvergenceConstants(**base)


def test_second_term_example():
    assert Bd.second_term(example_constants(), 2.0, 1.0, 4) == pytest.approx(379.36, abs=1e-9)


def test_second_term_zero_lipschitz():
    np.testing.assert_array_equal(Bd.second_term(example_constants(), 0.0, 3.0, np.arange(1, 10)), 0.0)


def test_partial_participation_adds_C():
    c = example_constants(C=3.2, participation="partial")
    full = Bd.second_term(c, 2.0, 1.0, 4, participation="full")
    part = Bd.second_term(c, 2.0, 1.0, 4)
    assert part >= full
    assert part - full == pytest.approx(0.08 * 4 * 3.2 / 0.01)


def test_second_term_rejects_round_zero():
    with pytest.raises(ValueError):
        Bd.second_term(example_constants(), 1.0, 1.0, 0)


@settings(max_examples=50, deadline=None)
@given(L_R=st.floats(0.01, 100), delta1=st.floats(1e-3, 100), B=st.floats(0, 1e4), gamma=st.floats(2, 1e4))
def test_second_term_times_offset_is_constant(L_R, delta1, B, gamma):
    c = example_constants(B=B, gamma_lr=gamma)
    t = np.arange(1, 60, dtype=float)
    s = Bd.second_term(c, L_R, delta1, t)
    prod = s * (gamma + t)
    np.testing.assert_allclose(prod, prod[0], rtol=1e-12)
    assert np.all(np.diff(s) < 0) and np.all(s >= 0)


def _victims(rng, spec, w, n=3):
    out = []
    for _ in range(n):
        x = rng.uniform(0, 1, spec.d)
        y = np.array([int(rng.integers(spec.n_classes))])
        out.append((x, y, M.grad_w(w, (x[None], y))))
    return out


def test_first_term_oracle_and_constant_attacks(rng):
    spec = M.ModelSpec("logreg", 6, 3)
    w = M.Params(rng.normal(size=spec.n_params), spec)
    vic = _victims(rng, spec, w)
    cfg = A.AttackConfig("dlg")
    assert Bd.first_term(cfg, w, vic, attack_fn=lambda w_, x, y, g: [x] * 4) == 0.0
    c = np.full(6, 0.3)
    ref = 2 * np.mean([np.sum((x - c) ** 2) for x, _, _ in vic])
    assert Bd.first_term(cfg, w, vic, attack_fn=lambda w_, x, y, g: [c] * 4) == pytest.approx(ref)


def test_first_term_all_diverged(rng):
    spec = M.ModelSpec("logreg", 3, 3)
    w = M.Params(np.ones(9), spec)
    vic = _victims(rng, spec, w, 2)
    with np.errstate(all="ignore"), pytest.raises(EstimationError):
        Bd.first_term(A.AttackConfig("dlg", I=3, eta=np.inf, restarts=2), w, vic)


def test_first_term_runs_attack_with_restarts(rng):
    spec = M.ModelSpec("logreg", 4, 3)
    w = M.Params(rng.normal(size=12), spec)
    vic = _victims(rng, spec, w)
    cfg = A.AttackConfig("idlg", I=5, restarts=2)
    errs, trajs = Bd.reconstruction_errors(cfg, w, vic)
    assert errs.shape == (3, 2) and len(trajs) == 6
    assert Bd.first_term(cfg, w, vic) == pytest.approx(2 * errs.mean())
    assert Bd.first_term(cfg, w, vic, restarts=3) > 0


def test_robbing_errors_repeat_over_restarts(rng):
    spec = M.ModelSpec("logreg", 5, 4)
    w = M.Params(rng.normal(0, 0.3, 20), spec)
    errs, trajs = Bd.reconstruction_errors(A.AttackConfig("robbing", restarts=3), w, _victims(rng, spec, w))
    assert errs.shape == (3, 3) and len(trajs) == 3
    assert np.all(errs <= 1e-20)


def _trained(seed=0, E=2, T=6):
    ds = D.synthesize(60, 4, 3, seed=seed)
    spec = M.ModelSpec("logreg", 4, 3)
    part = D.partition(ds, 3, "iid", seed=seed)
    L = K.smoothness(spec, part, ds)
    sched = K.ConvergenceConstants(L=L, mu=0.1, E=E)
    tr = F.run(spec, ds, part, F.FedConfig(N=3, E=E, T=T, seed=seed, snapshot_every=2), sched)
    tr.set_optimum(F.solve_optimum(spec, ds, part, sched))
    sig, G = K.noise_bounds(spec, part, ds, tr)
    c = K.compose(L, 0.1, sig, G, K.heterogeneity(spec, part, ds), part.weights, E)
    return spec, ds, tr, c


def test_bound_curve_assembles_total():
    spec, ds, tr, c = _trained()
    rep = Bd.bound_curve(A.AttackConfig("dlg"), tr, c, L_R=1.5, first=0.7)
    assert list(rep.rounds) == [1, 2, 4, 6]
    np.testing.assert_allclose(rep.total, 0.7 + rep.second_term, rtol=0, atol=1e-12)
    far = Bd.second_term(c, 1.5, tr.delta1, 1e15)
    assert 0.7 + far == pytest.approx(0.7, abs=1e-6)
    d = json.loads(json.dumps(rep.to_dict()))
    assert d["constants"]["B"] == c.B and d["rounds"] == [1, 2, 4, 6]


def test_bound_curve_needs_optimum():
    spec, ds, tr, c = _trained()
    tr.w_star = None
    with pytest.raises(ValueError):
        Bd.bound_curve(A.AttackConfig("dlg"), tr, c, 1.0, first=0.0)


def test_bound_curve_first_term_from_victims(rng):
    spec, ds, tr, c = _trained()
    vic = _victims(rng, spec, tr.w_star, 2)
    cfg = A.AttackConfig("idlg", I=3, restarts=2)
    rep = Bd.bound_curve(cfg, tr, c, 1.0, victims=vic)
    assert rep.first_term == pytest.approx(Bd.first_term(cfg, tr.w_star, vic))
    assert rep.mc_samples == 2


def test_larger_E_raises_bound():
    _, _, tr2, c2 = _trained(E=2)
    _, _, tr4, c4 = _trained(E=4)
    assert c4.B >= c2.B
    d1 = max(tr2.delta1, tr4.delta1)
    t = np.array([1, 2, 4, 6])
    assert np.all(Bd.second_term(c4, 1.0, d1, t) >= Bd.second_term(c2, 1.0, d1, t))
