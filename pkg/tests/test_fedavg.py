import numpy as np
import pytest
from scipy.special import expit

from fedleak import constants as K
from fedleak import data as D
from fedleak import fedavg as F
from fedleak import model as M
from fedleak.errors import DivergenceError
from fedleak.rng import child_rng


def consts(L=1.0, mu=0.1, E=2, gamma=None):
    return K.ConvergenceConstants(L=L, mu=mu, E=E, gamma_lr=gamma)


def tiny(seed=0, n=40, d=3, N=4):
    ds = D.synthesize(n, d, 2, seed=seed)
    spec = M.ModelSpec("logreg", d, 2, reg_gamma=0.1)
    return spec, ds, D.partition(ds, N, "iid", seed=seed)


def test_lr_example():
    assert F.lr(4, consts(mu=0.1, gamma=96.0)) == pytest.approx(0.2, abs=1e-15)


def test_lr_decreasing_and_first_step_bounded():
    c = K.compose(L=3.0, mu=0.1, sigma=[0.0], G=0.0, Gamma=0.0, p=[1.0], E=2)
    etas = [F.lr(t, c) for t in range(1, 200)]
    assert np.all(np.diff(etas) < 0)
    assert etas[0] <= 1 / (4 * c.L) + 1e-15
    with pytest.raises(ValueError):
        F.lr(0, c)


def test_local_update_zero_steps(rng):
    spec = M.ModelSpec("logreg", 3, 2)
    w = M.Params(rng.normal(size=3), spec)
    out = F.local_update(w, (rng.uniform(0, 1, (4, 3)), np.array([0, 1, 0, 1])), 0, 5, consts(), rng)
    np.testing.assert_array_equal(out.w, w.w)


def test_local_update_single_sample_step(rng):
    spec = M.ModelSpec("logreg", 3, 2, reg_gamma=0.1)
    w = M.Params(rng.normal(size=3), spec)
    x, y = rng.uniform(0, 1, 3), 1
    c = consts(gamma=10.0)
    out = F.local_update(w, (x[None], np.array([y])), 1, 7, c, np.random.default_rng(0))
    g = (expit(x @ w.w) - y) * x + 0.2 * w.w
    np.testing.assert_allclose(out.w, w.w - F.lr(8, c) * g, rtol=0, atol=1e-14)


def test_local_update_reproducible(rng):
    spec = M.ModelSpec("logreg", 3, 2)
    w = M.Params(rng.normal(size=3), spec)
    shard = (rng.uniform(0, 1, (6, 3)), rng.integers(0, 2, 6))
    a = F.local_update(w, shard, 2, 0, consts(), np.random.default_rng(3))
    b = F.local_update(w, shard, 2, 0, consts(), np.random.default_rng(3))
    np.testing.assert_array_equal(a.w, b.w)


def test_aggregate_full_examples():
    cfg = F.FedConfig(N=2)
    assert F.aggregate([np.array([0.0]), np.array([2.0])], cfg, [0.5, 0.5])[0] == 1.0
    assert F.aggregate([np.array([1.0]), np.array([0.0])], cfg, [0.3, 0.7])[0] == pytest.approx(0.3)


def test_aggregate_partial_single_device():
    cfg = F.FedConfig(N=3, K=1, participation="partial")
    models = [np.array([1.0, 2.0]), np.array([3.0, 4.0]), np.array([5.0, 6.0])]
    p = np.array([0.2, 0.3, 0.5])
    out = F.aggregate(models, cfg, p, np.random.default_rng(9))
    k = np.random.default_rng(9).choice(3, size=1, replace=True, p=p)[0]
    np.testing.assert_array_equal(out, models[k])


def test_aggregate_weighted_rule():
    cfg = F.FedConfig(N=2, K=2, participation="partial", partial_rule="weighted")
    p = np.array([0.5, 0.5])
    out = F.aggregate([np.array([2.0]), np.array([2.0])], cfg, p, np.random.default_rng(0))
    assert out[0] == pytest.approx(2.0)  # (N/K) sum p_k w_k with equal weights is the mean


def test_aggregate_length_mismatch():
    with pytest.raises(ValueError):
        F.aggregate([np.zeros(1)], F.FedConfig(N=2), [0.5, 0.5])


def test_equal_shards_full_aggregation_is_plain_mean(rng):
    ws = [rng.normal(size=4) for _ in range(5)]
    out = F.aggregate(ws, F.FedConfig(N=5), np.full(5, 0.2))
    np.testing.assert_allclose(out, np.mean(ws, axis=0), atol=1e-15)


def test_fedconfig_validation():
    with pytest.raises(ValueError):
        F.FedConfig(N=3, K=4)
    with pytest.raises(ValueError):
        F.FedConfig(T=0)
    assert F.FedConfig(N=7).K == 7
    with pytest.raises(ValueError):
        F.FedConfig(E="2")
    with pytest.raises(ValueError):
        F.FedConfig(T=2.5)


def test_centralized_equivalence():
    spec, ds, _ = tiny(n=12)
    part = D.Partition((np.arange(ds.n),), np.ones(1))
    c = consts(L=1.0, mu=0.1, E=1)
    trace = F.run(spec, ds, part, F.FedConfig(N=1, E=1, T=15, seed=4), c)
    # plain SGD with its own gradient code and the same sample stream
    idx_rng = child_rng(4, "sgd", 0)
    w = np.zeros(3)
    for t in range(1, 16):
        i = idx_rng.integers(ds.n)
        x, y = ds.samples[i], ds.labels[i]
        w = w - 2.0 / (0.1 * (c.gamma_lr + t)) * ((expit(x @ w) - y) * x + 0.2 * w)
        np.testing.assert_allclose(trace.snapshot(t).w, w, rtol=0, atol=1e-12)


def test_single_round():
    spec, ds, part = tiny()
    trace = F.run(spec, ds, part, F.FedConfig(N=4, T=1, snapshot_every=5), consts())
    assert trace.rounds == [1]
    assert trace.loss_curve.shape == (1,)


def test_snapshot_stride():
    spec, ds, part = tiny()
    trace = F.run(spec, ds, part, F.FedConfig(N=4, T=12, snapshot_every=5), consts())
    assert trace.rounds == [1, 5, 10, 12]


def test_runs_are_bit_identical():
    spec, ds, part = tiny()
    cfg = F.FedConfig(N=4, K=2, T=6, participation="partial", seed=11)
    a = F.run(spec, ds, part, cfg, consts())
    b = F.run(spec, ds, part, cfg, consts())
    for (_, p), (_, q) in zip(a.snapshots, b.snapshots):
        assert np.array_equal(p.w, q.w)
    assert np.array_equal(a.loss_curve, b.loss_curve)
    assert [list(s) for s in a.participants] == [list(s) for s in b.participants]


def test_loss_curve_decreases_on_mnist(mnist):
    ds = mnist.subset(np.arange(300))
    spec = M.ModelSpec("logreg", ds.d, 10)
    part = D.partition(ds, 5, "iid", seed=0)
    c = K.ConvergenceConstants(L=K.smoothness(spec, part, ds), mu=0.1, E=2)
    trace = F.run(spec, ds, part, F.FedConfig(N=5, T=40, noise_every=0), c)
    tail = trace.loss_curve[30:]
    assert np.all(np.isfinite(trace.loss_curve))
    assert np.all(np.diff(tail) <= 1e-6)


def test_divergence_reports_round():
    spec, ds, part = tiny()
    bad = consts(mu=1e-9, gamma=1.0)
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as e:
        F.run(spec, ds, part, F.FedConfig(N=4, T=50), bad)
    assert e.value.round is not None and e.value.round >= 1


def test_convergence_envelope_over_seeds():
    """Mean ||w_t - w*||^2 over 20 seeds stays under v / (gamma + t) at every round."""
    spec, ds, part = tiny(n=40, d=3, N=4)
    L = K.smoothness(spec, part, ds)
    mu = K.strong_convexity(spec, part, ds)
    sched = K.ConvergenceConstants(L=L, mu=mu, E=2)
    opt = F.solve_optimum(spec, ds, part, sched, tol=1e-14)
    gaps, d1, s_max, g_max = [], [], 0, 0
    traces = []
    for seed in range(20):
        tr = F.run(spec, ds, part, F.FedConfig(N=4, E=2, T=30, seed=seed), sched)
        tr.set_optimum(opt)
        traces.append(tr)
        gaps.append([np.sum((p.w - opt.params.w) ** 2) for _, p in tr.snapshots])
        d1.append(tr.delta1)
    sig = np.max([K.noise_bounds(spec, part, ds, tr)[0] for tr in traces], axis=0)
    G = max(K.noise_bounds(spec, part, ds, tr)[1] for tr in traces)
    c = K.compose(L, mu, sig, G, K.heterogeneity(spec, part, ds), part.weights, 2)
    t = np.array(traces[0].rounds, dtype=float)
    v = 4 * c.B / mu**2 + (c.gamma_lr + 1) * np.mean(d1)
    assert np.all(np.mean(gaps, axis=0) <= v / (c.gamma_lr + t))


# ---------------------------------------------------------------- optimum


def test_optimum_least_squares():
    rng = np.random.default_rng(2)
    spec = M.ModelSpec("linconvnet", 4, 2, image_shape=(2, 2), patch=(2, 2, 2))
    X = rng.uniform(0, 1, (10, 4))
    y = rng.integers(0, 2, 10)
    ds = D.Dataset(X, y, 2, (2, 2))
    part = D.Partition((np.arange(10),), np.ones(1))
    opt = F.solve_optimum(spec, ds, part, tol=1e-15, max_iter=200_000)
    Fm = M.features(spec, X)
    ref = np.linalg.lstsq(Fm, 2.0 * y - 1.0, rcond=None)[0]
    np.testing.assert_allclose(opt.params.w, ref, atol=1e-5)
    T = M.encode_targets(spec, y)
    for _ in range(20):
        other = opt.params.W + rng.normal(scale=0.1, size=opt.params.W.shape)
        assert F.global_loss(spec, other, X, T) >= opt.loss


def test_optimum_warm_start_returns_immediately():
    spec, ds, part = tiny()
    opt = F.solve_optimum(spec, ds, part, tol=1e-12)
    again = F.solve_optimum(spec, ds, part, tol=1e-12, w0=opt.params)
    assert again.iters <= 1


def test_optimum_separable_gradient_small():
    X = np.array([[0.9, 0.1], [0.8, 0.2], [0.1, 0.9], [0.2, 0.8]])
    ds = D.Dataset(X, np.array([1, 1, 0, 0]), 2)
    spec = M.ModelSpec("logreg", 2, 2, reg_gamma=0.1)
    part = D.Partition((np.arange(4),), np.ones(1))
    c = K.ConvergenceConstants(L=K.smoothness(spec, part, ds), mu=0.1, E=1)
    opt = F.solve_optimum(spec, ds, part, c)
    assert opt.grad_norm <= 1e-3


def test_trace_round_trip(tmp_path):
    spec, ds, part = tiny()
    tr = F.run(spec, ds, part, F.FedConfig(N=4, T=4, snapshot_every=2), consts())
    tr.set_optimum(F.solve_optimum(spec, ds, part))
    tr.save(tmp_path)
    back = F.TrainingTrace.load(tmp_path)
    assert back.rounds == tr.rounds
    for t in tr.rounds:
        assert np.array_equal(back.snapshot(t).w, tr.snapshot(t).w)
    assert np.array_equal(back.loss_curve, tr.loss_curve)
    assert np.array_equal(back.w_star.w, tr.w_star.w)
    assert back.delta1 == tr.delta1
    assert (tmp_path / "loss.csv").read_text().splitlines()[0] == "t,loss"
