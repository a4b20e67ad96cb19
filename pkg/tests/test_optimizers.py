import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from dpmlbench import nn
from dpmlbench.accountant import PrivacyLedger, PrivacySpec, SubsampledGaussian, epsilon_of
from dpmlbench.errors import BudgetError, ConfigError, DomainError, SubspaceError
from dpmlbench.optimizers import (ClipPolicy, DpTrainConfig, NoiseSchedule, _RgpHelper, adpalloc_sigma,
                                  adpclip_update, calibrate_training, clip_factors, clip_per_sample,
                                  dp_sgd_step, gep_anchor_subspace, gep_clip, gep_combine, gep_privatize,
                                  gep_split, per_sample_norms, poisson_batch, privatize_fraction,
                                  privatize_sum, rgp_carrier_grads, rgp_factorize, rgp_reconstruct,
                                  sampling_plan, train, train_nonprivate, write_train_log)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 6)), elements=finite),
       arrays(np.float64, st.integers(1, 4), elements=finite).map(lambda a: a),
       st.floats(0.01, 50))
def test_clip_bounds_every_sample(g1, g2, C):
    n = g1.shape[0]
    g2 = np.resize(g2, (n, g2.shape[0]))
    clipped = clip_per_sample([g1, g2], C)
    assert np.all(per_sample_norms(clipped) <= C + 1e-9)
    # short gradients pass through untouched; long ones keep their direction
    norms = per_sample_norms([g1, g2])
    for i in range(n):
        if norms[i] <= C:
            np.testing.assert_array_equal(clipped[0][i], g1[i])
        else:
            assert per_sample_norms([c[i:i + 1] for c in clipped])[0] == pytest.approx(C, rel=1e-9)


def test_clip_factor_rule():
    np.testing.assert_allclose(clip_factors(np.array([0.0, 2.0, 8.0]), 4.0), [1.0, 1.0, 0.5])
    np.testing.assert_array_equal(clip_factors(np.array([1e9]), math.inf), [1.0])
    with pytest.raises(DomainError):
        clip_factors(np.ones(2), 0.0)


def test_privatize_sum_noise_statistics():
    rng = np.random.default_rng(0)
    clipped = [np.zeros((3, 2000))]
    C, sigma = 2.0, 1.5
    noisy = privatize_sum(clipped, C, sigma, rng)[0]
    # noise ~ N(0, (C sigma)^2) per coordinate: KS test against that law
    assert stats.kstest(noisy, "norm", args=(0, C * sigma)).pvalue > 1e-3
    plain = privatize_sum([np.ones((3, 4))], C, 0.0, rng)[0]
    np.testing.assert_array_equal(plain, np.full(4, 3.0))
    with pytest.raises(ConfigError):
        privatize_sum(clipped, math.inf, 1.0, rng)


def test_poisson_batch_statistics():
    rng = np.random.default_rng(1)
    sizes = [len(poisson_batch(1000, 0.05, rng)) for _ in range(2000)]
    assert np.mean(sizes) == pytest.approx(50, abs=1.0)
    assert np.var(sizes) == pytest.approx(1000 * 0.05 * 0.95, rel=0.15)


def test_sampling_plan():
    assert sampling_plan(1000, 50, 3) == (0.05, 60)
    assert sampling_plan(10, 50, 2) == (1.0, 2)
    with pytest.raises(ConfigError):
        sampling_plan(0, 1, 1)


@given(st.floats(0.05, 10), st.floats(-1, 2), st.floats(0, 1), st.floats(0.01, 2))
def test_adpclip_stays_in_range(C, b, gamma, eta):
    c = adpclip_update(C, b, gamma, eta, 0.05, 10.0)
    assert 0.05 <= c <= 10.0


def test_adpclip_direction():
    assert adpclip_update(4.0, 0.7, 0.7, 0.1) == 4.0
    # too many unclipped examples means C is too large
    assert adpclip_update(4.0, 0.9, 0.7, 0.1) < 4.0
    assert adpclip_update(4.0, 0.2, 0.7, 0.1) > 4.0
    assert adpclip_update(9.99, -50.0, 0.7, 0.5) == 10.0


def test_privatize_fraction():
    rng = np.random.default_rng(2)
    assert privatize_fraction([1, 0, 1, 1], 0.0, rng) == 0.75
    assert privatize_fraction([1, 0, 1, 1], 0.0, rng, m=8) == 0.375
    draws = [privatize_fraction(np.ones(10), 2.0, rng, m=10) for _ in range(4000)]
    assert np.std(draws) == pytest.approx(0.2, rel=0.1)


def test_adpalloc_schedule():
    assert adpalloc_sigma(2.0, 0.1, 0) == 2.0
    assert adpalloc_sigma(2.0, 0.1, 10) == pytest.approx(2.0 * math.exp(-1))
    sched = NoiseSchedule("exp-decay", 3.0, 0.05)
    assert sched.sigma_at(4) == pytest.approx(3.0 * math.exp(-0.2))
    with pytest.raises(ConfigError):
        NoiseSchedule("exp-decay", 1.0, 0.0)


# ---------------------------------------------------------------------------
# Low-rank carriers and embeddings
# ---------------------------------------------------------------------------


def test_rgp_full_rank_reconstructs_exactly(rng):
    W = rng.normal(size=(6, 9))
    state = rgp_factorize(W, 6, rng)
    np.testing.assert_allclose(state.L.T @ state.L, np.eye(6), atol=1e-12)
    np.testing.assert_allclose(state.R @ state.R.T, np.eye(6), atol=1e-12)
    g = rng.normal(size=(4, 6, 9))
    gL, gR = rgp_carrier_grads(g, state)
    np.testing.assert_allclose(rgp_reconstruct(gL, gR, state), g, rtol=1e-10, atol=1e-12)


def test_rgp_low_rank_is_projection(rng):
    W = rng.normal(size=(8, 7))
    state = rgp_factorize(W, 3, rng)
    g = rng.normal(size=(8, 7))
    rec = rgp_reconstruct(*rgp_carrier_grads(g, state), state)
    PL = state.L @ state.L.T
    PR = state.R.T @ state.R
    np.testing.assert_allclose(rec, PL @ g + g @ PR - PL @ g @ PR, atol=1e-12)
    # idempotent: reconstructing the reconstruction changes nothing
    again = rgp_reconstruct(*rgp_carrier_grads(rec, state), state)
    np.testing.assert_allclose(again, rec, atol=1e-12)
    # in-span gradients survive
    inside = state.L @ rng.normal(size=(3, 7))
    np.testing.assert_allclose(rgp_reconstruct(*rgp_carrier_grads(inside, state), state), inside, atol=1e-12)


def test_rgp_rank_validated(rng):
    with pytest.raises(ConfigError):
        rgp_factorize(np.ones((3, 4)), 4, rng)


def test_rgp_handles_rank_deficient_weights(rng):
    state = rgp_factorize(np.zeros((5, 5)), 3, rng)
    np.testing.assert_allclose(state.L.T @ state.L, np.eye(3), atol=1e-10)


def _span_setup(rng, d=40, k=5, n=30):
    basis = np.linalg.qr(rng.normal(size=(d, k)))[0].T
    public = rng.normal(size=(n, k)) @ basis
    return basis, public


def test_gep_in_span_residual_vanishes(rng):
    basis, public = _span_setup(rng)
    state = gep_anchor_subspace(public, 5, 3, rng)
    g = rng.normal(size=(7, 5)) @ basis
    emb, res = gep_split(g, state)
    assert np.abs(res).max() <= 1e-9
    np.testing.assert_allclose(gep_combine(emb, res, state), g, atol=1e-12)


def test_gep_split_combine_identity_with_groups(rng):
    public = rng.normal(size=(20, 30))
    state = gep_anchor_subspace(public, 4, 2, rng, num_groups=3)
    assert state.num_groups == 3
    g = rng.normal(size=(5, 30))
    emb, res = gep_split(g, state)
    assert emb.shape == (5, 12)
    np.testing.assert_allclose(gep_combine(emb, res, state), g, atol=1e-12)
    # residual is orthogonal to each group's basis
    for B, sl in zip(state.basis, state.slices):
        np.testing.assert_allclose(res[:, sl] @ B.T, 0, atol=1e-10)


def test_gep_captures_top_directions(rng):
    d = 25
    u = np.linalg.qr(rng.normal(size=(d, d)))[0]
    scales = np.r_[np.array([50.0, 30.0, 20.0]), np.full(d - 3, 0.1)]
    public = rng.normal(size=(200, d)) * scales @ u.T
    state = gep_anchor_subspace(public, 3, 5, rng)
    top = u[:, :3]
    # principal angles close to zero: projection of top directions is nearly complete
    proj = state.basis[0] @ top
    assert np.linalg.svd(proj, compute_uv=False).min() > 0.99


def test_gep_clip_and_zero_noise(rng):
    public = rng.normal(size=(10, 12))
    state = gep_anchor_subspace(public, 3, 2, rng, c_embed=1.0, c_resid=0.2)
    g = rng.normal(size=(6, 12)) * 5
    emb, res = gep_split(g, state)
    ce, cr = gep_clip(emb, res, state)
    assert np.all(np.linalg.norm(ce, axis=1) <= 1.0 + 1e-9)
    assert np.all(np.linalg.norm(cr, axis=1) <= 0.2 + 1e-9)
    out = gep_privatize(ce.sum(0), cr.sum(0), state, 0.0, rng)
    np.testing.assert_allclose(out, gep_combine(ce, cr, state).sum(0), atol=1e-12)


def test_gep_degenerate_public_gradients(rng):
    with pytest.raises(SubspaceError):
        gep_anchor_subspace(np.zeros((4, 6)), 2, 1, rng)


# ---------------------------------------------------------------------------
# Training engine
# ---------------------------------------------------------------------------


def _problem(rng, n=200):
    x = rng.normal(size=(n, 4))
    y = (x[:, 0] + 0.3 * x[:, 1] > 0).astype(int)
    net = nn.mlp(4, [8], 2, "tanh")
    return net, nn.init_params(net, rng), x, y


def test_zero_noise_infinite_clip_is_plain_sgd(rng):
    net, params, x, y = _problem(rng)
    lr, m = 0.2, 20.0
    a = b = params
    for step in range(30):
        idx = rng.choice(len(x), 20, replace=False)
        a, _, _ = dp_sgd_step(net, a, x[idx], y[idx], lr=lr, m=m, C=math.inf, sigma=0.0, rng=rng)
        _, grads = nn.per_sample_gradients(net, b, x[idx], y[idx])
        b = nn.sgd_step(b, [g.sum(axis=0) / m for g in grads], lr)
    for pa, pb in zip(a, b):
        np.testing.assert_array_equal(pa, pb)


def test_dp_sgd_step_records_one_event(rng):
    net, params, x, y = _problem(rng)
    ledger = PrivacyLedger(PrivacySpec(5.0))
    dp_sgd_step(net, params, x[:10], y[:10], lr=0.1, m=10, C=1.0, sigma=1.0, rng=rng, ledger=ledger, q=0.05)
    assert len(ledger) == 1
    assert ledger.entries[0].event == SubsampledGaussian(0.05, 1.0)


def test_dp_sgd_step_empty_batch(rng):
    net, params, x, y = _problem(rng)
    new, losses, norms = dp_sgd_step(net, params, x[:0], y[:0], lr=0.1, m=10, C=1.0, sigma=0.0, rng=rng)
    assert len(losses) == 0 and len(norms) == 0
    for a, b in zip(new, params):
        np.testing.assert_array_equal(a, b)


def test_dp_sgd_step_refuses_over_budget(rng):
    net, params, x, y = _problem(rng)
    ledger = PrivacyLedger(PrivacySpec(0.01))
    with pytest.raises(BudgetError):
        dp_sgd_step(net, params, x[:10], y[:10], lr=0.1, m=10, C=1.0, sigma=0.5, rng=rng, ledger=ledger, q=0.5)
    assert len(ledger) == 0


def test_rgp_full_rank_training_matches_sgd(rng):
    net, params, x, y = _problem(rng)
    helper = _RgpHelper(net, params, rank=100, rng=rng)
    a = b = params
    for step in range(20):
        helper.refresh(a)
        idx = rng.choice(len(x), 16, replace=False)
        _, grads = nn.per_sample_gradients(net, a, x[idx], y[idx])
        sums = helper.from_carriers(privatize_sum(helper.to_carriers(grads), math.inf, 0.0, rng))
        a = nn.sgd_step(a, [g / 16 for g in sums], 0.1)
        _, grads_b = nn.per_sample_gradients(net, b, x[idx], y[idx])
        b = nn.sgd_step(b, [g.sum(axis=0) / 16 for g in grads_b], 0.1)
    for pa, pb in zip(a, b):
        assert np.linalg.norm(pa - pb) <= 1e-6 * np.linalg.norm(pb)


VARIANTS = {
    "dpsgd": DpTrainConfig(lr=0.2, epochs=3, batch_size=20),
    "adaptive-clip": DpTrainConfig(lr=0.2, epochs=3, batch_size=20, clip=ClipPolicy("adaptive", 1.0)),
    "exp-decay": DpTrainConfig(lr=0.2, epochs=3, batch_size=20, noise=NoiseSchedule("exp-decay", 0.0, 0.1)),
    "rgp": DpTrainConfig(lr=0.2, epochs=3, batch_size=20, method="rgp", rgp_rank=2),
    "gep": DpTrainConfig(lr=0.2, epochs=3, batch_size=20, method="gep", gep_bases=4, gep_public_size=32),
    "focal": DpTrainConfig(lr=0.2, epochs=3, batch_size=20, loss=nn.LossSpec("composite", e_t=1.5)),
}


@pytest.mark.parametrize("name", list(VARIANTS))
def test_variants_stay_within_budget(name, rng):
    net, params, x, y = _problem(rng)
    privacy = PrivacySpec(2.0)
    cfg = calibrate_training(VARIANTS[name], privacy, len(x))
    assert cfg.noise.sigma > 0
    ledger = PrivacyLedger(privacy)
    res = train(net, params, x, y, cfg, rng, ledger, public_x=x[:40], public_y=y[:40])
    q, T = sampling_plan(len(x), 20, 3)
    assert ledger.epsilon() <= 2.0
    assert ledger.epsilon() >= 2.0 * 0.99  # calibration spends (almost) all of it
    assert len(res.log) == T
    per_step = {"gep": 2, "adaptive-clip": 2}.get(name, 1)
    assert len(ledger) == T * per_step
    if name == "adaptive-clip":
        assert ledger.count("clip-fraction") == T
        assert all(0.05 <= r.clip <= 10 for r in res.log)
    if name == "exp-decay":
        sig = [r.sigma for r in res.log]
        assert sig[0] > sig[-1]


def test_calibrate_training_infinite_budget():
    cfg = calibrate_training(DpTrainConfig(noise=NoiseSchedule("constant", 3.0)), PrivacySpec(math.inf), 100)
    assert cfg.noise.sigma == 0.0
    with pytest.raises(ConfigError):
        calibrate_training(DpTrainConfig(clip=None), PrivacySpec(1.0), 100)


def test_adaptive_default_sigma_b_is_resolved():
    cfg = calibrate_training(DpTrainConfig(epochs=2, batch_size=20, clip=ClipPolicy("adaptive", 1.0)),
                             PrivacySpec(1.0), 200)
    assert cfg.clip.sigma_b >= 0.1 * 20
    q, T = sampling_plan(200, 20, 2)
    eps = epsilon_of([SubsampledGaussian(q, cfg.noise.sigma, T), SubsampledGaussian(q, cfg.clip.sigma_b, T)])
    assert eps <= 1.0


def test_config_validation():
    with pytest.raises(ConfigError):
        DpTrainConfig(method="sgd2")
    with pytest.raises(ConfigError):
        DpTrainConfig(clip=None, noise=NoiseSchedule("constant", 1.0))
    with pytest.raises(ConfigError):
        ClipPolicy("adaptive", C=20.0)
    rng = np.random.default_rng(0)
    net, params, x, y = _problem(rng)
    with pytest.raises(ConfigError, match="public"):
        train(net, params, x, y, replace(VARIANTS["gep"], noise=NoiseSchedule("constant", 1.0)), rng)


def test_nonprivate_training_learns(rng):
    net, params, x, y = _problem(rng, 400)
    trained = train_nonprivate(net, params, x, y, DpTrainConfig(lr=0.5, epochs=10, batch_size=20), rng)
    assert nn.accuracy(net, trained, x, y) > 0.9


def test_train_log_csv(tmp_path, rng):
    net, params, x, y = _problem(rng)
    cfg = calibrate_training(VARIANTS["dpsgd"], PrivacySpec(1.0), len(x))
    res = train(net, params, x, y, cfg, rng, PrivacyLedger(PrivacySpec(1.0)))
    path = tmp_path / "log.csv"
    write_train_log(res.log, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "step,loss,clip_threshold,sigma,epsilon"
    assert len(lines) == len(res.log) + 1
    eps = [float(l.split(",")[-1]) for l in lines[1:]]
    assert eps == sorted(eps) and eps[-1] <= 1.0
