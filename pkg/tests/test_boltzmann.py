import json

import numpy as np
import pytest
from scipy import stats

from cifbm.boltzmann import (
    BmModel,
    TrainConfig,
    bm_to_theta,
    cd_direction,
    cd_update,
    energy,
    exact_distribution,
    gibbs_sweep,
    iterative_projection,
    marginal_visible,
    ml_gradient_exact,
    project_B,
    project_H,
    train,
)
from cifbm.coords import JointTable, p_to_eta, p_to_theta, random_table, theta_to_p
from cifbm.errors import DimensionMismatch, SizeCap
from cifbm.fisher import kl

from oracles import bm_table_bruteforce


def random_model(n_x, n_h, kind, seed, scale=1.0, **masks):
    rng = np.random.default_rng(seed)
    m = BmModel.create(n_x, n_h, kind, **masks)
    w, bias, mask = m.full()
    r = np.triu(rng.normal(0, scale, w.shape), 1)
    return m.with_full(np.where(mask, r + r.T, 0.0), rng.normal(0, scale, bias.shape))


def low_order(n):
    return np.array([s - 1 for s in range(1, 1 << n) if bin(s).count("1") <= 2])


def tv(a, b):
    return 0.5 * np.abs(np.asarray(a) - np.asarray(b)).sum()


# -- model invariants -------------------------------------------------------

def test_create_defaults_and_init_range():
    m = BmModel.create(4, 3, "vRBM", np.random.default_rng(0))
    assert np.all(np.abs(m.U) <= 0.01) and np.all(np.abs(m.W) <= 0.01)
    assert np.all(m.b == 0) and np.all(m.d == 0)
    assert not m.mask_V.any() and np.all(np.diag(m.U) == 0)
    assert np.array_equal(m.U, m.U.T)


def test_kind_constraints():
    with pytest.raises(ValueError):
        BmModel.create(3, 2, "VBM")
    with pytest.raises(ValueError):
        BmModel.create(3, 2, "RBM", mask_U=~np.eye(3, dtype=bool))
    with pytest.raises(ValueError):
        BmModel.create(3, 2, "vRBM", mask_V=~np.eye(2, dtype=bool))


def test_masked_entries_must_be_zero():
    m = BmModel.create(3, 0, "VBM", mask_U=np.zeros((3, 3), bool))
    u = np.zeros((3, 3))
    u[0, 1] = u[1, 0] = 0.5
    with pytest.raises(ValueError):
        BmModel(3, 0, "VBM", u, m.V, m.W, m.b, m.d, m.mask_U, m.mask_V, m.mask_W)


def test_asymmetric_weights_rejected():
    m = BmModel.create(3)
    u = np.zeros((3, 3))
    u[0, 1] = 1.0
    with pytest.raises(ValueError):
        BmModel(3, 0, "VBM", u, m.V, m.W, m.b, m.d, m.mask_U, m.mask_V, m.mask_W)


def test_json_round_trip():
    m = random_model(3, 2, "vRBM", 1)
    text = m.to_json()
    back = BmModel.from_json(text)
    assert set(json.loads(text)) == {"n_x", "n_h", "kind", "U", "V", "W", "b", "d", "mask"}
    for name in ("U", "V", "W", "b", "d", "mask_U", "mask_W"):
        assert np.array_equal(getattr(back, name), getattr(m, name))


# -- energy ------------------------------------------------------------------

def test_energy_zero_state():
    assert energy(random_model(3, 2, "general", 2), np.zeros(3), np.zeros(2)) == 0.0


def test_energy_pair_counted_once():
    m = BmModel.create(2).with_full(np.array([[0.0, 1.0], [1.0, 0.0]]), np.zeros(2))
    assert energy(m, [1, 1]) == -1.0


def test_energy_sign_flip():
    m = random_model(3, 2, "general", 3)
    w, bias, _ = m.full()
    neg = m.with_full(-w, -bias)
    x, h = np.array([1, 0, 1]), np.array([1, 1])
    assert energy(neg, x, h) == pytest.approx(-energy(m, x, h), abs=1e-15)


def test_energy_shape_check():
    with pytest.raises(DimensionMismatch):
        energy(BmModel.create(3), [1, 0])


# -- exact distribution -------------------------------------------------------

def test_zero_model_is_uniform():
    assert np.allclose(exact_distribution(BmModel.create(3, 2, "general")).probs, 1 / 32)


@pytest.mark.parametrize("kind,nh", [("VBM", 0), ("RBM", 2), ("vRBM", 2), ("general", 2)])
def test_exact_distribution_matches_bruteforce(kind, nh):
    m = random_model(3, nh, kind, 4)
    ref = bm_table_bruteforce(m.U, m.V, m.W, m.b, m.d)
    assert np.allclose(exact_distribution(m).probs, ref, atol=1e-14)


def test_marginal_visible_sums_hidden():
    m = random_model(3, 2, "general", 5)
    joint = exact_distribution(m)
    assert np.allclose(marginal_visible(m).probs, joint.marginal([1, 2, 3]).probs, atol=1e-14)
    r = random_model(3, 2, "vRBM", 6)
    assert np.allclose(marginal_visible(r).probs, exact_distribution(r).marginal([1, 2, 3]).probs, atol=1e-14)


def test_size_cap():
    with pytest.raises(SizeCap):
        exact_distribution(BmModel.create(15, 6, "RBM"))


def test_vbm_table_equals_theta_table_and_partition():
    m = random_model(2, 0, "VBM", 7)
    th = bm_to_theta(m)
    t = exact_distribution(m)
    assert np.allclose(t.probs, theta_to_p(th).probs, atol=1e-14)
    # log Z relative to the all-zero state: p(0) = 1/Z
    assert p_to_theta(t).psi == pytest.approx(-np.log(t.probs[0]), abs=1e-12)


# -- theta map ---------------------------------------------------------------

def test_bm_to_theta_zero():
    assert np.all(bm_to_theta(BmModel.create(3, 2, "general")).values == 0)


def test_bm_to_theta_single_pair():
    w = np.zeros((3, 3))
    w[0, 1] = w[1, 0] = 0.7
    th = bm_to_theta(BmModel.create(3).with_full(w, np.zeros(3)))
    assert th[0b011] == 0.7
    assert np.count_nonzero(th.values) == 1


@pytest.mark.parametrize("kind,nh", [("VBM", 0), ("vRBM", 2), ("general", 2)])
def test_energy_theta_consistency(kind, nh):
    m = random_model(3, nh, kind, 8)
    th = bm_to_theta(m)
    assert max(abs(th[s]) for s in range(1, 1 << m.n_units) if bin(s).count("1") > 2) == 0
    assert np.max(np.abs(exact_distribution(m).probs - theta_to_p(th).probs)) < 1e-12
    assert np.allclose(p_to_theta(exact_distribution(m)).values, th.values, atol=1e-10)


# -- exact gradient ------------------------------------------------------------

def _loglik(m, q):
    return float(q @ np.log(marginal_visible(m).probs))


@pytest.mark.parametrize("kind,nh", [("VBM", 0), ("vRBM", 2), ("general", 2)])
def test_gradient_matches_finite_differences(kind, nh):
    m = random_model(3, nh, kind, 9, scale=0.5)
    q = random_table(3, np.random.default_rng(10)).probs
    g = ml_gradient_exact(m, q)
    w, bias, _ = m.full()
    h = 1e-6
    for k, (block, i, j) in enumerate(g.labels):
        dw, db = np.zeros_like(w), np.zeros_like(bias)
        if block in ("b", "d"):
            db[i + (m.n_x if block == "d" else 0)] = h
        else:
            a = i + (m.n_x if block == "V" else 0)
            c = j + (m.n_x if block in ("V", "W") else 0)
            dw[a, c] = dw[c, a] = h
        up, dn = m.with_full(w + dw, bias + db), m.with_full(w - dw, bias - db)
        assert g.values[k] == pytest.approx((_loglik(up, q) - _loglik(dn, q)) / (2 * h), abs=1e-7)


def test_gradient_zero_at_own_marginal():
    m = random_model(3, 2, "vRBM", 11)
    assert ml_gradient_exact(m, marginal_visible(m)).max_norm < 1e-10


def test_vbm_bias_gradient_is_moment_difference():
    m = random_model(3, 0, "VBM", 12)
    q = random_table(3, np.random.default_rng(13))
    g = ml_gradient_exact(m, q)
    eq, ep = p_to_eta(q), p_to_eta(exact_distribution(m))
    for i in range(3):
        assert g.get("b", i) == pytest.approx(eq[1 << i] - ep[1 << i], abs=1e-14)
    assert g.get("U", 0, 2) == pytest.approx(eq[0b101] - ep[0b101], abs=1e-14)


def test_masked_parameter_has_no_gradient_entry():
    mask = ~np.eye(3, dtype=bool)
    mask[0, 1] = mask[1, 0] = False
    g = ml_gradient_exact(BmModel.create(3, mask_U=mask), random_table(3, np.random.default_rng(0)))
    assert ("U", 0, 1) not in g.labels and ("U", 0, 2) in g.labels
    assert len(g.values) == 3 + 2


# -- Gibbs sampling ------------------------------------------------------------

def test_zero_model_gibbs_is_fair_coin():
    s = gibbs_sweep(BmModel.create(3, 2, "general"), np.zeros((200_000, 5)), np.random.default_rng(0))
    assert np.allclose(s.mean(axis=0), 0.5, atol=0.005)


def test_gibbs_single_state_and_shape_check():
    m = random_model(3, 0, "VBM", 0)
    out = gibbs_sweep(m, [0, 1, 0], np.random.default_rng(0))
    assert out.shape == (3,) and set(out) <= {0.0, 1.0}
    with pytest.raises(DimensionMismatch):
        gibbs_sweep(m, [0, 1], np.random.default_rng(0))


def _codes(states):
    return states.astype(np.int64) @ (1 << np.arange(states.shape[1]))


def test_gibbs_preserves_exact_distribution():
    # start 10^6 independent states at the exact law; one sweep must keep it
    m = random_model(3, 0, "VBM", 14)
    p = exact_distribution(m).probs
    rng = np.random.default_rng(15)
    codes = rng.choice(8, size=1_000_000, p=p)
    states = ((codes[:, None] >> np.arange(3)) & 1).astype(float)
    out = gibbs_sweep(m, states, rng)
    counts = np.bincount(_codes(out), minlength=8)
    assert stats.chisquare(counts, p * counts.sum()).pvalue > 0.001


def test_gibbs_chain_converges_in_tv():
    m = random_model(3, 0, "VBM", 16)
    rng = np.random.default_rng(17)
    s = np.zeros((100_000, 3))
    for _ in range(30):
        s = gibbs_sweep(m, s, rng)
    counts = np.bincount(_codes(s), minlength=8) / s.shape[0]
    assert tv(counts, exact_distribution(m).probs) < 0.01


def test_masked_connections_do_not_enter_conditionals():
    mask = np.zeros((2, 2), bool)
    m = BmModel.create(2, mask_U=mask).with_full(np.array([[0, 5.0], [5.0, 0]]), np.zeros(2))
    assert np.all(m.U == 0)
    s = gibbs_sweep(m, np.ones((100_000, 2)), np.random.default_rng(0))
    assert np.allclose(s.mean(axis=0), 0.5, atol=0.01)


# -- contrastive divergence ----------------------------------------------------

def test_cd_long_chain_direction_matches_exact_gradient():
    m = random_model(3, 0, "VBM", 18, scale=0.3)
    target = random_table(3, np.random.default_rng(19))
    rng = np.random.default_rng(20)
    codes = rng.choice(8, size=20_000, p=target.probs)
    x = ((codes[:, None] >> np.arange(3)) & 1).astype(float)
    avg = np.mean([cd_direction(m, x, 50, rng) for _ in range(5)], axis=0)
    exact = ml_gradient_exact(m, x).values
    cos = avg @ exact / (np.linalg.norm(avg) * np.linalg.norm(exact))
    assert cos > 0.99


def test_cd_update_is_zero_in_expectation_on_model_samples():
    m = random_model(3, 0, "VBM", 21)
    p = exact_distribution(m).probs
    rng = np.random.default_rng(22)
    codes = rng.choice(8, size=200_000, p=p)
    x = ((codes[:, None] >> np.arange(3)) & 1).astype(float)
    d = cd_direction(m, x, 1, rng)
    assert np.max(np.abs(d)) < 0.01


def test_cd_update_respects_mask_and_learning_rate():
    mask = np.zeros((3, 2), bool)
    mask[0, 0] = True
    m = BmModel.create(3, 2, "RBM", np.random.default_rng(0), mask_W=mask)
    x = np.random.default_rng(1).integers(0, 2, (50, 3))
    out = cd_update(m, x, 1, np.random.default_rng(2), learning_rate=0.1)
    assert np.all(out.W[~mask] == 0)
    assert out.W[0, 0] != m.W[0, 0]
    with pytest.raises(ValueError):
        cd_update(m, x, 0, np.random.default_rng(2))


# -- training ---------------------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ValueError):
        TrainConfig(method="cd", cd_steps=0)
    with pytest.raises(ValueError):
        TrainConfig(method="sgd")


@pytest.mark.parametrize("seed", range(3))
def test_vbm_fit_reproduces_low_order_moments(seed):
    target = random_table(4, np.random.default_rng(100 + seed))
    res = train(BmModel.create(4, rng=np.random.default_rng(seed)), target, TrainConfig())
    assert res.converged
    fitted = exact_distribution(res.model)
    idx = low_order(4)
    diff = p_to_eta(fitted).values[idx] - p_to_eta(target).values[idx]
    assert np.max(np.abs(diff)) < 1e-6
    th = bm_to_theta(res.model).values
    assert np.all(np.delete(th, idx) == 0)


def test_zero_epoch_budget_returns_initial_model():
    m = BmModel.create(3, 2, "vRBM", np.random.default_rng(0))
    q = random_table(3, np.random.default_rng(1))
    for cfg in (TrainConfig(max_epochs=0), TrainConfig(max_epochs=0, solver="gradient"),
                TrainConfig(method="cd", max_epochs=0)):
        data = q if cfg.method == "exact_ml" else np.eye(3)
        out = train(m, data, cfg).model
        assert np.array_equal(out.W, m.W) and np.array_equal(out.b, m.b)


def test_cd_training_is_seed_deterministic():
    x = np.random.default_rng(3).integers(0, 2, (80, 4))
    m = BmModel.create(4, 2, "RBM", np.random.default_rng(4))
    cfg = TrainConfig(method="cd", max_epochs=20, seed=7, batch_size=16)
    a, b = train(m, x, cfg), train(m, x, cfg)
    assert np.array_equal(a.model.W, b.model.W) and a.trace == b.trace
    c = train(m, x, TrainConfig(method="cd", max_epochs=20, seed=8, batch_size=16))
    assert not np.array_equal(a.model.W, c.model.W)


def test_hidden_training_lowers_kl_and_records_trace():
    q = random_table(4, np.random.default_rng(5))
    m = BmModel.create(4, 3, "vRBM", np.random.default_rng(6))
    res = train(m, q, TrainConfig(max_epochs=200))
    assert res.trace[-1][2] < res.trace[0][2]
    assert res.trace_csv().splitlines()[0] == "epoch,grad_norm,kl_to_data"
    g = train(m, q, TrainConfig(max_epochs=50, solver="gradient", learning_rate=0.5))
    assert g.trace[-1][2] < g.trace[0][2]


def test_newton_solver_needs_visible_model():
    with pytest.raises(ValueError):
        train(BmModel.create(3, 1, "RBM"), random_table(3, np.random.default_rng(0)),
              TrainConfig(solver="newton"))


# -- projections --------------------------------------------------------------------

def test_project_H_with_silent_hidden_units():
    q = random_table(3, np.random.default_rng(0))
    m = BmModel.create(3, 2, "vRBM").with_full(np.zeros((5, 5)), np.r_[0.3, -0.2, 0.1, 0, 0])
    out = project_H(q, m)
    assert np.allclose(out.probs, np.tile(q.probs, 4) / 4, atol=1e-15)


def test_project_H_marginal_and_kl_identity():
    q = random_table(3, np.random.default_rng(1))
    m = random_model(3, 2, "general", 2)
    out = project_H(q, m)
    assert np.allclose(out.marginal([1, 2, 3]).probs, q.probs, atol=1e-15)
    assert kl(out, exact_distribution(m)) == pytest.approx(kl(q, marginal_visible(m)), abs=1e-10)


def test_project_B_fixed_point():
    m = random_model(3, 2, "general", 3)
    out = project_B(exact_distribution(m), BmModel.create(3, 2, "general"))
    assert np.max(np.abs(bm_to_theta(out).values - bm_to_theta(m).values)) < 1e-6


def test_project_B_matches_second_order_moments_and_is_unique():
    q = random_table(5, np.random.default_rng(4))
    a = project_B(q, BmModel.create(3, 2, "general"))
    b = project_B(q, random_model(3, 2, "general", 5))
    idx = low_order(5)
    diff = p_to_eta(exact_distribution(a)).values[idx] - p_to_eta(q).values[idx]
    assert np.max(np.abs(diff)) < 1e-6
    assert np.all(np.delete(bm_to_theta(a).values, idx) == 0)
    assert tv(exact_distribution(a).probs, exact_distribution(b).probs) < 1e-6


def test_project_B_size_check():
    with pytest.raises(DimensionMismatch):
        project_B(random_table(4, np.random.default_rng(0)), BmModel.create(3, 2, "general"))


def test_iterative_projection_realizable_target():
    m = random_model(3, 2, "general", 6)
    out, trace = iterative_projection(marginal_visible(m), m)
    assert trace.converged and len(trace.rows) == 1
    assert trace.rows[0][1] == pytest.approx(0.0, abs=1e-12)
    assert trace.rows[0][2] == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_iterative_projection_trace_is_monotone(seed):
    q = random_table(3, np.random.default_rng(200 + seed))
    finals = []
    for init in (BmModel.create(3, 2, "general", np.random.default_rng(seed)),
                 random_model(3, 2, "general", 300 + seed)):
        model, trace = iterative_projection(q, init, max_rounds=200)
        assert trace.monotone(1e-9)
        assert trace.rows[-1][2] <= trace.rows[0][1] + 1e-9
        assert trace.to_csv().splitlines()[0] == "round,kl_before,kl_after"
        finals.append(kl(q, marginal_visible(model)))
    assert all(f >= 0 for f in finals)
