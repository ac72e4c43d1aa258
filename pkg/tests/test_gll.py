import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchorgk import diff
from anchorgk.gll import (
    GLL,
    GLLConfig,
    SigmaConfig,
    filter_node,
    gain_schedule,
    gcn_forward,
    mlp,
    moe_forward,
    normalized_adjacency,
    propagate,
    run_filter,
    sigma_weights,
    ukf_step,
)

from oracles import kalman_step


def relu(x):
    return np.maximum(x, 0.0)


def np_mlp(x, p, prefix):
    return relu(x @ p[f"{prefix}.w1"].value + p[f"{prefix}.b1"].value) @ p[f"{prefix}.w2"].value + p[f"{prefix}.b2"].value


# ---------------------------------------------------------------- GCN


def test_gcn_identity_and_bias():
    x = np.random.default_rng(0).normal(size=(4, 3))
    out = gcn_forward(np.zeros((4, 4)), x, diff.tensor(np.eye(3)), diff.tensor(np.zeros((1, 3))))
    np.testing.assert_allclose(out.value, x, atol=1e-15)
    b = np.array([[1.0, -2.0]])
    out = gcn_forward(np.random.default_rng(1).random((4, 4)), x, diff.tensor(np.zeros((3, 2))), diff.tensor(b))
    assert np.all(out.value == b)


def test_gcn_matches_triple_loop():
    rng = np.random.default_rng(2)
    a = rng.random((5, 5))
    a = (a + a.T) / 2
    np.fill_diagonal(a, 0)
    x = rng.normal(size=(5, 3))
    w = rng.normal(size=(3, 4))
    b = rng.normal(size=(1, 4))
    got = gcn_forward(a, x, diff.tensor(w), diff.tensor(b)).value
    a_hat = a + np.eye(5)
    deg = a_hat.sum(axis=1)
    want = np.zeros((5, 4))
    for i in range(5):
        for k in range(4):
            total = b[0, k]
            for j in range(5):
                for c in range(3):
                    total += a_hat[i, j] / np.sqrt(deg[i] * deg[j]) * x[j, c] * w[c, k]
            want[i, k] = total
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_gcn_permutation_equivariant():
    rng = np.random.default_rng(3)
    a = rng.random((6, 6))
    x = rng.normal(size=(6, 2))
    w, b = diff.tensor(rng.normal(size=(2, 3))), diff.tensor(rng.normal(size=(1, 3)))
    perm = rng.permutation(6)
    base = gcn_forward(a, x, w, b).value
    permuted = gcn_forward(a[np.ix_(perm, perm)], x[perm], w, b).value
    np.testing.assert_allclose(permuted, base[perm], atol=1e-12)


def test_propagate_is_last_row_of_gcn():
    rng = np.random.default_rng(4)
    a = rng.random((5, 5))
    x_aug = rng.normal(size=(7, 5))  # T x (U+2)
    norm = normalized_adjacency(a)
    np.testing.assert_allclose(propagate(a, x_aug), (norm @ x_aug.T)[-1], atol=1e-14)


# ---------------------------------------------------------------- sigma points and filter


def test_sigma_weight_cases():
    wm, wc = sigma_weights(SigmaConfig(alpha=1.0, kappa=0.0, j=3))
    assert wm[0] == 0.0 and np.allclose(wm[1:], 1 / 6)
    wm, _ = sigma_weights(SigmaConfig(0.1, 2.0, 0.1, 3))
    assert abs(wm.sum() - 1) < 1e-12
    cfg = SigmaConfig(alpha=0.1, kappa=0.0, j=2)
    assert cfg.xi == pytest.approx(-1.98)
    assert sigma_weights(cfg)[0][0] == pytest.approx(-99.0)
    with pytest.raises(ValueError):
        sigma_weights(SigmaConfig(alpha=0.1, kappa=-3.0, j=2))


@pytest.mark.parametrize("alpha,j", list(itertools.product([0.1, 0.5, 1.0], [1, 2, 4, 8])))
def test_sigma_weights_sum_grid(alpha, j):
    for kappa in (0.0, 0.1, 3.0 - j):
        cfg = SigmaConfig(alpha=alpha, kappa=kappa, j=j)
        if j + cfg.xi <= 0:
            continue
        wm, wc = sigma_weights(cfg)
        assert abs(wm.sum() - 1.0) < 1e-12
        assert len(wm) == len(wc) == 2 * j + 1


def test_zero_innovation_keeps_mean():
    cfg = SigmaConfig(j=2)
    x = np.array([0.3, -1.2])
    x_new, _ = ukf_step(x, np.eye(2), x, cfg, 1e-3 * np.eye(2), 1e-2 * np.eye(2))
    assert np.array_equal(x_new, x) or np.allclose(x_new, x, atol=1e-15)


def test_huge_measurement_noise_ignores_measurement():
    cfg = SigmaConfig(j=1)
    x_new, _ = ukf_step(np.array([1.0]), np.eye(1), np.array([50.0]), cfg, 1e-3 * np.eye(1), 1e12 * np.eye(1))
    assert abs(x_new[0] - 1.0) < 1e-4


def random_spd(rng, j, scale=1.0):
    m = rng.normal(size=(j, j))
    return scale * (m @ m.T + j * np.eye(j)) / j


@pytest.mark.parametrize("j", [1, 2])
def test_linear_system_matches_kalman(j):
    rng = np.random.default_rng(j)
    f = np.eye(j) + 0.1 * rng.normal(size=(j, j))
    h = np.eye(j) + 0.2 * rng.normal(size=(j, j))
    q, r = random_spd(rng, j, 0.1), random_spd(rng, j, 0.5)
    cfg = SigmaConfig(j=j)
    xu = xk = np.zeros(j)
    pu = pk = np.eye(j)
    for _ in range(100):
        z = rng.normal(size=j)
        xu, pu = ukf_step(xu, pu, z, cfg, q, r, fx=lambda s: f @ s, hx=lambda s: h @ s)
        xk, pk = kalman_step(xk, pk, z, f, h, q, r)
        np.testing.assert_allclose(xu, xk, atol=1e-6)
        np.testing.assert_allclose(pu, pk, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_covariance_stays_symmetric_psd(seed):
    rng = np.random.default_rng(seed)
    j = int(rng.integers(1, 4))
    cfg = SigmaConfig(j=j)
    q, r = random_spd(rng, j, 0.01), random_spd(rng, j, 0.1)
    x, p = np.zeros(j), random_spd(rng, j)
    for _ in range(35):
        x, p = ukf_step(x, p, rng.normal(size=j) * 3, cfg, q, r)
        assert np.abs(p - p.T).max() < 1e-10
        assert np.linalg.eigvalsh(p).min() > -1e-8


def test_cached_gains_match_stepwise_filter():
    cfg = SigmaConfig(j=3)
    qn, rn = 0.1 * np.eye(3), 1e-2 * np.eye(3)
    z = np.random.default_rng(5).normal(size=(25, 3))
    states, _ = run_filter(z, cfg, qn, rn)
    out = filter_node(diff.tensor(z, requires_grad=True), cfg, qn, rn)
    np.testing.assert_allclose(out.value, states, atol=1e-12)
    assert gain_schedule(25, cfg, qn, rn) is gain_schedule(25, cfg, qn, rn)


@pytest.mark.parametrize("exact", [False, True])
def test_filter_gradients(exact):
    cfg = SigmaConfig(j=2)
    qn, rn = 0.1 * np.eye(2), 1e-2 * np.eye(2)
    z = diff.tensor(np.random.default_rng(6).normal(size=(6, 2)), requires_grad=True)
    weights = np.random.default_rng(7).normal(size=(6, 2))
    with diff.Tape() as tape:
        loss = diff.sum(filter_node(z, cfg, qn, rn, through_filter=exact) * weights)
    tape.backward(loss)
    if exact:
        # the filter is linear in z, so the exact gradient matches finite differences
        report = diff.grad_check(lambda v: diff.sum(filter_node(v, cfg, qn, rn, True) * weights), [z])
        assert report["passed"]
    else:
        np.testing.assert_allclose(z.grad, weights)


# ---------------------------------------------------------------- full layer


def small_model(f=2, t=4, seed=0, **kw):
    return GLL(GLLConfig(n_features=f, n_steps=t, hidden=3, ffn_hidden=5, expert_hidden=4, n_experts=2, **kw), seed=seed)


def test_cfe_matches_scripted_trace():
    model = small_model(identity_init=False)
    p = model.params
    rng = np.random.default_rng(8)
    prop = rng.normal(size=(4, 2))
    xg = rng.normal(size=(4, 2))
    got = model.cfe(prop, xg).value

    hidden = np.hstack([prop[:, [f]] @ p[f"gcn{f}.w"].value + p[f"gcn{f}.b"].value for f in range(2)])
    h = np_mlp(hidden, p, "ffn1")
    x = np_mlp(xg, p, "ffn2")
    w = 1 / (1 + np.exp(-p["fuse"].value))
    z = w * h + (1 - w) * x
    cfg = model.cfg.sigma
    state, cov = np.zeros(2), np.eye(2)
    for t in range(4):
        state, cov = ukf_step(state, cov, z[t], cfg, model.qn, model.rn)
        np.testing.assert_allclose(got[t], state, atol=1e-12)


def test_fusion_saturation():
    model = small_model()
    rng = np.random.default_rng(9)
    hidden = diff.tensor(rng.normal(size=(4, 6)))
    model.params["fuse"].value[:] = 50.0
    a = model.measurement(hidden, rng.normal(size=(4, 2))).value
    b = model.measurement(hidden, rng.normal(size=(4, 2))).value
    np.testing.assert_allclose(a, b, atol=1e-15)


def test_symmetric_fusion():
    model = small_model(identity_init=False)
    p = model.params
    model.params["fuse"].value[:] = 0.0
    xg = np.random.default_rng(10).normal(size=(4, 2))
    # make ffn1 ignore its input and reproduce ffn2(xg) by feeding the same features
    hidden = np.hstack([xg, np.zeros((4, 4))])
    p["ffn1.w1"].value[:] = np.vstack([p["ffn2.w1"].value, np.zeros((4, 5))])
    for name in ("b1", "w2", "b2"):
        p[f"ffn1.{name}"].value[:] = p[f"ffn2.{name}"].value
    z = model.measurement(diff.tensor(hidden), xg).value
    np.testing.assert_allclose(z, np_mlp(xg, p, "ffn2"), atol=1e-14)


def test_identity_init_reproduces_input():
    model = small_model()
    x = np.random.default_rng(11).normal(size=(4, 2))
    for e in range(2):
        np.testing.assert_allclose(mlp(diff.tensor(x), model.params, f"expert{e}").value, x, atol=1e-15)


def moe_scalar(states, p, n_experts):
    total = np.zeros_like(states[0])
    for h in states:
        logits = h @ p["gate.w"].value + p["gate.b"].value
        g = np.exp(logits - logits.max(axis=1, keepdims=True))
        g /= g.sum(axis=1, keepdims=True)
        for t in range(h.shape[0]):
            for e in range(n_experts):
                total[t] += g[t, e] * np_mlp(h[t : t + 1], p, f"expert{e}")[0]
    return total / len(states)


def test_moe_matches_scalar_and_is_order_invariant():
    model = small_model(identity_init=False)
    rng = np.random.default_rng(12)
    states = [rng.normal(size=(4, 2)) for _ in range(2)]
    got = moe_forward([diff.tensor(s) for s in states], model.params, 2).value
    np.testing.assert_allclose(got, moe_scalar(states, model.params, 2), atol=1e-12)
    flipped = moe_forward([diff.tensor(s) for s in states[::-1]], model.params, 2).value
    np.testing.assert_allclose(flipped, got, atol=1e-14)
    with pytest.raises(ValueError):
        moe_forward([], model.params, 2)


def test_moe_single_expert_and_identical_experts():
    one = GLL(GLLConfig(2, 4, hidden=3, n_experts=1, identity_init=False), seed=1)
    rng = np.random.default_rng(13)
    states = [rng.normal(size=(4, 2)) for _ in range(3)]
    got = moe_forward([diff.tensor(s) for s in states], one.params, 1).value
    want = np.mean([np_mlp(s, one.params, "expert0") for s in states], axis=0)
    np.testing.assert_allclose(got, want, atol=1e-12)

    two = small_model(identity_init=False)
    for name in ("w1", "b1", "w2", "b2"):
        two.params[f"expert1.{name}"].value[:] = two.params[f"expert0.{name}"].value
    got = moe_forward([diff.tensor(states[0])], two.params, 2).value
    np.testing.assert_allclose(got, np_mlp(states[0], two.params, "expert0"), atol=1e-12)


def test_forward_needs_inputs():
    with pytest.raises(ValueError):
        small_model().forward([], np.zeros((4, 2)))


def test_params_round_trip():
    a = small_model(seed=1)
    b = small_model(seed=2)
    b.params.load(a.params.to_dict())
    for (name, x), (_, y) in zip(a.params.items(), b.params.items()):
        assert np.array_equal(x.value, y.value), name
    bad = a.params.to_dict()
    bad["fuse"] = [[0.0]]
    with pytest.raises(ValueError):
        b.params.load(bad)


def test_all_parameters_pass_grad_check():
    model = small_model(identity_init=False, through_filter=True)
    rng = np.random.default_rng(14)
    props = [rng.normal(size=(4, 2)) for _ in range(2)]
    xg = rng.normal(size=(4, 2))
    target = rng.normal(size=(4, 2))

    def loss(*_):
        out = model.forward(props, xg)
        return diff.mean(diff.square(out - target))

    report = diff.grad_check(loss, model.params.tensors())
    assert report["passed"], report
