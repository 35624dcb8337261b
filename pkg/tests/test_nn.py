import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semloc import nn
from semloc.errors import ConfigError, DataError, NumericalError


def naive_mha(store, prefix, X, heads=4):
    """Loop-based reference: per head, per query token, explicit softmax."""
    X = X.copy()
    N, d = X.shape
    dh = d // heads
    l = 0
    while f"{prefix}.l{l}.Wo" in store:
        p = f"{prefix}.l{l}"
        O = np.zeros_like(X)
        for h in range(heads):
            sl = slice(h * dh, (h + 1) * dh)
            for i in range(N):
                s = np.array([X[i, sl] @ X[j, sl] / math.sqrt(dh) for j in range(N)])
                e = np.exp(s - s.max())
                a = e / e.sum()
                O[i, sl] = sum(a[j] * X[j, sl] for j in range(N))
        Y = X + O @ store[f"{p}.Wo"].T + store[f"{p}.bo"]
        H = np.maximum(Y @ store[f"{p}.ffn.W0"].T + store[f"{p}.ffn.b0"], 0)
        X = Y + H @ store[f"{p}.ffn.W1"].T + store[f"{p}.ffn.b1"]
        l += 1
    return X


def mha_store(d=16, seed=0):
    s = nn.ParamStore(seed)
    nn.add_mha(s, "a", d)
    # give the residual branches weight so the check is not dominated by the skip path
    for k in s.params:
        if k.endswith("Wo") or k.endswith("ffn.W1"):
            s.params[k] *= 10.0
    return s


def unit_rows(rng, B, d):
    F = rng.normal(size=(B, d))
    return F / np.linalg.norm(F, axis=1, keepdims=True)


# ---------------------------------------------------------------- MLP

def test_mlp_zero_weights_give_zero():
    s = nn.ParamStore(0)
    nn.add_mlp(s, "m", [5, 7, 3])
    s.zero_()
    assert np.array_equal(nn.mlp_apply(s, "m", np.ones(5)), np.zeros(3))


def test_mlp_identity_passes_nonnegative_input():
    s = nn.ParamStore(0)
    nn.add_mlp(s, "m", [4, 4, 4])
    for k in s.params:
        s.params[k] = np.eye(4) if ".W" in k else np.zeros(4)
    x = np.array([0.0, 1.5, 2.0, 3.0])
    np.testing.assert_array_equal(nn.mlp_apply(s, "m", x), x)


def test_mlp_three_layer_formula():
    rng = np.random.default_rng(1)
    s = nn.ParamStore(1)
    nn.add_mlp(s, "m", [3, 5, 4, 2])
    x = rng.normal(size=3)
    W = [s[f"m.W{i}"] for i in range(3)]
    b = [s[f"m.b{i}"] for i in range(3)]
    ref = W[2] @ np.maximum(W[1] @ np.maximum(W[0] @ x + b[0], 0) + b[1], 0) + b[2]
    np.testing.assert_allclose(nn.mlp_apply(s, "m", x), ref, atol=1e-14)


def test_mlp_shape_mismatch_names_parameter():
    s = nn.ParamStore(0)
    nn.add_mlp(s, "enc", [3, 4])
    with pytest.raises(ValueError, match="enc.W0"):
        nn.mlp_apply(s, "enc", np.ones(5))


def test_mlp_gradient_fd():
    rng = np.random.default_rng(2)
    s = nn.ParamStore(2)
    nn.add_mlp(s, "m", [6, 8, 8, 3])
    X = rng.normal(size=(5, 6))
    T = rng.normal(size=(5, 3))

    def closure(st_):
        y, c = nn.mlp_forward(st_, "m", X)
        g = st_.zeros_like()
        nn.mlp_backward(st_, c, 2 * (y - T), g)
        return float(np.sum((y - T) ** 2)), g

    assert nn.grad_check(closure, s, n_coords=200) < 1e-6


def test_grad_check_linear_model_is_exact():
    rng = np.random.default_rng(0)
    s = nn.ParamStore(0)
    nn.add_mlp(s, "lin", [4, 2])
    X = rng.normal(size=(6, 4))

    def closure(st_):
        y, c = nn.mlp_forward(st_, "lin", X)
        g = st_.zeros_like()
        nn.mlp_backward(st_, c, 2 * y, g)
        return float(np.sum(y ** 2)), g

    assert nn.grad_check(closure, s) < 1e-9


def test_grad_check_skips_relu_kink():
    # hidden pre-activation sits exactly at zero for the first sample
    s = nn.ParamStore(0)
    nn.add_mlp(s, "k", [1, 1, 1])
    s.params["k.W0"][:] = 1.0
    s.params["k.b0"][:] = 0.0
    s.params["k.W1"][:] = 1.0
    X = np.array([[0.0], [1.0]])

    def closure(st_):
        y, c = nn.mlp_forward(st_, "k", X)
        g = st_.zeros_like()
        nn.mlp_backward(st_, c, np.ones_like(y), g)
        return float(y.sum()), g

    assert nn.grad_check(closure, s, n_coords=4) < 1e-6


# ---------------------------------------------------------------- attention

def test_mha_matches_loop_oracle():
    rng = np.random.default_rng(3)
    s = mha_store()
    X = rng.normal(size=(7, 16))
    np.testing.assert_allclose(nn.mha_block(s, "a", X), naive_mha(s, "a", X), atol=1e-10)


def test_mha_zero_weights_is_identity():
    s = mha_store()
    s.zero_()
    X = np.random.default_rng(4).normal(size=(5, 16))
    np.testing.assert_array_equal(nn.mha_block(s, "a", X), X)


def test_mha_singleton_attends_to_itself():
    s = mha_store()
    x = np.random.default_rng(5).normal(size=(1, 16))
    p = "a.l0"
    y = x + x @ s[f"{p}.Wo"].T + s[f"{p}.bo"]
    z = y + nn.mlp_apply(s, f"{p}.ffn", y)
    p = "a.l1"
    y = z + z @ s[f"{p}.Wo"].T + s[f"{p}.bo"]
    z = y + nn.mlp_apply(s, f"{p}.ffn", y)
    np.testing.assert_allclose(nn.mha_block(s, "a", x), z, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_mha_permutation_equivariant(n, seed):
    rng = np.random.default_rng(seed)
    s = mha_store(seed=seed % 7)
    X = rng.normal(size=(n, 16))
    perm = rng.permutation(n)
    np.testing.assert_allclose(nn.mha_block(s, "a", X[perm]), nn.mha_block(s, "a", X)[perm], atol=1e-9)


def test_mha_rejects_width_not_divisible_by_heads():
    with pytest.raises(ConfigError):
        nn.add_mha(nn.ParamStore(0), "a", 10)


def test_mha_gradient_fd():
    rng = np.random.default_rng(6)
    s = mha_store()
    X = rng.normal(size=(6, 16))
    T = rng.normal(size=(6, 16))

    def closure(st_):
        Z, c = nn.mha_forward(st_, "a", X)
        g = st_.zeros_like()
        nn.mha_backward(st_, c, Z - T, g)
        return 0.5 * float(np.sum((Z - T) ** 2)), g

    assert nn.grad_check(closure, s, n_coords=256) < 1e-6


def test_mha_input_gradient_fd():
    rng = np.random.default_rng(7)
    s = mha_store()
    X = rng.normal(size=(4, 16))
    W = rng.normal(size=(4, 16))
    Z, c = nn.mha_forward(s, "a", X)
    dX = nn.mha_backward(s, c, W, s.zeros_like())
    h = 1e-6
    for i, j in [(0, 0), (1, 5), (3, 15), (2, 8)]:
        E = np.zeros_like(X)
        E[i, j] = h
        fd = (np.sum(W * nn.mha_block(s, "a", X + E)) - np.sum(W * nn.mha_block(s, "a", X - E))) / (2 * h)
        assert abs(dX[i, j] - fd) / max(1, abs(fd)) < 1e-6


# ---------------------------------------------------------------- pooling

def pool_store(d=8, seed=0):
    s = nn.ParamStore(seed)
    nn.add_mlp(s, "p", [d, d, d, 1])
    return s


def test_pool_singleton():
    s = pool_store()
    x = np.random.default_rng(0).normal(size=(1, 8))
    desc, w = nn.softmax_pool(s, "p", x)
    np.testing.assert_array_equal(w, [1.0])
    np.testing.assert_allclose(desc, x[0] / np.linalg.norm(x[0]), atol=1e-15)


def test_pool_identical_rows_share_weight():
    s = pool_store()
    x = np.tile(np.random.default_rng(1).normal(size=8), (2, 1))
    _, w = nn.softmax_pool(s, "p", x)
    np.testing.assert_array_equal(w, [0.5, 0.5])


def test_pool_matches_explicit_formula():
    rng = np.random.default_rng(2)
    s = pool_store()
    X = rng.normal(size=(5, 8))
    scores = np.array([nn.mlp_apply(s, "p", x)[0] for x in X])
    w = np.exp(scores) / np.exp(scores).sum()
    v = sum(wi * xi for wi, xi in zip(w, X))
    desc, w_out = nn.softmax_pool(s, "p", X)
    assert abs(w_out.sum() - 1) < 1e-9
    np.testing.assert_allclose(w_out, w, atol=1e-14)
    np.testing.assert_allclose(desc, v / np.linalg.norm(v), atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 10), st.integers(0, 2**31 - 1))
def test_pool_permutation_invariant(n, seed):
    rng = np.random.default_rng(seed)
    s = pool_store(seed=seed % 5)
    X = rng.normal(size=(n, 8))
    a, _ = nn.softmax_pool(s, "p", X)
    b, _ = nn.softmax_pool(s, "p", X[rng.permutation(n)])
    assert np.max(np.abs(a - b)) < 1e-9


def test_pool_gradient_fd():
    rng = np.random.default_rng(3)
    s = pool_store()
    X = rng.normal(size=(6, 8))
    t = rng.normal(size=8)

    def closure(st_):
        desc, _, c = nn.softmax_pool_forward(st_, "p", X)
        g = st_.zeros_like()
        nn.softmax_pool_backward(st_, c, t, g)
        return float(desc @ t), g

    assert nn.grad_check(closure, s) < 1e-6


# ---------------------------------------------------------------- contrastive loss

def test_contrastive_uniform_case():
    B, d = 32, 8
    F = np.zeros((B, d))
    F[:, 0] = 1.0
    assert abs(nn.contrastive_loss(F, F, 0.1) - 2 * math.log(B)) < 1e-9
    assert abs(2 * math.log(32) - 6.9315) < 1e-4


def test_contrastive_perfect_diagonal_case():
    F = np.eye(32)
    expected = 2 * math.log(1 + 31 * math.exp(-10))
    assert abs(nn.contrastive_loss(F, F, 0.1) - expected) < 1e-9
    assert expected == pytest.approx(2.815e-3, rel=1e-3)


def test_contrastive_matches_loop_definition():
    rng = np.random.default_rng(4)
    I, G = unit_rows(rng, 6, 5), unit_rows(rng, 6, 5)
    tau = 0.1
    total = 0.0
    for i in range(6):
        a = np.array([I[i] @ G[j] / tau for j in range(6)])
        b = np.array([G[i] @ I[j] / tau for j in range(6)])
        total += -(a[i] - math.log(np.exp(a).sum())) - (b[i] - math.log(np.exp(b).sum()))
    assert nn.contrastive_loss(I, G, tau) == pytest.approx(total / 6, abs=1e-12)


def test_contrastive_symmetric_under_swap():
    rng = np.random.default_rng(5)
    I, G = unit_rows(rng, 8, 4), unit_rows(rng, 8, 4)
    assert nn.contrastive_loss(I, G, 0.1) == pytest.approx(nn.contrastive_loss(G, I, 0.1), abs=1e-12)


def test_contrastive_gradient_fd():
    rng = np.random.default_rng(6)
    I, G = unit_rows(rng, 5, 4), unit_rows(rng, 5, 4)
    _, dI, dG = nn.contrastive_loss(I, G, 0.1, with_grad=True)
    h = 1e-6

    def loss_raw(I_, G_):
        # same formula without the unit-norm contract, for perturbed inputs
        S = I_ @ G_.T / 0.1
        r = S - np.log(np.exp(S).sum(1, keepdims=True))
        c = S - np.log(np.exp(S).sum(0, keepdims=True))
        return -(np.trace(r) + np.trace(c)) / len(I_)

    for M, D_, first in ((I, dI, True), (G, dG, False)):
        for i, j in [(0, 0), (2, 3), (4, 1)]:
            E = np.zeros_like(M)
            E[i, j] = h
            if first:
                fd = (loss_raw(I + E, G) - loss_raw(I - E, G)) / (2 * h)
            else:
                fd = (loss_raw(I, G + E) - loss_raw(I, G - E)) / (2 * h)
            assert abs(D_[i, j] - fd) / max(1, abs(fd)) < 1e-6


def test_contrastive_contract_violations():
    F = np.eye(4)
    with pytest.raises(ValueError, match="not unit length"):
        nn.contrastive_loss(2 * F, F, 0.1)
    with pytest.raises(ValueError):
        nn.contrastive_loss(F[:1], F[:1], 0.1)


# ---------------------------------------------------------------- Adam

def scalar_store(x0):
    s = nn.ParamStore(0)
    s.add("x", (1,), "zeros")
    s.params["x"][:] = x0
    return s


def test_adam_zero_gradient_keeps_params():
    s = scalar_store(1.0)
    st_ = nn.AdamState.for_params(s, lr=0.1)
    st_.m["x"][:] = 0.5
    nn.adam_step(st_, s, {"x": np.zeros(1)})
    # moment decays; the bias-corrected step is nonzero only through m
    assert st_.m["x"][0] == pytest.approx(0.45)
    assert st_.step == 1


def test_adam_zero_gradient_from_fresh_state():
    s = scalar_store(1.0)
    nn.adam_step(nn.AdamState.for_params(s), s, {"x": np.zeros(1)})
    assert s["x"][0] == 1.0


def test_adam_first_step_magnitude_is_lr():
    s = scalar_store(1.0)
    nn.adam_step(nn.AdamState.for_params(s, lr=0.01), s, {"x": np.array([3.7])})
    assert 1.0 - s["x"][0] == pytest.approx(0.01, rel=1e-6)


def test_adam_minimizes_quadratic():
    s = scalar_store(1.0)
    st_ = nn.AdamState.for_params(s, lr=0.1)
    for _ in range(100):
        nn.adam_step(st_, s, {"x": 2 * s["x"]})
    assert abs(s["x"][0]) < 0.05


def test_adam_rejects_nan():
    s = scalar_store(1.0)
    with pytest.raises(NumericalError, match="'x'"):
        nn.adam_step(nn.AdamState.for_params(s), s, {"x": np.array([np.nan])})


# ---------------------------------------------------------------- store / checkpoints

def test_param_store_deterministic_init():
    a, b = nn.ParamStore(9), nn.ParamStore(9)
    for s in (a, b):
        nn.add_mlp(s, "m", [3, 4, 2])
        nn.add_mha(s, "a", 8)
    assert a.equals(b)
    c = nn.ParamStore(10)
    nn.add_mlp(c, "m", [3, 4, 2])
    nn.add_mha(c, "a", 8)
    assert not a.equals(c)


def test_duplicate_parameter_rejected():
    s = nn.ParamStore(0)
    s.add("w", (2,))
    with pytest.raises(ConfigError):
        s.add("w", (2,))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    s = nn.ParamStore(3)
    nn.add_mlp(s, "m", [3, 4, 2])
    nn.add_mha(s, "a", 8)
    s.params["m.b0"][0] = np.nextafter(1.0, 2.0)
    path = tmp_path / "c.ckpt"
    nn.save_checkpoint(path, s, {"note": "x", "epsilon_db": 12.5})
    t, meta = nn.load_checkpoint(path, expected=s)
    assert t.equals(s)
    assert meta == {"note": "x", "epsilon_db": 12.5}
    nn.save_checkpoint(tmp_path / "d.ckpt", t, meta)
    assert (tmp_path / "d.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_errors(tmp_path):
    s = nn.ParamStore(0)
    nn.add_mlp(s, "m", [3, 4])
    path = tmp_path / "c.ckpt"
    nn.save_checkpoint(path, s)
    blob = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXXXXXX" + blob[8:])
    with pytest.raises(DataError, match="magic"):
        nn.load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(blob[:-8])
    with pytest.raises(DataError, match="expected"):
        nn.load_checkpoint(tmp_path / "short")
    other = nn.ParamStore(0)
    nn.add_mlp(other, "m", [3, 5])
    with pytest.raises(DataError, match="shape"):
        nn.load_checkpoint(path, expected=other)
