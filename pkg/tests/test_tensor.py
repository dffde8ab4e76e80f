import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from coal import container, gradcheck
from coal import tensor as T
from coal.nn import Linear, MultiHeadCrossAttention
from coal.optim import AdamWState, adamw_step
from coal.tensor import NumericalError, Parameter, Tensor, TapeError

finite = st.floats(-10, 10, allow_nan=False, width=64)


# ---- matmul ---------------------------------------------------------------


def test_matmul_identity_and_zero(f64, rng):
    a = rng.normal(size=(3, 3))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)
    np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(np.zeros((3, 2)))).data, np.zeros((3, 2)))


@pytest.mark.parametrize("exact", [False, True])
def test_matmul_triple_loop_oracle(f64, rng, exact):
    a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 2))
    want = np.zeros((4, 2))
    for i in range(4):
        for j in range(2):
            for k in range(5):
                want[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(T.matmul(Tensor(a), Tensor(b), exact=exact).data, want, atol=1e-6)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@settings(max_examples=40, deadline=None)
@given(rows=st.integers(1, 6), keep=st.integers(0, 5), seed=st.integers(0, 10_000))
def test_exact_matmul_rows_do_not_depend_on_neighbours(rows, keep, seed):
    """Each output row, and each row's weight-gradient share, is bit-identical with or without other rows."""
    keep = min(keep, rows - 1)
    r = np.random.default_rng(seed)
    a, w = r.normal(size=(rows, 7)).astype(np.float32), r.normal(size=(7, 3)).astype(np.float32)
    g = r.normal(size=(rows, 3)).astype(np.float32)
    full = T.matmul(Tensor(a), Tensor(w), exact=True).data
    alone = T.matmul(Tensor(a[keep : keep + 1]), Tensor(w), exact=True).data
    np.testing.assert_array_equal(full[keep : keep + 1], alone)
    # zero gradient on every other row: the weight gradient equals the single-row one
    g_masked = np.zeros_like(g)
    g_masked[keep] = g[keep]
    _, gw_full = T.OPS["matmul"].backward((a, w, True), g_masked, (True, True))
    _, gw_alone = T.OPS["matmul"].backward((a[keep : keep + 1], w, True), g[keep : keep + 1], (True, True))
    np.testing.assert_array_equal(gw_full, gw_alone)


# ---- softmax --------------------------------------------------------------


def test_softmax_examples(f64):
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(3))).data, np.full(3, 1 / 3))
    np.testing.assert_allclose(T.softmax(Tensor(np.array([1000.0, 0.0]))).data, [1.0, 0.0], atol=1e-6)
    x = np.array([1.0, 2.0, 3.0])
    np.testing.assert_allclose(T.softmax(Tensor(x)).data, np.exp(x) / np.exp(x).sum(), rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5), elements=finite))
def test_softmax_rows_positive_and_normalized(x):
    with T.precision(np.float64):
        y = T.softmax(Tensor(x), axis=-1).data
    assert np.all(y > 0)
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-6)


def test_masked_softmax_pins_excluded_slots_to_zero(f64):
    mask = np.array([[True, False, True]])
    y = T.softmax(Tensor(np.array([[0.3, 50.0, -0.2]])), mask=mask).data
    assert y[0, 1] == 0.0
    np.testing.assert_allclose(y[0, [0, 2]], np.exp([0.3, -0.2]) / np.exp([0.3, -0.2]).sum())
    with pytest.raises(ValueError):
        T.softmax(Tensor(np.zeros((1, 2))), mask=np.array([[False, False]]))


# ---- bilinear sampling ----------------------------------------------------


def test_bilinear_on_grid_and_center(f64, rng):
    fmap = rng.normal(size=(4, 5, 3))
    point = np.array([[3 / 4, 2 / 3]])  # column 3, row 2
    np.testing.assert_allclose(T.bilinear_sample(Tensor(fmap), Tensor(point)).data[0], fmap[2, 3], atol=1e-12)
    small = rng.normal(size=(2, 2, 3))
    out = T.bilinear_sample(Tensor(small), Tensor(np.array([[0.5, 0.5]]))).data[0]
    np.testing.assert_allclose(out, small.reshape(4, 3).mean(axis=0), atol=1e-12)


def _four_weight_oracle(fmap, x, y):
    h, w, _ = fmap.shape
    px, py = min(max(x, 0), 1) * (w - 1), min(max(y, 0), 1) * (h - 1)
    x0, y0 = min(int(np.floor(px)), w - 2), min(int(np.floor(py)), h - 2)
    fx, fy = px - x0, py - y0
    return (
        fmap[y0, x0] * (1 - fx) * (1 - fy)
        + fmap[y0, x0 + 1] * fx * (1 - fy)
        + fmap[y0 + 1, x0] * (1 - fx) * fy
        + fmap[y0 + 1, x0 + 1] * fx * fy
    )


@settings(max_examples=60, deadline=None)
@given(
    h=st.integers(2, 6),
    w=st.integers(2, 6),
    x=st.floats(-0.3, 1.3),
    y=st.floats(-0.3, 1.3),
    seed=st.integers(0, 1000),
)
def test_bilinear_matches_explicit_weights(h, w, x, y, seed):
    fmap = np.random.default_rng(seed).normal(size=(h, w, 3))
    with T.precision(np.float64):
        out = T.bilinear_sample(Tensor(fmap), Tensor(np.array([[x, y]]))).data[0]
    np.testing.assert_allclose(out, _four_weight_oracle(fmap, x, y), atol=1e-6)


# ---- cosine ---------------------------------------------------------------


def test_cosine_examples(f64):
    u = Tensor(np.array([1.0, 2.0, -1.0]))
    assert T.cosine_similarity(u, u).item() == pytest.approx(1.0, abs=1e-7)
    assert T.cosine_similarity(u, -u).item() == pytest.approx(-1.0, abs=1e-7)
    v = T.cosine_similarity(Tensor(np.array([1.0, 0.0])), Tensor(np.array([1.0, 1.0]))).item()
    assert v == pytest.approx(0.7071, abs=1e-4)
    assert T.cosine_similarity(Tensor(np.zeros(3)), Tensor(np.zeros(3))).item() == 0.0


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (2, 4), elements=finite))
def test_cosine_bounded(x):
    with T.precision(np.float64):
        c = T.cosine_similarity(Tensor(x[0]), Tensor(x[1])).item()
    assert -1 - 1e-6 <= c <= 1 + 1e-6


# ---- tape and backward ----------------------------------------------------


def test_backward_linear_and_constant(f64):
    w = Parameter(np.array([0.3, -1.0, 2.0]), name="w")
    with T.Tape():
        grads = T.backward(w.sum(), [w])
    np.testing.assert_array_equal(grads["w"].data, [1.0, 1.0, 1.0])
    with T.Tape():
        grads = T.backward(T.cosine_similarity(w, w), [w])
    np.testing.assert_allclose(grads["w"].data, 0.0, atol=1e-6)


def test_backward_frozen_absent_and_unused_zero(f64):
    used = Parameter(np.ones(2), name="used")
    unused = Parameter(np.ones(3), name="unused")
    frozen = Parameter(np.ones(2), name="frozen", frozen=True)
    with T.Tape():
        loss = (used * frozen).sum()
        grads = T.backward(loss, [used, unused, frozen])
    assert set(grads) == {"used", "unused"}
    np.testing.assert_array_equal(grads["unused"].data, np.zeros(3))


def test_backward_errors(f64):
    w = Parameter(np.ones(2), name="w")
    with T.Tape():
        with pytest.raises(ValueError):
            T.backward(w * 2.0)
    with pytest.raises(TapeError):
        T.backward((w * 2.0).sum())


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_is_an_error(f64):
    with pytest.raises(NumericalError):
        T.exp(Tensor(np.array([1000.0])))
    with pytest.raises(NumericalError):
        T.log(Tensor(np.array([0.0])))


def test_tape_is_topological(f64):
    x = Tensor(np.ones(3), requires_grad=True)
    with T.Tape() as tape:
        y = (x * 2.0 + 1.0).sum()
        T.grad(y, [x])
    seen = set()
    for node in tape.nodes:
        for t in node.inputs:
            if t._node is not None:
                assert t._node[1] in seen
        seen.add(len(seen))


def test_precision_switch():
    assert T.default_dtype() == np.float32
    with T.precision(np.float64):
        assert Tensor([1.0]).dtype == np.float64
    assert Tensor([1.0]).dtype == np.float32


def test_scatter_add_matches_add_at(rng):
    rows = rng.integers(0, 5, size=40)
    values = rng.normal(size=(40, 3))
    want = np.zeros((5, 3))
    np.add.at(want, rows, values)
    got = T.scatter_add(np.zeros((5, 3)), rows, values)
    np.testing.assert_allclose(got, want, atol=1e-12)


# ---- gradient checks ------------------------------------------------------


@pytest.mark.parametrize("case", gradcheck.OP_CASES, ids=lambda c: c.name)
def test_op_gradient(case):
    rng = np.random.default_rng(5)
    result = gradcheck.check_function(case.name, case.fn, case.inputs(rng))
    assert result.passed, result


def test_every_registered_op_has_a_case():
    assert set(T.OPS) == {case.op for case in gradcheck.OP_CASES}


def test_corrupted_vjp_is_reported(monkeypatch):
    original = T.OPS["exp"]
    broken = T.OpDef("exp", original.forward, lambda s, g, needs: (2.0 * g * s,))
    monkeypatch.setitem(T.OPS, "exp", broken)
    results = {r.name: r for r in gradcheck.check_ops()}
    assert not results["exp"].passed
    assert results["log"].passed
    assert "FAIL  exp" in gradcheck.format_report(list(results.values()))


def test_attention_gradients(f64, rng):
    attn = MultiHeadCrossAttention(4, 2, rng, np.float64)
    attn_params = attn.parameters()
    for i, p in enumerate(attn_params):
        p.name = f"p{i}"
    q, kv = rng.normal(size=(2, 4)), rng.normal(size=(3, 4))
    weights = rng.normal(size=(2, 4))

    def loss():
        return float((attn(Tensor(q), Tensor(kv), Tensor(kv)).data * weights).sum())

    with T.Tape():
        out = (attn(Tensor(q), Tensor(kv), Tensor(kv)) * Tensor(weights)).sum()
        grads = T.backward(out, attn_params)
    for p in attn_params:
        numeric = gradcheck.numeric_gradient(loss, p.data)
        assert gradcheck.relative_error(grads[p.name].data, numeric) <= 1e-4


# ---- attention ------------------------------------------------------------


def test_attention_single_key_ignores_query(f64, rng):
    attn = MultiHeadCrossAttention(4, 2, rng, np.float64)
    v = rng.normal(size=(1, 4))
    a = attn(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4))), Tensor(v)).data
    want = attn.out_proj(attn.v_proj(Tensor(v))).data
    np.testing.assert_allclose(a, np.repeat(want, 3, axis=0), atol=1e-12)


def test_attention_hand_computed_gram(f64, rng):
    attn = MultiHeadCrossAttention(3, 1, rng, np.float64)
    for lin in (attn.q_proj, attn.k_proj, attn.v_proj, attn.out_proj):
        lin.weight.data = np.eye(3)
        lin.bias.data = np.zeros(3)
    x = np.eye(3)
    weights = attn.attention_weights(Tensor(x[None]), Tensor(x[None])).data[0, 0]
    scale = 1 / np.sqrt(3)
    e, o = np.exp(scale), 1.0
    want = np.full((3, 3), o / (e + 2 * o))
    np.fill_diagonal(want, e / (e + 2 * o))
    np.testing.assert_allclose(weights, want, atol=1e-12)


def test_attention_heads_must_divide():
    with pytest.raises(ValueError):
        MultiHeadCrossAttention(6, 4, np.random.default_rng(0))


def test_linear_init_bounds(rng):
    lin = Linear(16, 4, rng)
    assert np.all(np.abs(lin.weight.data) <= 0.25)
    assert np.all(lin.bias.data == 0)


# ---- optimizer ------------------------------------------------------------


def test_adamw_zero_gradient_fixed_point():
    p = Parameter(np.array([1.0, -2.0]), name="p")
    adamw_step([p], {"p": Tensor(np.zeros(2))}, AdamWState(), weight_decay=0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_scalar_oracle():
    p = Parameter(np.array([1.0]), name="w", dtype=np.float64)
    lr, b1, b2, wd, eps = 1e-4, 0.9, 0.999, 0.01, 1e-8
    g = 2.0  # d/dw w^2 at w = 1
    adamw_step([p], {"w": Tensor(np.array([g]))}, AdamWState(), lr=lr, betas=(b1, b2), weight_decay=wd, eps=eps)
    m_hat = (1 - b1) * g / (1 - b1)
    v_hat = (1 - b2) * g * g / (1 - b2)
    want = 1.0 * (1 - lr * wd) - lr * m_hat / (np.sqrt(v_hat) + eps)
    assert p.data[0] == pytest.approx(want, abs=1e-8)


def test_adamw_skips_frozen_and_requires_gradients():
    frozen = Parameter(np.ones(2), name="f", frozen=True)
    live = Parameter(np.ones(2), name="l")
    adamw_step([frozen, live], {"l": Tensor(np.ones(2))}, AdamWState())
    np.testing.assert_array_equal(frozen.data, np.ones(2))
    with pytest.raises(KeyError):
        adamw_step([live], {}, AdamWState())


# ---- container ------------------------------------------------------------


def test_container_round_trip_bit_exact(tmp_path, rng):
    entries = {
        "a": rng.normal(size=(2, 3)).astype(np.float32),
        "b/c": rng.normal(size=(4,)),
        "scalar": np.array(3.5),
    }
    path = tmp_path / "t.bin"
    container.save(path, entries)
    back = container.load(path)
    assert container.keys(path) == ["a", "b/c", "scalar"]
    for k, v in entries.items():
        assert back[k].dtype == v.dtype
        assert back[k].tobytes() == v.tobytes()
    assert path.read_bytes()[:4] == b"COAL"


def test_container_rejects_bad_magic_and_truncation(tmp_path):
    blob = container.dumps({"x": np.ones(3)})
    with pytest.raises(container.ContainerError):
        container.loads(b"NOPE" + blob[4:])
    with pytest.raises(container.ContainerError):
        container.loads(blob[:-3])
