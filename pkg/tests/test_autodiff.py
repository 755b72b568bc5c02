import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from harmodt import autodiff as ad
from harmodt.autodiff import LayoutBuilder, MaskedAdam, ParamVector, Tape
from harmodt.exceptions import ConfigurationError, DataError, DomainError, StateError


def small_layout():
    b = LayoutBuilder()
    b.linear("w1", 3, 4)
    b.bias("b1", 4)
    b.linear("w2", 4, 1)
    b.bias("b2", 1)
    return b.build()


def two_layer_loss(tape, x, y):
    h = ad.tanh(ad.linear(tape.constant(x), tape.param("w1"), tape.param("b1")))
    return ad.mse(ad.linear(h, tape.param("w2"), tape.param("b2")), y)


def rel_err(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


# ---------------------------------------------------------------- layout


def test_layout_is_contiguous_and_covers_vector():
    layout = small_layout()
    assert [s.offset for s in layout] == [0, 12, 16, 20]
    p = ParamVector(layout)
    assert len(p) == 21
    assert p.view("w1").shape == (3, 4)


def test_linear_segment_size_must_match_fans():
    with pytest.raises(ConfigurationError):
        ad.LayerSegment("w", 0, 5, 2, 3, "linear-weight", (2, 3))


def test_param_vector_length_is_fixed():
    p = ParamVector(small_layout())
    with pytest.raises(ConfigurationError):
        p.with_values(np.zeros(5))


# ---------------------------------------------------------------- forward ops


def test_relu_example():
    tape = Tape(np.zeros(0), [])
    assert ad.relu(tape.constant(np.array([-1.0, 0.0, 2.0]))).value.tolist() == [0, 0, 2]


def test_softmax_symmetric():
    tape = Tape(np.zeros(0), [])
    assert np.allclose(ad.softmax(tape.constant(np.zeros(2))).value, [0.5, 0.5])


def test_single_token_attention_returns_value():
    tape = Tape(np.zeros(0), [])
    v = np.array([[[1.5, -2.0, 0.25, 4.0]]])
    q = tape.constant(np.ones_like(v))
    out = ad.causal_attention(q, tape.constant(np.ones_like(v)), tape.constant(v), n_heads=2)
    assert np.array_equal(out.value, v)


def test_shape_mismatch_is_configuration_error():
    tape = Tape(np.zeros(0), [])
    with pytest.raises(ConfigurationError):
        ad.add(tape.constant(np.zeros(3)), tape.constant(np.zeros(4)))
    with pytest.raises(ConfigurationError):
        ad.matmul(tape.constant(np.zeros((2, 3))), tape.constant(np.zeros((2, 3))))


def test_log_of_non_positive_is_domain_error():
    tape = Tape(np.zeros(0), [])
    with pytest.raises(DomainError):
        ad.log(tape.constant(np.array(0.0)))
    assert float(ad.log(tape.constant(np.array(np.e))).value) == pytest.approx(1.0)


def test_cross_entropy_matches_direct_formula():
    tape = Tape(np.zeros(0), [])
    logits = np.array([[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]])
    labels = np.array([1, 2])
    got = float(ad.cross_entropy(tape.constant(logits), labels).value)
    z = logits - logits.max(1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(1, keepdims=True))
    assert got == pytest.approx(-logp[[0, 1], labels].mean(), rel=1e-14)


# ---------------------------------------------------------------- backward


def test_identity_read_has_unit_gradient():
    p = ParamVector(small_layout(), np.arange(21, dtype=float))
    tape = Tape.for_params(p)
    loss = tape.param("w1")[1, 2]
    g = tape.backward(loss)
    expected = np.zeros(21)
    expected[1 * 4 + 2] = 1.0
    assert np.array_equal(g, expected)


def test_constant_loss_has_zero_gradient():
    p = ParamVector(small_layout())
    tape = Tape.for_params(p)
    assert np.array_equal(tape.backward(tape.constant(np.array(3.0))), np.zeros(21))


def test_untouched_coordinates_get_exact_zero():
    rng = np.random.default_rng(0)
    p = ParamVector(small_layout(), rng.normal(size=21))
    tape = Tape.for_params(p)
    h = ad.linear(tape.constant(rng.normal(size=(5, 3))), tape.param("w1"), tape.param("b1"))
    g = tape.backward(ad.mean(ad.mul(h, h)))
    assert np.all(g[16:] == 0.0)
    assert np.all(g[:16] != 0.0)


def test_backward_twice_is_state_error():
    p = ParamVector(small_layout())
    tape = Tape.for_params(p)
    loss = ad.total(tape.param("b1"))
    tape.backward(loss)
    with pytest.raises(StateError):
        tape.backward(loss)


def test_backward_of_foreign_node_is_state_error():
    p = ParamVector(small_layout())
    other = Tape.for_params(p)
    with pytest.raises(StateError):
        Tape.for_params(p).backward(ad.total(other.param("b1")))


def test_two_layer_network_matches_finite_differences():
    rng = np.random.default_rng(1)
    layout = small_layout()
    theta = rng.normal(size=21)
    x, y = rng.normal(size=(6, 3)), rng.normal(size=(6, 1))

    def f(th):
        return float(two_layer_loss(Tape(th, layout), x, y).value)

    tape = Tape(theta, layout)
    g = tape.backward(two_layer_loss(tape, x, y))
    assert rel_err(g, ad.finite_difference(f, theta)) < 1e-4


OPS = {
    "relu": ad.relu, "gelu": ad.gelu, "tanh": ad.tanh,
    "softmax": lambda n: ad.softmax(n, axis=-1),
}


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), op=st.sampled_from(sorted(OPS)))
def test_random_compositions_match_finite_differences(seed, op):
    rng = np.random.default_rng(seed)
    b = LayoutBuilder()
    b.linear("w", 4, 6)
    b.bias("b", 6)
    b.norm_scale("g", 6)
    b.bias("beta", 6)
    layout = b.build()
    theta = rng.normal(size=sum(s.size for s in layout))
    x = rng.normal(size=(3, 4))
    # keep ReLU inputs away from the kink so central differences are valid
    shift = 0.0 if op != "relu" else 0.3

    def build(tape):
        h = ad.linear(tape.constant(x), tape.param("w"), tape.param("b"))
        h = ad.layer_norm(h, tape.param("g"), tape.param("beta"))
        h = OPS[op](ad.add(h, tape.constant(np.full(6, shift))))
        return ad.mean(ad.mul(h, h))

    tape = Tape(theta, layout)
    g = tape.backward(build(tape))
    fd = ad.finite_difference(lambda th: float(build(Tape(th, layout)).value), theta)
    assert rel_err(g, fd) < 1e-4


def test_forward_and_backward_are_deterministic_with_dropout():
    rng = np.random.default_rng(2)
    layout = small_layout()
    theta = rng.normal(size=21)
    x = rng.normal(size=(4, 3))

    def run():
        tape = Tape(theta, layout, train=True, seed=[7, 3])
        h = ad.dropout(ad.linear(tape.constant(x), tape.param("w1"), tape.param("b1")), 0.1)
        loss = ad.mean(ad.mul(h, h))
        return float(loss.value), tape.backward(loss)

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2 and np.array_equal(g1, g2)


# ---------------------------------------------------------------- masked steps


def test_masked_step_examples():
    layout = LayoutBuilder()
    layout.bias("v", 2)
    p = ParamVector(layout.build(), np.array([1.0, 1.0]))
    out = ad.apply_masked_step(p, np.array([2.0, 4.0]), np.array([1, 0]), 0.5)
    assert out.values.tolist() == [0.0, 1.0]
    assert ad.apply_masked_step(p, np.array([2.0, 4.0]), np.ones(2), 0.5).values.tolist() == [0.0, -1.0]
    assert ad.apply_masked_step(p, np.array([2.0, 4.0]), np.zeros(2), 0.5).values.tolist() == [1.0, 1.0]


def test_masked_step_length_mismatch():
    layout = LayoutBuilder()
    layout.bias("v", 2)
    p = ParamVector(layout.build())
    with pytest.raises(ConfigurationError):
        ad.apply_masked_step(p, np.zeros(3), np.ones(2), 0.1)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_mask_locality_for_sgd_and_adam(seed):
    rng = np.random.default_rng(seed)
    p = ParamVector(small_layout(), rng.normal(size=21))
    mask = rng.random(21) < 0.5
    grad = rng.normal(size=21) * 1e3
    sgd = ad.apply_masked_step(p, grad, mask, 0.3)
    assert np.array_equal(sgd.values[~mask], p.values[~mask])
    q = p.copy()
    opt = MaskedAdam(21, lr=0.1)
    for _ in range(3):
        opt.step(q, grad, mask)
    assert np.array_equal(q.values[~mask], p.values[~mask])
    assert np.all(q.values[mask] != p.values[mask])


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    p = ParamVector(small_layout(), rng.normal(size=21))
    p.values[0] = np.nextafter(1.0, 2.0)
    ad.save_params(tmp_path / "ckpt", p, {"note": "x"})
    q, meta = ad.load_params(tmp_path / "ckpt")
    assert q.values.tobytes() == p.values.tobytes()
    assert q.layout == p.layout and meta == {"note": "x"}


def test_checkpoint_truncation_and_checksum(tmp_path):
    p = ParamVector(small_layout(), np.ones(21))
    manifest, array = ad.save_params(tmp_path / "c", p)
    data = array.read_bytes()
    array.write_bytes(data[:-8])
    with pytest.raises(DataError, match="offset"):
        ad.load_params(tmp_path / "c")
    array.write_bytes(data[:-1] + b"\x01")
    with pytest.raises(DataError, match="checksum"):
        ad.load_params(tmp_path / "c")
