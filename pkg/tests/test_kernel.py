import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ptrchoice import kernel as K


def grads_of(build, store):
    with K.Tape() as tape:
        loss = build()
    return K.backward(tape, loss, store)


def fd_check(build, store, tol=1e-6):
    analytic = grads_of(build, store)
    numeric = K.numerical_gradient(lambda: build().item(), store, step=1e-5)
    return K.max_relative_error(analytic, numeric)


# --- masked softmax -----------------------------------------------------------


def test_masked_softmax_uniform():
    p = K.masked_softmax(K.Tensor([0.0, 0.0, 0.0]), [True, True, True]).data
    np.testing.assert_allclose(p, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_masked_softmax_two_way_with_masked_large_score():
    p = K.masked_softmax(K.Tensor([5.0, -2.0, 99.0]), [True, True, False]).data
    z = math.exp(5.0) + math.exp(-2.0)
    assert p[0] == pytest.approx(math.exp(5.0) / z, abs=1e-15)
    assert p[1] == pytest.approx(math.exp(-2.0) / z, abs=1e-15)
    assert p[2] == 0.0


def test_masked_softmax_rejects_all_false_and_shape_mismatch():
    with pytest.raises(K.KernelError):
        K.masked_softmax(K.Tensor([1.0, 2.0]), [False, False])
    with pytest.raises(K.KernelError):
        K.masked_softmax(K.Tensor([1.0, 2.0]), [True])


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, st.integers(1, 12), elements=st.floats(-700, 700)),
    st.data(),
)
def test_masked_softmax_is_probability_vector(scores, data):
    mask = np.array(data.draw(st.lists(st.booleans(), min_size=len(scores), max_size=len(scores))))
    mask[data.draw(st.integers(0, len(scores) - 1))] = True
    p = K.masked_softmax(K.Tensor(scores), mask).data
    assert np.all(np.isfinite(p))
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p[~mask] == 0.0)
    assert np.all(p >= 0)


def test_tanh_zero():
    assert K.tanh(K.Tensor(0.0)).item() == 0.0


# --- backward -----------------------------------------------------------------


def test_backward_linear_sum():
    store = K.ParamStore({"W": np.array([[1.0, -2.0], [3.0, 0.5]])})
    g = grads_of(lambda: K.sum_(store["W"]), store)
    np.testing.assert_array_equal(g["W"], np.ones((2, 2)))


def test_backward_tanh_at_zero():
    store = K.ParamStore({"W": np.zeros((2, 2))})
    g = grads_of(lambda: K.sum_(K.tanh(store["W"])), store)
    np.testing.assert_array_equal(g["W"], np.ones((2, 2)))


def test_backward_twice_is_error():
    store = K.ParamStore({"W": np.ones(3)})
    with K.Tape() as tape:
        loss = K.sum_(store["W"])
    K.backward(tape, loss, store)
    with pytest.raises(K.KernelError):
        K.backward(tape, loss, store)


def test_backward_rejects_non_scalar_loss():
    store = K.ParamStore({"W": np.ones(3)})
    with K.Tape() as tape:
        out = K.tanh(store["W"])
    with pytest.raises(K.KernelError):
        K.backward(tape, out, store)


def test_unused_parameter_gets_zero_gradient():
    store = K.ParamStore({"a": np.ones(2), "b": np.ones(3)})
    g = grads_of(lambda: K.sum_(store["a"]), store)
    np.testing.assert_array_equal(g["b"], np.zeros(3))


def test_non_finite_result_raises():
    with pytest.raises(K.KernelError):
        K.log(K.Tensor([0.0, 1.0]))
    with np.errstate(over="ignore"), pytest.raises(K.KernelError):
        K.matmul(K.Tensor([[1e308, 1e308]]), K.Tensor([[1e308], [1e308]]))


def test_matmul_shape_mismatch():
    with pytest.raises(K.KernelError):
        K.matmul(K.Tensor(np.ones((2, 3))), K.Tensor(np.ones((2, 3))))


def test_random_five_parameter_graph_matches_finite_differences(rng):
    store = K.ParamStore({f"p{i}": rng.normal(size=()) for i in range(5)})

    def build():
        a, b, c, d, e = (K.reshape(store[f"p{i}"], (1,)) for i in range(5))
        h = K.tanh(K.add(K.elementwise_mul(a, b), c))
        s = K.sigmoid(K.sub(d, K.elementwise_mul(h, e)))
        q = K.masked_softmax(K.concat([h, s, a], axis=0), [True, True, True])
        return K.sum_(K.log(K.add(q, K.elementwise_mul(e, e))))

    assert fd_check(build, store) < 1e-6


def test_composite_graph_covers_every_primitive(rng):
    store = K.ParamStore(
        {
            "W": rng.normal(size=(3, 4)),
            "E": rng.normal(size=(5, 3)),
            "v": rng.normal(size=(4,)),
        }
    )
    ids = np.array([[0, 4, 2], [1, 1, 3]])
    mask = np.array([[True, True, False], [True, True, True]])

    def build():
        x = K.row_select(store["E"], ids)  # (2,3,3)
        h = K.tanh(K.matmul(x, store["W"]))  # (2,3,4)
        parts = K.split(h, 2, axis=-1)
        h2 = K.concat([K.sigmoid(parts[0]), K.neg(parts[1])], axis=-1)
        rows = K.unstack(h2, axis=1)
        h3 = K.stack([K.scale(r, 0.7) for r in rows], axis=1)
        u = K.sum_(K.elementwise_mul(h3, K.reshape(store["v"], (1, 1, 4))), axis=-1)
        p = K.masked_softmax(u, mask)
        chosen = K.pick(p, [1, 2])
        extra = K.sum_(K.index(K.transpose(store["W"]), (slice(0, 2), 1)))
        return K.add(K.neg(K.sum_(K.log(chosen))), K.scale(extra, 0.1))

    assert fd_check(build, store) < 1e-6


# --- clipping and Adagrad -----------------------------------------------------


def test_clip_unchanged_below_threshold():
    g = {"a": np.array([0.0, 4.0])}
    out = K.clip_global_norm(g, 8.0)
    np.testing.assert_array_equal(out["a"], [0.0, 4.0])


def test_clip_scales_to_threshold():
    out = K.clip_global_norm({"a": np.array([6.0, 8.0])}, 8.0)
    np.testing.assert_allclose(out["a"], [4.8, 6.4], rtol=1e-15)


def test_clip_zero_gradients():
    out = K.clip_global_norm({"a": np.zeros(3)}, 8.0)
    np.testing.assert_array_equal(out["a"], np.zeros(3))


@given(st.lists(arrays(np.float64, st.integers(1, 5), elements=st.floats(-1e3, 1e3)), min_size=1, max_size=4),
       st.floats(1e-3, 100))
def test_clip_post_norm_bounded(gs, threshold):
    out = K.clip_global_norm({str(i): g for i, g in enumerate(gs)}, threshold)
    assert K.global_norm(out) <= threshold + 1e-9


def test_adagrad_two_steps():
    store = K.ParamStore({"w": np.zeros(1)})
    K.adagrad_step(store, {"w": np.ones(1)}, lr=0.1, eps=1e-8)
    first = store["w"].data[0]
    assert first == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-15)
    K.adagrad_step(store, {"w": np.ones(1)}, lr=0.1, eps=1e-8)
    assert store["w"].data[0] - first == pytest.approx(-0.1 / (math.sqrt(2) + 1e-8), abs=1e-15)
    assert store.accumulators["w"][0] == 2.0


def test_adagrad_zero_gradient_leaves_params():
    store = K.ParamStore({"w": np.array([1.5, -2.0])})
    K.adagrad_step(store, {"w": np.zeros(2)}, lr=0.1)
    np.testing.assert_array_equal(store["w"].data, [1.5, -2.0])
    assert np.all(store.accumulators["w"] >= 0)
