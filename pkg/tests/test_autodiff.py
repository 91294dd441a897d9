import threading
import zlib

import numpy as np
import pytest

from covflow import autodiff as ad

from _oracles import (GRAPHS, SECOND_ORDER, check_first_order, check_second_order, finite_diff,
                      naive_conv2d, naive_matmul, rel_err)

GRAPH_BY_NAME = {name: (fn, shapes) for name, fn, shapes in GRAPHS}


def trace(fn, **ex):
    return ad.ExprGraph.trace(fn, **{k: np.asarray(v, dtype=float) for k, v in ex.items()})


# ---------------------------------------------------------------- evaluate

def test_evaluate_square():
    g = trace(lambda x: x * x, x=0.0)
    assert ad.evaluate(g, {"x": np.float64(3.0)}) == 9.0


def test_evaluate_sum():
    g = trace(lambda x: ad.sum(x), x=np.zeros(3))
    assert ad.evaluate(g, {"x": np.array([1.0, 2.0, 3.0])}) == 6.0


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    g = trace(lambda w, x: w @ x, w=np.zeros((2, 2)), x=np.zeros((2, 2)))
    w, x = rng.normal(size=(2, 2)), rng.normal(size=(2, 2))
    np.testing.assert_allclose(ad.evaluate(g, {"w": w, "x": x}), naive_matmul(w, x), rtol=0, atol=1e-14)


def test_conv2d_matches_direct_loops():
    rng = np.random.default_rng(2)
    x, w = rng.normal(size=(2, 3, 5, 4)), rng.normal(size=(4, 3, 3, 3))
    np.testing.assert_allclose(ad.conv2d(ad.tensor(x), ad.tensor(w)).data, naive_conv2d(x, w), atol=1e-12)
    w1 = rng.normal(size=(2, 3, 1, 1))
    np.testing.assert_allclose(ad.conv2d(ad.tensor(x), ad.tensor(w1)).data, naive_conv2d(x, w1), atol=1e-12)


def test_shape_mismatch_names_the_node():
    a = ad.tensor(np.zeros(3), name="left")
    b = ad.tensor(np.zeros(4), name="right")
    with pytest.raises(ad.ShapeError, match="left"):
        ad.add(a, b)


def test_bind_rejects_wrong_leaf_shape():
    g = trace(lambda x: ad.sum(x), x=np.zeros(3))
    with pytest.raises(ad.ShapeError, match="'x'"):
        ad.evaluate(g, {"x": np.zeros(4)})


def test_bind_flags_non_finite_intermediate():
    g = trace(lambda x: ad.sum(ad.log(x)), x=np.ones(2))
    with pytest.raises(ad.NonFiniteError, match="log"), np.errstate(invalid="ignore"):
        ad.evaluate(g, {"x": np.array([1.0, -1.0])})


def test_unbound_leaf_rejected():
    g = trace(lambda x, y: ad.sum(x * y), x=np.ones(2), y=np.ones(2))
    with pytest.raises(KeyError):
        ad.evaluate(g, {"x": np.ones(2)})


def test_no_implicit_broadcasting():
    with pytest.raises(ad.ShapeError):
        ad.mul(ad.tensor(np.ones((2, 3))), ad.tensor(np.ones(3)))


def test_graph_nodes_are_topologically_ordered():
    fn, shapes = GRAPH_BY_NAME["coupling"]
    g = trace(fn, **{k: np.zeros(s) for k, s in shapes.items()})
    pos = {n.id: i for i, n in enumerate(g.nodes)}
    for n in g.nodes:
        for inp in n.inputs:
            assert pos[inp.id] < pos[n.id]
    assert g.nodes[-1] is g.output


# ---------------------------------------------------------------- gradient

def test_gradient_of_square():
    g = trace(lambda x: x * x, x=0.0)
    assert ad.gradient(g, ["x"], {"x": np.float64(3.0)})["x"] == 6.0


def test_gradient_of_sum_of_squares():
    g = trace(lambda x: ad.sum(ad.square(x)), x=np.zeros(2))
    np.testing.assert_array_equal(ad.gradient(g, ["x"], {"x": np.array([1.0, -2.0])})["x"], [2.0, -4.0])


def test_gradient_rejects_non_scalar_output():
    g = trace(lambda x: x * x, x=np.zeros(2))
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.gradient(g, ["x"], {"x": np.ones(2)})


@pytest.mark.parametrize("name", [n for n, _, _ in GRAPHS])
def test_gradient_matches_finite_differences(name):
    fn, shapes = GRAPH_BY_NAME[name]
    assert check_first_order(fn, shapes, np.random.default_rng(zlib.crc32(name.encode()))) < 1e-4


def test_conv_tanh_sum_example():
    rng = np.random.default_rng(3)
    fn, shapes = GRAPH_BY_NAME["conv"]
    assert check_first_order(fn, shapes, rng) < 1e-4


def test_linearity_of_gradient():
    rng = np.random.default_rng(4)
    fa, _ = GRAPH_BY_NAME["conv"]
    fb, _ = GRAPH_BY_NAME["deep_conv"]
    x, w = rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(2, 2, 3, 3)) * 0.5
    w3 = np.concatenate([w, w[:1]], axis=0)
    alpha, beta = 0.7, -1.3

    def f(x, w, w3):
        return ad.affine(fa(x, w3), alpha, 0.0) + ad.affine(fb(x, w), beta, 0.0)

    g = trace(f, x=x, w=w, w3=w3)
    got = ad.gradient(g, ["x"], {"x": x, "w": w, "w3": w3})["x"]
    ga = ad.gradient(trace(fa, x=x, w=w3), ["x"], {"x": x, "w": w3})["x"]
    gb = ad.gradient(trace(fb, x=x, w=w), ["x"], {"x": x, "w": w})["x"]
    np.testing.assert_allclose(got, alpha * ga + beta * gb, rtol=0, atol=1e-10)


def test_determinism_bit_identical():
    fn, shapes = GRAPH_BY_NAME["deep_conv"]
    b = {k: np.random.default_rng(5).uniform(-1, 1, s) for k, s in shapes.items()}
    g = trace(fn, **b)
    v1, v2 = ad.evaluate(g, b), ad.evaluate(g, b)
    g1, g2 = ad.gradient(g, list(b), b), ad.gradient(g, list(b), b)
    assert v1.tobytes() == v2.tobytes()
    for k in b:
        assert g1[k].tobytes() == g2[k].tobytes()


def test_concurrent_gradients_on_distinct_bindings():
    fn, shapes = GRAPH_BY_NAME["conv"]
    g = trace(fn, **{k: np.zeros(s) for k, s in shapes.items()})
    binds = [{k: np.random.default_rng(i).uniform(-1, 1, s) for k, s in shapes.items()} for i in range(8)]
    serial = [ad.gradient(g, ["w"], b)["w"] for b in binds]
    out = [None] * len(binds)

    def work(i):
        out[i] = ad.gradient(g, ["w"], binds[i])["w"]

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(binds))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for a, b in zip(serial, out):
        assert a.tobytes() == b.tobytes()


def test_unused_leaf_gets_zero_gradient():
    g = trace(lambda x, y: ad.sum(x * x), x=np.ones(2), y=np.ones(3))
    got = ad.gradient(g, ["x", "y"], {"x": np.ones(2), "y": np.ones(3)})
    np.testing.assert_array_equal(got["y"], np.zeros(3))


def test_grad_of_intermediate():
    x = ad.tensor(np.array([1.0, 2.0]), requires_grad=True)
    h = ad.tanh(x)
    y = ad.sum(ad.square(h))
    gx, gh = ad.grad(y, [x, h])
    np.testing.assert_allclose(gh.data, 2 * np.tanh([1.0, 2.0]))
    np.testing.assert_allclose(gx.data, 2 * np.tanh([1.0, 2.0]) * (1 - np.tanh([1.0, 2.0]) ** 2))


def test_no_grad_records_nothing():
    x = ad.tensor(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.sum(x * x)
    assert not y.requires_grad and y.prim is None


# ---------------------------------------------------------------- second order

def test_gradient_norm_closed_form():
    # f(x; a) = a * sum(x^2); ||df/dx|| = 2|a| ||x||; d/da = 2 ||x||
    g = trace(lambda x, a: ad.sum(ad.broadcast_to(ad.reshape(a, (1,)), x.shape) * ad.square(x)),
              x=np.zeros(2), a=np.zeros(1))
    out = ad.gradient_of_gradient_norm(g, "x", ["a"], {"x": np.array([3.0, 4.0]), "a": np.array([1.0])})
    assert abs(out["a"][0] - 10.0) < 1e-10
    out = ad.gradient_of_gradient_norm(g, "x", ["a"], {"x": np.array([1.0, 0.0]), "a": np.array([2.0])})
    assert abs(out["a"][0] - 2.0) < 1e-10


def test_gradient_norm_quadratic_form():
    # f(x; M) = 0.5 x^T M x
    rng = np.random.default_rng(6)
    m = rng.normal(size=(3, 3))
    m = m + m.T
    x = rng.normal(size=(3, 1))

    def f(x, m):
        return ad.affine(ad.sum(ad.transpose(x, (1, 0)) @ (m @ x)), 0.5, 0.0)

    g = trace(f, x=x, m=m)
    got = ad.gradient_of_gradient_norm(g, "x", ["m"], {"x": x, "m": m})["m"]
    # grad_x = 0.5 (M + M^T) x = v; d||v||/dM = 0.5 (u x^T + x u^T), u = v/||v||
    v = 0.5 * (m + m.T) @ x
    u = v / np.linalg.norm(v)
    expected = 0.5 * (u @ x.T + x @ u.T)
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)


def test_gradient_norm_zero_is_non_differentiable():
    g = trace(lambda x, a: ad.sum(ad.broadcast_to(ad.reshape(a, (1,)), x.shape) * ad.square(x)),
              x=np.zeros(2), a=np.zeros(1))
    with pytest.raises(ad.NonDifferentiableError):
        ad.gradient_of_gradient_norm(g, "x", ["a"], {"x": np.zeros(2), "a": np.array([1.0])})


@pytest.mark.parametrize("name", SECOND_ORDER)
def test_second_order_matches_nested_finite_differences(name):
    fn, shapes = GRAPH_BY_NAME[name]
    assert check_second_order(fn, shapes, np.random.default_rng(7)) < 1e-3


def test_second_order_on_coupling_layer():
    from covflow.layers import Coupling

    rng = np.random.default_rng(8)
    layer = Coupling(1, 4, 4, parity=0, hidden=3, blocks=1, rng=rng)
    for k, v in layer.params.items():
        layer.params[k] = v + rng.normal(scale=0.2, size=v.shape)
    names = sorted(layer.params)

    def f(x, **p):
        y, ld = layer.forward(x, None, p)
        return ad.sum(ad.square(y)) + ad.sum(ld)

    bind = {"x": rng.normal(size=(1, 1, 4, 4)), **{k: layer.params[k] for k in names}}
    g = trace(f, **bind)
    got = ad.gradient_of_gradient_norm(g, "x", ["out.w", "s_scale"], bind)
    for k in ("out.w", "s_scale"):
        def norm(v, k=k):
            return float(np.linalg.norm(ad.gradient(g, ["x"], {**bind, k: v})["x"]))
        assert rel_err(got[k], finite_diff(norm, bind[k])) < 1e-3


def test_scalar_operators_use_affine():
    x = ad.tensor(np.array([1.0, 2.0]), requires_grad=True)
    y = 3.0 - 2.0 * x / 4.0 + 1.0
    assert y.prim.name == "affine"
    np.testing.assert_allclose(y.data, [3.5, 3.0])
    (gx,) = ad.grad(ad.sum(y), [x])
    np.testing.assert_allclose(gx.data, [-0.5, -0.5])
