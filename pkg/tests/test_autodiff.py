import math
import warnings

import numpy as np
import pytest

from explicd import autodiff as ad
from explicd.autodiff import ShapeError, Tape, Tensor, constant, finite_diff_check


def rand(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_softmax_uniform_on_equal_logits():
    out = ad.softmax(constant([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3, 1 / 3, 1 / 3], rtol=0, atol=1e-15)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(11)
    for _ in range(50):
        x = rand(rng, 4, 6)
        c = rng.uniform(-50, 50)
        a = ad.softmax(constant(x)).data
        b = ad.softmax(constant(x + c)).data
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(12)
    for _ in range(20):
        x = rng.uniform(-30, 30, size=(5, 7))
        s = ad.softmax(constant(x)).data
        np.testing.assert_allclose(s.sum(axis=-1), np.ones(5), rtol=0, atol=1e-12)


def test_softmax_empty_axis_rejected():
    with pytest.raises(ShapeError):
        ad.softmax(constant(np.zeros((3, 0))))
    with pytest.raises(ShapeError):
        ad.log(constant(np.zeros((0,))))


def test_matmul_against_triple_loop():
    rng = np.random.default_rng(13)
    a = rand(rng, 2, 3)
    b = rand(rng, 3, 2)
    expect = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                expect[i, j] += a[i, k] * b[k, j]
    got = ad.matmul(constant(a), constant(b)).data
    np.testing.assert_allclose(got, expect, atol=1e-12)


def test_cross_entropy_matches_scalar_oracle():
    rng = np.random.default_rng(14)
    logits = rand(rng, 4, 5)
    labels = np.array([0, 3, 2, 4])
    # independent oracle: direct -log softmax via math loops
    total = 0.0
    for r in range(4):
        denom = sum(math.exp(v) for v in logits[r])
        total += -math.log(math.exp(logits[r, labels[r]]) / denom)
    expect = total / 4
    got = ad.cross_entropy_with_logits(constant(logits), labels).item()
    assert abs(got - expect) < 1e-12


def test_cross_entropy_single_row_and_label_range():
    got = ad.cross_entropy_with_logits(constant([0.0, 0.0, 0.0]), 1).item()
    assert abs(got - math.log(3.0)) < 1e-15
    with pytest.raises(ValueError):
        ad.cross_entropy_with_logits(constant([0.0, 1.0]), 2)


def test_l2_normalize_unit_norm():
    rng = np.random.default_rng(15)
    x = rng.uniform(-1, 1, size=(6, 8)) + 0.1
    y = ad.l2_normalize(constant(x)).data
    np.testing.assert_allclose(np.linalg.norm(y, axis=-1), np.ones(6), rtol=0, atol=1e-12)


def test_l2_normalize_floor_passthrough_warns():
    x = np.array([[1e-12, 0.0, 0.0], [3.0, 4.0, 0.0]])
    with pytest.warns(UserWarning):
        y = ad.l2_normalize(constant(x)).data
    np.testing.assert_allclose(y[0], x[0], atol=0)  # untouched row
    np.testing.assert_allclose(y[1], [0.6, 0.8, 0.0], atol=1e-15)


def test_shape_errors_name_operation_and_shapes():
    a, b = constant(np.zeros((2, 3))), constant(np.zeros((3, 2)))
    with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(3, 2\)"):
        ad.add(a, b)
    with pytest.raises(ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        ad.matmul(a, constant(np.zeros((2, 3))))


def test_mixed_tapes_rejected():
    t1, t2 = Tape(), Tape()
    with pytest.raises(ValueError, match="different tapes"):
        ad.add(t1.leaf([1.0]), t2.leaf([2.0]))


# ---------------------------------------------------------------------------
# backward basics
# ---------------------------------------------------------------------------

def test_grad_of_sum_is_ones():
    tape = Tape()
    x = tape.leaf(np.arange(12.0).reshape(3, 4))
    grads = tape.backward(x.sum())
    np.testing.assert_array_equal(grads[x], np.ones((3, 4)))


def test_grad_of_half_mean_square_is_x_over_n():
    tape = Tape()
    vals = np.array([[1.0, -2.0], [0.5, 3.0]])
    x = tape.leaf(vals)
    loss = ad.mul(x, x).mean() * 0.5
    grads = tape.backward(loss)
    np.testing.assert_allclose(grads[x], vals / vals.size, atol=1e-15)


def test_backward_rejects_non_scalar():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    with pytest.raises(ShapeError, match="scalar"):
        tape.backward(ad.mul(x, x))


def test_unused_leaf_gets_zero_gradient():
    tape = Tape()
    x = tape.leaf([1.0, 2.0])
    y = tape.leaf([3.0])
    grads = tape.backward(x.sum())
    np.testing.assert_array_equal(grads[y], np.zeros(1))


def test_double_use_accumulates_like_single_use_rewrite():
    vals = np.array([0.7, -1.2, 2.0])
    w = np.array([1.5, 0.25, -2.0])

    tape = Tape()
    x = tape.leaf(vals)
    loss = (ad.mul(x, x) * 1.0).sum() + ad.mul(constant(w), x).sum()
    g_shared = tape.backward(loss)[x]

    # rewrite with two independent leaves holding the same values: the
    # shared-use gradient must equal the sum of the single-use gradients
    tape2 = Tape()
    x1, x2 = tape2.leaf(vals), tape2.leaf(vals)
    loss2 = ad.mul(x1, x2).sum() + ad.mul(constant(w), x1).sum() * 0.5 \
        + ad.mul(constant(w), x2).sum() * 0.5
    grads2 = tape2.backward(loss2)
    np.testing.assert_allclose(g_shared, grads2[x1] + grads2[x2], atol=1e-15)


def test_constants_do_not_join_graph():
    tape = Tape()
    x = tape.leaf([2.0])
    c = constant([5.0])
    loss = ad.mul(x, c).sum()
    grads = tape.backward(loss)
    np.testing.assert_array_equal(grads[x], [5.0])
    with pytest.raises(KeyError):
        grads[c]


# ---------------------------------------------------------------------------
# every primitive vs central finite differences (step 1e-5, rel err <= 1e-6)
# ---------------------------------------------------------------------------

FD_STEP = 1e-5
FD_TOL = 1e-6


def check_fd(f, params):
    report = finite_diff_check(f, params, step=FD_STEP, tol=FD_TOL)
    assert report.passed, report.lines()


def projections(rng, *shapes):
    return [constant(rand(rng, *s)) for s in shapes]


def test_fd_add_sub_mul_scale():
    rng = np.random.default_rng(20)
    r = constant(rand(rng, 3, 4))
    check_fd(lambda p: ad.mul(ad.add(p["a"], p["b"]), r).sum(), {"a": rand(rng, 3, 4), "b": rand(rng, 3, 4)})
    check_fd(lambda p: ad.mul(ad.sub(p["a"], p["b"]), r).sum(), {"a": rand(rng, 3, 4), "b": rand(rng, 3, 4)})
    check_fd(lambda p: ad.mul(ad.mul(p["a"], p["b"]), r).sum(), {"a": rand(rng, 3, 4), "b": rand(rng, 3, 4)})
    check_fd(lambda p: (p["a"] * -1.7).sum(), {"a": rand(rng, 3, 4)})


def test_fd_add_broadcast_bias():
    rng = np.random.default_rng(21)
    r = constant(rand(rng, 2, 3, 4))
    check_fd(lambda p: ad.mul(ad.add(p["x"], p["b"]), r).sum(),
             {"x": rand(rng, 2, 3, 4), "b": rand(rng, 4)})


def test_fd_matmul_2d_and_batched():
    rng = np.random.default_rng(22)
    r1 = constant(rand(rng, 2, 5))
    check_fd(lambda p: ad.mul(ad.matmul(p["a"], p["b"]), r1).sum(),
             {"a": rand(rng, 2, 3), "b": rand(rng, 3, 5)})
    r2 = constant(rand(rng, 4, 2, 5))
    check_fd(lambda p: ad.mul(ad.matmul(p["a"], p["b"]), r2).sum(),
             {"a": rand(rng, 4, 2, 3), "b": rand(rng, 3, 5)})
    r3 = constant(rand(rng, 4, 2, 5))
    check_fd(lambda p: ad.mul(ad.matmul(p["a"], p["b"]), r3).sum(),
             {"a": rand(rng, 2, 3), "b": rand(rng, 4, 3, 5)})


def test_fd_transpose_reshape_take_concat():
    rng = np.random.default_rng(23)
    r = constant(rand(rng, 4, 3))
    check_fd(lambda p: ad.mul(ad.transpose(p["a"]), r).sum(), {"a": rand(rng, 3, 4)})
    r2 = constant(rand(rng, 12))
    check_fd(lambda p: ad.mul(p["a"].reshape((12,)), r2).sum(), {"a": rand(rng, 3, 4)})
    r3 = constant(rand(rng, 2, 2))
    check_fd(lambda p: ad.mul(p["a"][1:3, :2], r3).sum(), {"a": rand(rng, 4, 4)})
    r4 = constant(rand(rng, 3, 7))
    check_fd(lambda p: ad.mul(ad.concat([p["a"], p["b"]], axis=-1), r4).sum(),
             {"a": rand(rng, 3, 3), "b": rand(rng, 3, 4)})


def test_fd_exp_log_tanh_gelu():
    rng = np.random.default_rng(24)
    r = constant(rand(rng, 3, 4))
    check_fd(lambda p: ad.mul(ad.exp(p["a"]), r).sum(), {"a": rand(rng, 3, 4)})
    check_fd(lambda p: ad.mul(ad.log(p["a"]), r).sum(),
             {"a": rng.uniform(0.5, 3.0, size=(3, 4))})
    check_fd(lambda p: ad.mul(ad.tanh(p["a"]), r).sum(), {"a": rand(rng, 3, 4)})
    check_fd(lambda p: ad.mul(ad.gelu(p["a"]), r).sum(), {"a": rand(rng, 3, 4)})


def test_fd_softmax_reductions():
    rng = np.random.default_rng(25)
    r = constant(rand(rng, 3, 5))
    check_fd(lambda p: ad.mul(ad.softmax(p["a"]), r).sum(), {"a": rand(rng, 3, 5)})
    check_fd(lambda p: p["a"].mean() * 3.0, {"a": rand(rng, 3, 5)})
    r2 = constant(rand(rng, 5))
    check_fd(lambda p: ad.mul(p["a"].sum(axis=0), r2).sum(), {"a": rand(rng, 3, 5)})
    r3 = constant(rand(rng, 3))
    check_fd(lambda p: ad.mul(p["a"].mean(axis=1), r3).sum(), {"a": rand(rng, 3, 5)})


def test_fd_l2_normalize_layer_norm():
    rng = np.random.default_rng(26)
    r = constant(rand(rng, 4, 6))
    check_fd(lambda p: ad.mul(ad.l2_normalize(p["a"]), r).sum(),
             {"a": rand(rng, 4, 6) + 0.3})
    check_fd(lambda p: ad.mul(ad.layer_norm(p["a"], p["g"], p["b"]), r).sum(),
             {"a": rand(rng, 4, 6), "g": rng.uniform(0.5, 1.5, 6), "b": rand(rng, 6)})


def test_fd_cross_entropy():
    rng = np.random.default_rng(27)
    labels = np.array([1, 0, 2])
    check_fd(lambda p: ad.cross_entropy_with_logits(p["a"], labels),
             {"a": rand(rng, 3, 4)})
    check_fd(lambda p: ad.cross_entropy_with_logits(p["a"], 2), {"a": rand(rng, 5)})


# ---------------------------------------------------------------------------
# finite_diff_check itself
# ---------------------------------------------------------------------------

def test_fd_check_square_at_three():
    report = finite_diff_check(lambda p: ad.mul(p["x"], p["x"]).sum(),
                               {"x": np.array(3.0).reshape(())}, step=1e-5, tol=1e-8)
    assert report.passed
    assert report.errors["x"] < 1e-8
    # analytic derivative of x^2 at 3 is 6; recover g_fd from the report's
    # construction by direct central difference
    g_fd = ((3 + 1e-5) ** 2 - (3 - 1e-5) ** 2) / 2e-5
    assert abs(g_fd - 6.0) < 1e-9


def test_fd_check_quadratic_form_matches_analytic():
    rng = np.random.default_rng(30)
    a = rand(rng, 4, 4)
    x0 = rand(rng, 4)

    def f(p):
        col = p["x"].reshape((4, 1))
        return ad.matmul(ad.matmul(ad.transpose(col), constant(a)), col).sum()

    report = finite_diff_check(f, {"x": x0}, step=1e-5, tol=1e-6)
    assert report.passed
    # the tape gradient itself must equal (A + A^T) x
    tape = Tape()
    x = tape.leaf(x0)
    col = x.reshape((4, 1))
    grads = tape.backward(ad.matmul(ad.matmul(ad.transpose(col), constant(a)), col).sum())
    np.testing.assert_allclose(grads[x], (a + a.T) @ x0, rtol=1e-12)


def test_fd_check_reports_corrupted_gradient():
    # same forward, deliberately wrong gradient path: scale(x, 2) pretending
    # to be scale(x, 2.001) through a detour that FD will expose
    def f(p):
        return (p["x"] * 2.0).sum() + (p["x"] * 0.001).sum()

    def f_forward_only(p):
        return (p["x"] * 2.0).sum()

    good = finite_diff_check(f, {"x": np.ones(3)}, tol=1e-6)
    assert good.passed
    # mismatched forward/backward pair: check against the other function's grads
    tape = Tape()
    x = tape.leaf(np.ones(3))
    g_ad = tape.backward(f(dict(x=x)))[x]
    up = float(f_forward_only({"x": constant(np.ones(3) + np.array([1e-5, 0, 0]))}).data)
    dn = float(f_forward_only({"x": constant(np.ones(3) - np.array([1e-5, 0, 0]))}).data)
    g_fd0 = (up - dn) / 2e-5
    rel = abs(g_ad[0] - g_fd0) / (abs(g_ad[0]) + abs(g_fd0))
    assert rel > 1e-6  # the 0.001 corruption is visible


def test_fd_check_rejects_nonfinite():
    # exp overflows to inf when the perturbation pushes the exponent past
    # float64 range; the checker must refuse rather than emit inf errors
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        with pytest.raises(ValueError, match="non-finite"):
            finite_diff_check(lambda p: ad.exp(p["x"] * 1000.0).sum(),
                              {"x": np.array([0.709782])}, step=1e-5)


def test_fd_check_propagates_domain_errors():
    with pytest.raises(ValueError, match="strictly positive"):
        finite_diff_check(lambda p: ad.log(p["x"]).sum(), {"x": np.array([1e-6])}, step=1e-5)


def test_fd_check_bad_step():
    with pytest.raises(ValueError):
        finite_diff_check(lambda p: p["x"].sum(), {"x": np.ones(2)}, step=0.0)
