import numpy as np
import pytest

from rvqcodec import engine as eg
from rvqcodec.gradcheck import central_difference, relative_error


@pytest.fixture(autouse=True)
def f64():
    eg.set_default_dtype(np.float64)
    yield
    eg.set_default_dtype(np.float32)


def check_grad(build, x0, tol=1e-6):
    """build(node) -> scalar DiffNode; compares backward against central FD."""
    x = eg.parameter(x0)
    loss = build(x)
    loss.backward()

    def f(arr):
        with eg.no_grad():
            return float(build(eg.constant(arr)).value)

    fd = central_difference(f, np.asarray(x0, dtype=np.float64))
    err = relative_error(x.grad, fd)
    assert err <= tol, f"gradient mismatch {err:.3e} > {tol}"


def test_linear_identity():
    x = eg.constant([[1.0, 2.0]])
    w = eg.constant([[1.0, 0.0], [0.0, 1.0]])
    b = eg.constant([0.0, 0.0])
    out = eg.linear(x, w, b)
    assert np.array_equal(out.value, [[1.0, 2.0]])


def test_linear_hand_case():
    x = eg.constant([[1.0, 1.0]])
    w = eg.constant([[2.0], [3.0]])
    b = eg.constant([1.0])
    out = eg.linear(x, w, b)
    assert np.allclose(out.value, [[6.0]])


def test_linear_shape_mismatch():
    x = eg.constant(np.ones((2, 3)))
    w = eg.constant(np.ones((4, 5)))
    b = eg.constant(np.ones(5))
    with pytest.raises(eg.EngineError):
        eg.linear(x, w, b)


def test_linear_gradient_wrt_weights():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((3, 4))
    w0 = rng.standard_normal((4, 2))
    b0 = rng.standard_normal(2)

    w = eg.parameter(w0)
    loss = eg.sum_(eg.linear(eg.constant(x0), w, eg.constant(b0)))
    loss.backward()

    def f(arr):
        with eg.no_grad():
            return float(eg.sum_(eg.linear(eg.constant(x0), eg.constant(arr), eg.constant(b0))).value)

    fd = central_difference(f, w0)
    assert relative_error(w.grad, fd) <= 1e-6


def test_conv1d_one_tap_identity():
    x = eg.constant([[1.0, 2.0, 3.0]])
    k = eg.constant([[[1.0]]])
    out = eg.conv1d(x, k, stride=1, padding=0)
    assert np.array_equal(out.value, [[1.0, 2.0, 3.0]])


def test_conv1d_hand_case():
    x = eg.constant([[1.0, 2.0, 3.0, 4.0]])
    k = eg.constant([[[1.0, 1.0]]])
    out = eg.conv1d(x, k, stride=2, padding=0)
    assert np.array_equal(out.value, [[3.0, 7.0]])


def test_conv1d_kernel_too_large():
    x = eg.constant(np.ones((1, 3)))
    k = eg.constant(np.ones((1, 1, 6)))
    with pytest.raises(eg.EngineError):
        eg.conv1d(x, k, stride=1, padding=1)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (3, 2)])
def test_conv1d_gradients(stride, padding):
    rng = np.random.default_rng(7)
    x0 = rng.standard_normal((2, 11))
    k0 = rng.standard_normal((3, 2, 4))

    for wrt in ("x", "k"):
        def build(node, wrt=wrt):
            xx = node if wrt == "x" else eg.constant(x0)
            kk = node if wrt == "k" else eg.constant(k0)
            return eg.sum_(eg.mul(eg.conv1d(xx, kk, stride, padding), eg.constant(mask)))

        out_shape = eg.conv1d(eg.constant(x0), eg.constant(k0), stride, padding).shape
        mask = rng.standard_normal(out_shape)
        x = eg.parameter(x0 if wrt == "x" else k0)
        loss = build(x)
        loss.backward()

        def f(arr, wrt=wrt):
            with eg.no_grad():
                return float(build(eg.constant(arr)).value)

        fd = central_difference(f, x0 if wrt == "x" else k0)
        assert relative_error(x.grad, fd) <= 1e-6


def test_conv1d_transposed_identity():
    x = eg.constant([[1.0, 2.0, 3.0]])
    k = eg.constant([[[1.0]]])
    out = eg.conv1d_transposed(x, k, stride=1)
    assert np.array_equal(out.value, [[1.0, 2.0, 3.0]])


def test_conv_adjoint_identity():
    rng = np.random.default_rng(3)
    # lengths chosen so the strided windows tile the padded input exactly
    for stride, padding, T in [(1, 0, 17), (2, 0, 17), (3, 1, 18)]:
        x0 = rng.standard_normal((2, T))
        k0 = rng.standard_normal((4, 2, 5))
        with eg.no_grad():
            cx = eg.conv1d(eg.constant(x0), eg.constant(k0), stride, padding)
            y0 = rng.standard_normal(cx.shape)
            ty = eg.conv1d_transposed(eg.constant(y0), eg.constant(k0), stride, padding)
        lhs = float(np.sum(cx.value * y0))
        rhs = float(np.sum(x0 * ty.value))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_conv1d_transposed_length_and_gradients():
    rng = np.random.default_rng(11)
    x0 = rng.standard_normal((3, 6))
    k0 = rng.standard_normal((3, 2, 4))
    out = eg.conv1d_transposed(eg.constant(x0), eg.constant(k0), stride=2)
    assert out.shape == (2, (6 - 1) * 2 + 4)

    mask = rng.standard_normal(out.shape)
    for wrt in ("x", "k"):
        x = eg.parameter(x0 if wrt == "x" else k0)

        def build(node):
            xx = node if wrt == "x" else eg.constant(x0)
            kk = node if wrt == "k" else eg.constant(k0)
            return eg.sum_(eg.mul(eg.conv1d_transposed(xx, kk, 2), eg.constant(mask)))

        build(x).backward()

        def f(arr):
            with eg.no_grad():
                return float(build(eg.constant(arr)).value)

        fd = central_difference(f, x0 if wrt == "x" else k0)
        assert relative_error(x.grad, fd) <= 1e-6


def test_conv2d_gradients():
    rng = np.random.default_rng(5)
    x0 = rng.standard_normal((2, 6, 7))
    k0 = rng.standard_normal((3, 2, 3, 3))
    out = eg.conv2d(eg.constant(x0), eg.constant(k0), (2, 1), (1, 1))
    mask = rng.standard_normal(out.shape)

    for wrt in ("x", "k"):
        x = eg.parameter(x0 if wrt == "x" else k0)

        def build(node):
            xx = node if wrt == "x" else eg.constant(x0)
            kk = node if wrt == "k" else eg.constant(k0)
            return eg.sum_(eg.mul(eg.conv2d(xx, kk, (2, 1), (1, 1)), eg.constant(mask)))

        build(x).backward()

        def f(arr):
            with eg.no_grad():
                return float(build(eg.constant(arr)).value)

        fd = central_difference(f, x0 if wrt == "x" else k0)
        assert relative_error(x.grad, fd) <= 1e-6


def test_norms_hand_values():
    assert float(eg.l1_norm(eg.constant([3.0, -4.0])).value) == 7.0
    assert float(eg.l2_norm(eg.constant([3.0, 4.0])).value) == 5.0


@pytest.mark.parametrize(
    "name,build,positive",
    [
        ("elu_mean", lambda x: eg.mean(eg.elu(x)), False),
        ("leaky", lambda x: eg.sum_(eg.leaky_relu(x, 0.2)), False),
        ("tanh", lambda x: eg.sum_(eg.tanh(x)), False),
        ("abs", lambda x: eg.sum_(eg.abs_(x)), False),
        ("log", lambda x: eg.sum_(eg.log(x)), True),
        ("sqrt", lambda x: eg.sum_(eg.sqrt(x)), True),
        ("l2", lambda x: eg.l2_norm(x), False),
        ("l2_axis", lambda x: eg.sum_(eg.l2_norm(x, axis=-1)), False),
        ("maximum", lambda x: eg.sum_(eg.maximum(x, 0.3)), False),
        ("mean_ax", lambda x: eg.sum_(eg.mean(x, axis=0)), False),
        ("mul_self", lambda x: eg.sum_(eg.mul(x, x)), False),
    ],
)
def test_elementwise_gradients(name, build, positive):
    rng = np.random.default_rng(hash(name) % 2**31)
    x0 = rng.uniform(0.5, 2.0, (3, 5)) if positive else rng.standard_normal((3, 5))
    # keep FD away from the kinks of abs/leaky/maximum
    if not positive:
        x0 = np.where(np.abs(x0) < 0.05, 0.3, x0)
        x0 = np.where(np.abs(x0 - 0.3) < 0.05, 0.5, x0) if name == "maximum" else x0
    check_grad(build, x0, tol=1e-4)


def test_backward_sum_all_ones():
    x = eg.parameter(np.arange(6.0).reshape(2, 3))
    eg.sum_(x).backward()
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic():
    x = eg.parameter([1.0, 2.0])
    eg.sum_(eg.mul(x, x)).backward()
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = eg.parameter([1.0, 2.0])
    with pytest.raises(eg.EngineError):
        eg.backward(eg.mul(x, x))


def test_backward_accumulates():
    x = eg.parameter([1.0, 2.0])
    loss = eg.sum_(x)
    loss.backward()
    loss.backward()
    assert np.array_equal(x.grad, [2.0, 2.0])


def test_stop_gradient_contract():
    x = eg.parameter([1.0, -2.0, 3.0])
    sg = eg.stop_gradient(x)
    assert sg.value is x.value  # forward bit-identical
    eg.sum_(eg.mul(sg, sg)).backward()
    assert np.array_equal(x.grad, np.zeros(3))


def test_unreachable_node_keeps_zero_grad():
    x = eg.parameter([1.0, 2.0])
    y = eg.parameter([3.0, 4.0])
    eg.sum_(eg.mul(x, x)).backward()
    assert np.array_equal(y.grad, np.zeros(2))


def test_grad_through_stop_grad_mix():
    # loss = sum(x * sg(x)): gradient must be sg(x).value == x, not 2x
    x = eg.parameter([1.0, 2.0])
    eg.sum_(eg.mul(x, eg.stop_gradient(x))).backward()
    assert np.array_equal(x.grad, [1.0, 2.0])


def test_frame_signal_values_and_gradient():
    rng = np.random.default_rng(2)
    x0 = rng.standard_normal(37)
    frames = eg.frame_signal(eg.constant(x0), 8, 2)
    assert frames.shape == ((37 - 8) // 2 + 1, 8)
    for i in range(frames.shape[0]):
        assert np.array_equal(frames.value[i], x0[i * 2 : i * 2 + 8])

    mask = rng.standard_normal(frames.shape)
    x = eg.parameter(x0)
    eg.sum_(eg.mul(eg.frame_signal(x, 8, 2), eg.constant(mask))).backward()

    def f(arr):
        with eg.no_grad():
            return float(eg.sum_(eg.mul(eg.frame_signal(eg.constant(arr), 8, 2), eg.constant(mask))).value)

    fd = central_difference(f, x0)
    assert relative_error(x.grad, fd) <= 1e-6


def test_rfft2ch_matches_numpy_and_gradient():
    rng = np.random.default_rng(9)
    x0 = rng.standard_normal((3, 16))
    spec = np.fft.rfft(x0, axis=-1)
    out = eg.rfft2ch(eg.constant(x0))
    assert np.allclose(out.value[0], spec.real)
    assert np.allclose(out.value[1], spec.imag)

    mask = rng.standard_normal(out.shape)
    x = eg.parameter(x0)
    eg.sum_(eg.mul(eg.rfft2ch(x), eg.constant(mask))).backward()

    def f(arr):
        with eg.no_grad():
            return float(eg.sum_(eg.mul(eg.rfft2ch(eg.constant(arr)), eg.constant(mask))).value)

    fd = central_difference(f, x0)
    assert relative_error(x.grad, fd) <= 1e-6


def test_embed_rows_gather_scatter():
    table = eg.parameter(np.arange(12.0).reshape(4, 3))
    idx = np.array([2, 0, 2])
    out = eg.embed_rows(table, idx)
    assert np.array_equal(out.value, table.value[idx])
    eg.sum_(out).backward()
    expect = np.zeros((4, 3))
    expect[2] = 2.0
    expect[0] = 1.0
    assert np.array_equal(table.grad, expect)


def test_concat_repeat_transpose_reshape_gradients():
    rng = np.random.default_rng(13)
    a0 = rng.standard_normal((2, 3))
    b0 = rng.standard_normal((2, 5))
    mask = rng.standard_normal((2, 8))

    a = eg.parameter(a0)
    out = eg.concat([a, eg.constant(b0)], axis=1)
    eg.sum_(eg.mul(out, eg.constant(mask))).backward()
    assert np.allclose(a.grad, mask[:, :3])

    x = eg.parameter(a0)
    rep = eg.repeat_frames(x, 2, axis=0)
    assert np.array_equal(rep.value, np.repeat(a0, 2, axis=0))
    eg.sum_(rep).backward()
    assert np.allclose(x.grad, 2 * np.ones((2, 3)))

    y = eg.parameter(a0)
    eg.sum_(eg.mul(eg.transpose(y, (1, 0)), eg.constant(a0.T))).backward()
    assert np.allclose(y.grad, a0)

    z = eg.parameter(a0)
    eg.sum_(eg.mul(eg.reshape(z, (6,)), eg.constant(a0.reshape(6)))).backward()
    assert np.allclose(z.grad, a0)


def test_avg_pool1d():
    x = eg.parameter([[1.0, 3.0, 2.0, 6.0]])
    out = eg.avg_pool1d(x, 2)
    assert np.array_equal(out.value, [[2.0, 4.0]])
    eg.sum_(out).backward()
    assert np.allclose(x.grad, 0.5 * np.ones((1, 4)))


def test_strict_finite_mode():
    eg.set_strict_finite(True)
    try:
        x = eg.constant([1.0, 2.0])
        bad = eg.constant([np.inf, 1.0])
        with pytest.raises(eg.EngineError):
            eg.mul(bad, eg.constant([1.0, 1.0]))
        eg.add(x, x)  # fine
    finally:
        eg.set_strict_finite(False)


def test_mixed_dtype_rejected():
    a = eg.constant(np.ones(3, dtype=np.float32), dtype=np.float32)
    b = eg.constant(np.ones(3), dtype=np.float64)
    with pytest.raises(eg.EngineError):
        eg.add(a, b)


def test_log_domain_error():
    with pytest.raises(eg.EngineError):
        eg.log(eg.constant([1.0, 0.0]))
