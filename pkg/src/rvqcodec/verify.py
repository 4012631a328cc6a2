"""Self-contained invariant suite behind the `verify` command: gradient
checks against central finite differences, quantizer and bitstream
properties, and the documented hand-computed loss values.

Each check is named; `faults` injects deliberate corruption (test hook) to
prove a property actually bites.
"""

from __future__ import annotations

import numpy as np

from . import bitstream as bs
from . import engine as eg
from . import losses as ls
from . import quantizer as qz
from . import signal as sig
from . import trainer as tr
from .gradcheck import central_difference, relative_error

FD_TOL_LINEAR = 1e-6
FD_TOL_GENERAL = 1e-4


def _fd_check(build, x0, tol):
    x = eg.parameter(x0)
    build(x).backward()

    def f(arr):
        with eg.no_grad():
            return float(build(eg.constant(arr)).value)

    err = relative_error(x.grad, central_difference(f, np.asarray(x0, dtype=np.float64)))
    assert err <= tol, f"gradient error {err:.2e} > {tol}"


def check_linear_gradients(faults):
    rng = np.random.default_rng(101)
    for _ in range(5):
        x0 = rng.standard_normal((3, 4))
        w0 = rng.standard_normal((4, 2))
        b0 = rng.standard_normal(2)
        mask = rng.standard_normal((3, 2))
        _fd_check(lambda w: eg.sum_(eg.mul(eg.linear(eg.constant(x0), w, eg.constant(b0)),
                                           eg.constant(mask))), w0, FD_TOL_LINEAR)
        _fd_check(lambda x: eg.sum_(eg.mul(eg.linear(x, eg.constant(w0), eg.constant(b0)),
                                           eg.constant(mask))), x0, FD_TOL_LINEAR)


def check_conv_gradients(faults):
    rng = np.random.default_rng(102)
    for stride, padding in ((1, 0), (2, 1), (3, 2)):
        x0 = rng.standard_normal((2, 11))
        k0 = rng.standard_normal((3, 2, 4))
        out_shape = eg.conv1d(eg.constant(x0), eg.constant(k0), stride, padding).shape
        mask = rng.standard_normal(out_shape)
        _fd_check(lambda x: eg.sum_(eg.mul(eg.conv1d(x, eg.constant(k0), stride, padding),
                                           eg.constant(mask))), x0, FD_TOL_LINEAR)
        _fd_check(lambda k: eg.sum_(eg.mul(eg.conv1d(eg.constant(x0), k, stride, padding),
                                           eg.constant(mask))), k0, FD_TOL_LINEAR)


def check_conv_transposed_gradients(faults):
    rng = np.random.default_rng(103)
    x0 = rng.standard_normal((3, 6))
    k0 = rng.standard_normal((3, 2, 4))
    out_shape = eg.conv1d_transposed(eg.constant(x0), eg.constant(k0), 2).shape
    mask = rng.standard_normal(out_shape)
    _fd_check(lambda x: eg.sum_(eg.mul(eg.conv1d_transposed(x, eg.constant(k0), 2),
                                       eg.constant(mask))), x0, FD_TOL_LINEAR)
    _fd_check(lambda k: eg.sum_(eg.mul(eg.conv1d_transposed(eg.constant(x0), k, 2),
                                       eg.constant(mask))), k0, FD_TOL_LINEAR)


def check_conv_adjoint(faults):
    rng = np.random.default_rng(104)
    for stride, padding, T in ((1, 0, 17), (2, 0, 17), (3, 1, 18)):
        x0 = rng.standard_normal((2, T))
        k0 = rng.standard_normal((4, 2, 5))
        with eg.no_grad():
            cx = eg.conv1d(eg.constant(x0), eg.constant(k0), stride, padding)
            y0 = rng.standard_normal(cx.shape)
            ty = eg.conv1d_transposed(eg.constant(y0), eg.constant(k0), stride, padding)
        lhs = float(np.sum(cx.value * y0))
        rhs = float(np.sum(x0 * ty.value))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs)), f"adjoint gap {lhs - rhs}"


def check_elementwise_gradients(faults):
    rng = np.random.default_rng(105)
    x0 = rng.standard_normal((3, 5))
    x0 = np.where(np.abs(x0) < 0.05, 0.3, x0)  # stay off the kinks
    pos = rng.uniform(0.5, 2.0, (3, 5))
    _fd_check(lambda x: eg.mean(eg.elu(x)), x0, FD_TOL_GENERAL)
    _fd_check(lambda x: eg.sum_(eg.leaky_relu(x, 0.2)), x0, FD_TOL_GENERAL)
    _fd_check(lambda x: eg.sum_(eg.tanh(x)), x0, FD_TOL_GENERAL)
    _fd_check(lambda x: eg.sum_(eg.abs_(x)), x0, FD_TOL_GENERAL)
    _fd_check(lambda x: eg.sum_(eg.log(x)), pos, FD_TOL_GENERAL)
    _fd_check(lambda x: eg.sum_(eg.sqrt(x)), pos, FD_TOL_GENERAL)
    _fd_check(lambda x: eg.l2_norm(x), x0, FD_TOL_GENERAL)


def check_spectral_gradients(faults):
    rng = np.random.default_rng(106)
    x0 = rng.standard_normal((2, 16))
    mask2 = rng.standard_normal((2, 2, 1, 9))
    _fd_check(lambda x: eg.sum_(eg.mul(eg.rfft2ch(eg.frame_signal(x, 16, 4)),
                                       eg.constant(mask2[..., :1, :]))),
              rng.standard_normal(20), FD_TOL_GENERAL)
    proj = rng.uniform(0.1, 1.0, (9, 3))
    _fd_check(lambda x: eg.sum_(eg.rfft_power_project(x, proj)), x0, FD_TOL_GENERAL)


def check_stop_gradient(faults):
    x = eg.parameter(np.array([1.0, -2.0, 3.0]))
    sg = eg.stop_gradient(x)
    assert sg.value is x.value, "stop-gradient forward must be bit-identical"
    eg.sum_(eg.mul(sg, sg)).backward()
    assert np.array_equal(x.grad, np.zeros(3)), "stop-gradient leaked a gradient"


def check_unreachable_grad_zero(faults):
    x = eg.parameter(np.array([1.0, 2.0]))
    y = eg.parameter(np.array([3.0, 4.0]))
    eg.sum_(eg.mul(x, x)).backward()
    assert np.array_equal(y.grad, np.zeros(2))


def check_stft_parseval(faults):
    rng = np.random.default_rng(107)
    x = rng.standard_normal(400)
    win = sig.hann_window(128)
    for start in (0, 113, 272):
        frame = x[start : start + 128] * win
        et = np.sum(frame**2)
        ef = np.sum(np.abs(np.fft.fft(frame)) ** 2) / 128
        assert abs(et - ef) <= 1e-8 * et


def check_stft_linearity(faults):
    rng = np.random.default_rng(108)
    x, y = rng.standard_normal(300), rng.standard_normal(300)
    lhs = sig.stft(1.3 * x - 0.7 * y, 128, 32).values
    rhs = 1.3 * sig.stft(x, 128, 32).values - 0.7 * sig.stft(y, 128, 32).values
    assert np.max(np.abs(lhs - rhs)) <= 1e-8 * max(1.0, float(np.max(np.abs(lhs))))


def check_mel_filterbank(faults):
    for w in sig.MEL_WINDOWS:
        fb = sig.mel_filterbank(w)
        assert np.all(fb.matrix >= 0)
        assert np.all(fb.matrix.sum(axis=1) > 0), f"zero filter row at window {w}"
        assert np.all(fb.matrix @ np.ones(w // 2 + 1) > 0)


def check_kmeans_monotone(faults):
    rng = np.random.default_rng(109)
    batch = rng.standard_normal((300, 6))
    _, dist = qz.kmeans(batch, 16, 10, seed=5)
    assert all(b <= a + 1e-12 for a, b in zip(dist, dist[1:])), "k-means distortion rose"


def check_rvq_stage_monotone(faults):
    rng = np.random.default_rng(110)
    data = rng.standard_normal((512, 8))
    stages, errors, residual = [], [], data.copy()
    for j in range(6):
        stages.append(qz.kmeans_init(residual, k=64, seed=200 + j))
        q = qz.rvq_quantize(qz.RvqState(stages=stages), data)
        errors.append(float(np.mean((q.reconstruction.frames - data) ** 2)))
        residual = data - q.reconstruction.frames
    assert all(b <= a + 1e-12 for a, b in zip(errors, errors[1:])), f"stage errors rose: {errors}"


def check_rvq_determinism(faults):
    rng = np.random.default_rng(111)
    batch = rng.standard_normal((200, 4))
    a = qz.kmeans_init(batch, k=16, seed=9)
    b = qz.kmeans_init(batch, k=16, seed=9)
    assert np.array_equal(a.entries, b.entries)
    s = qz.RvqState(stages=[a, qz.kmeans_init(batch - qz.rvq_quantize(
        qz.RvqState(stages=[a]), batch).reconstruction.frames, k=16, seed=10)])
    q1, q2 = qz.rvq_quantize(s, batch), qz.rvq_quantize(s, batch)
    assert np.array_equal(q1.indices, q2.indices)
    assert np.all(q1.indices >= 0) and np.all(q1.indices < 16)


def check_rvq_roundtrip(faults):
    rng = np.random.default_rng(112)
    stages = [qz.Codebook(entries=rng.standard_normal((8, 3))) for _ in range(3)]
    s = qz.RvqState(stages=stages)
    f = rng.standard_normal((1000, 3))
    q = qz.rvq_quantize(s, f)
    back = qz.rvq_dequantize(s, q.indices)
    assert np.array_equal(back.frames, q.reconstruction.frames)


def check_straight_through(faults):
    rng = np.random.default_rng(113)
    s = qz.RvqState(stages=[qz.Codebook(entries=rng.standard_normal((6, 4)))])
    w = rng.standard_normal((4, 2))

    def head(node):
        return eg.sum_(eg.tanh(eg.matmul(node, eg.constant(w))))

    f = eg.parameter(rng.standard_normal((7, 4)))
    head(qz.straight_through(f, s)).backward()
    u = eg.parameter(qz.rvq_quantize(s, f.value).reconstruction.frames)
    head(u).backward()
    assert np.array_equal(f.grad, u.grad), "straight-through gradient is not the identity"


def check_quant_loss_routing(faults):
    rng = np.random.default_rng(114)
    tables = [eg.parameter(rng.standard_normal((8, 4))) for _ in range(2)]
    f0 = rng.standard_normal((6, 4))

    f = eg.parameter(f0)
    _, loss, _ = qz.quantize_with_loss(f, tables, beta=0.25, include_commitment=False)
    loss.backward()
    assert np.array_equal(f.grad, np.zeros_like(f0)), "codebook term leaked to the encoder"
    assert any(np.any(t.grad != 0) for t in tables)
    for t in tables:
        t.zero_grad()
    f = eg.parameter(f0)
    _, loss, _ = qz.quantize_with_loss(f, tables, beta=0.25, include_codebook=False)
    loss.backward()
    assert all(np.array_equal(t.grad, np.zeros((8, 4))) for t in tables), \
        "commitment term leaked to the codebooks"
    assert np.any(f.grad != 0)


def _maybe_flip(data: bytes, faults) -> bytes:
    if "pack-bitflip" in faults and data:
        corrupted = bytearray(data)
        corrupted[0] ^= 0x10
        return bytes(corrupted)
    return data


def check_pack_byte_example(faults):
    packed = _maybe_flip(bs.pack_indices([5, 63, 0]), faults)
    assert packed == bytes([0x17, 0xF0, 0x00]), f"documented packing broke: {packed.hex()}"


def check_pack_roundtrip(faults):
    rng = np.random.default_rng(115)
    for _ in range(100):
        v = rng.integers(0, 64, size=int(rng.integers(0, 64)))
        data = _maybe_flip(bs.pack_indices(v), faults)
        assert bs.unpack_indices(data, len(v)) == v.tolist(), "pack/unpack round trip broke"


def check_allocation_table(faults):
    assert (bs.plan_allocation(600, "even").t_stages,
            bs.plan_allocation(600, "even").c_stages) == (2, 1)
    assert (bs.plan_allocation(900, "third").t_stages,
            bs.plan_allocation(900, "third").c_stages) == (2, 2)
    assert (bs.plan_allocation(1800, "even").t_stages,
            bs.plan_allocation(1800, "even").c_stages) == (6, 3)
    try:
        bs.plan_allocation(700, "even")
    except bs.UnrealizableAllocation:
        pass
    else:
        raise AssertionError("700 bps should be unrealizable")


def check_loss_hand_values(faults):
    def disc(logits, maps=None):
        return ls.DiscriminatorOutput(
            logits=eg.constant(np.asarray(logits, dtype=np.float64)),
            feature_maps=[eg.constant(np.asarray(m, dtype=np.float64))
                          for m in (maps or [np.zeros((1, 2))])])

    outs = [disc([0.5, 2.0])] + [disc([1.0, 7.0])] * 3
    assert abs(float(ls.adv_generator_loss(outs).value) - 0.0625) <= 1e-9
    real = [disc([0.0])] * 4
    fake = [disc([0.0])] * 4
    assert abs(float(ls.adv_discriminator_loss(real, fake).value) - 2.0) <= 1e-9
    real = [disc([1.0], [np.array([[1.0, 2.0]])])] + [disc([1.0])] * 3
    fake = [disc([1.0], [np.array([[2.0, 2.0]])])] + [disc([1.0])] * 3
    assert abs(float(ls.feature_matching_loss(real, fake).value) - 0.125) <= 1e-9
    enc = eg.constant(np.array([[1.0, 0.0]]))
    ent = eg.constant(np.array([[0.0, 0.0]]))
    assert abs(float(ls.quantization_loss(enc, ent, 0.25).value) - 1.25) <= 1e-9
    assert abs(ls.log_term_weight(64) - np.sqrt(32.0)) <= 1e-9


def check_adam_contract(faults):
    state = tr.init_adam([np.array([0.0])])
    new_p, _ = tr.adam_step([np.array([0.0])], [np.array([1.0])], state, lr=1e-4)
    assert abs(new_p[0][0] + 1e-4) <= 1e-12
    new_p, new_s = tr.adam_step([np.array([5.0])], [np.array([0.0])], tr.init_adam([np.array([5.0])]), lr=1e-4)
    assert new_p[0][0] == 5.0 and new_s.t == 1


CHECKS = [
    ("linear-gradient-fd", check_linear_gradients),
    ("conv1d-gradient-fd", check_conv_gradients),
    ("conv1d-transposed-gradient-fd", check_conv_transposed_gradients),
    ("conv-adjoint-identity", check_conv_adjoint),
    ("elementwise-gradient-fd", check_elementwise_gradients),
    ("spectral-gradient-fd", check_spectral_gradients),
    ("stop-gradient-zero-backward", check_stop_gradient),
    ("unreachable-node-zero-grad", check_unreachable_grad_zero),
    ("stft-parseval", check_stft_parseval),
    ("stft-linearity", check_stft_linearity),
    ("mel-filterbank-positive", check_mel_filterbank),
    ("kmeans-distortion-monotone", check_kmeans_monotone),
    ("rvq-stage-error-monotone", check_rvq_stage_monotone),
    ("rvq-determinism", check_rvq_determinism),
    ("rvq-dequantize-roundtrip", check_rvq_roundtrip),
    ("straight-through-identity", check_straight_through),
    ("quantization-loss-routing", check_quant_loss_routing),
    ("pack-byte-example", check_pack_byte_example),
    ("pack-unpack-roundtrip", check_pack_roundtrip),
    ("allocation-table", check_allocation_table),
    ("loss-hand-values", check_loss_hand_values),
    ("adam-update-contract", check_adam_contract),
]


def run_verification(faults=frozenset(), printer=print):
    """Run every named property at 64-bit; returns [(name, passed, message)]."""
    results = []
    saved = eg.default_dtype()
    eg.set_default_dtype(np.float64)
    try:
        for name, fn in CHECKS:
            try:
                fn(frozenset(faults))
                results.append((name, True, ""))
                if printer:
                    printer(f"PASS {name}")
            except AssertionError as exc:
                results.append((name, False, str(exc)))
                if printer:
                    printer(f"FAIL {name}: {exc}")
    finally:
        eg.set_default_dtype(saved)
    return results
