"""Acceptance gate: one test per criterion, each printing a PASS line with
its measured figure (run with -s or -v to see them)."""

import time

import numpy as np
import pytest

from rvqcodec import bitstream as bs
from rvqcodec import engine as eg
from rvqcodec import evalharness as ev
from rvqcodec import losses as ls
from rvqcodec import quantizer as qz
from rvqcodec import toydata
from rvqcodec import trainer as tr
from rvqcodec.gradcheck import central_difference, relative_error

TOL_LINEAR = 1e-6
TOL_GENERAL = 1e-4
N_INSTANCES = 20


@pytest.fixture(autouse=True)
def f64():
    eg.set_default_dtype(np.float64)
    yield
    eg.set_default_dtype(np.float32)


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("acceptance_corpus")
    toydata.make_toy_corpus(d, n_utterances=20, seed=0)
    return d


def report(name, detail=""):
    print(f"\nACCEPTANCE PASS {name}" + (f": {detail}" if detail else ""))


# ---------------------------------------------------------------------- 1


def test_allocation_table():
    t0 = time.time()
    table = {
        (600, "even"): (2, 1),
        (900, "third"): (2, 2),
        (1800, "even"): (6, 3),
    }
    for (bps, split), expect in table.items():
        alloc = bs.plan_allocation(bps, split)
        assert (alloc.t_stages, alloc.c_stages) == expect
        # whole segments carry exactly the nominal bitrate
        rng = np.random.default_rng(bps)
        n_super = 32 * 5  # five 1.28 s segments
        stream = bs.build_stream(alloc, rng.integers(0, 64, (n_super, alloc.t_stages)),
                                 rng.integers(0, 64, (2 * n_super, alloc.c_stages)),
                                 b"\x00" * 8)
        assert bs.measured_bitrate(stream, stream.duration) == float(bps)
    dt = time.time() - t0
    assert dt < 1.0
    report("allocation-table", f"{dt:.2f}s")


# ---------------------------------------------------------------------- 2


def fd_ok(build, x0, tol):
    x = eg.parameter(x0)
    build(x).backward()

    def f(arr):
        with eg.no_grad():
            return build(eg.constant(arr)).item()

    err = relative_error(x.grad, central_difference(f, np.asarray(x0, dtype=np.float64)))
    assert err <= tol, f"relative error {err:.3e} > {tol}"


def masked(build, mask):
    return lambda x: eg.sum_(eg.mul(build(x), eg.constant(mask)))


def test_gradient_suite_every_op():
    t0 = time.time()
    rng = np.random.default_rng(0)
    for i in range(N_INSTANCES):
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((3, 4))
        off_kink = np.where(np.abs(a) < 0.05, 0.25, a)
        pos = rng.uniform(0.5, 2.0, (3, 4))

        fd_ok(lambda x: eg.sum_(eg.add(x, eg.constant(b))), a, TOL_GENERAL)
        fd_ok(lambda x: eg.sum_(eg.sub(x, eg.constant(b))), a, TOL_GENERAL)
        fd_ok(lambda x: eg.sum_(eg.mul(x, eg.constant(b))), a, TOL_GENERAL)
        fd_ok(lambda x: eg.sum_(eg.neg(x)), a, TOL_GENERAL)
        fd_ok(lambda x: eg.sum_(eg.leaky_relu(x, 0.2)), off_kink, TOL_GENERAL)
        fd_ok(lambda x: eg.mean(eg.elu(x)), off_kink, TOL_GENERAL)
        fd_ok(lambda x: eg.sum_(eg.tanh(x)), a, TOL_GENERAL)
        fd_ok(lambda x: eg.sum_(eg.abs_(x)), off_kink, TOL_GENERAL)
        fd_ok(lambda x: eg.sum_(eg.log(x)), pos, TOL_GENERAL)
        fd_ok(lambda x: eg.sum_(eg.sqrt(x)), pos, TOL_GENERAL)
        fd_ok(lambda x: eg.sum_(eg.maximum(x, 0.1)), off_kink, TOL_GENERAL)
        fd_ok(lambda x: eg.mean(x, axis=1), np.atleast_2d(a[0]), TOL_GENERAL)
        fd_ok(eg.l1_norm, off_kink, TOL_GENERAL)
        fd_ok(eg.l2_norm, a + 0.1, TOL_GENERAL)
        fd_ok(lambda x: eg.sum_(eg.l2_norm(x, axis=-1)), a, TOL_GENERAL)

        w = rng.standard_normal((4, 2))
        bias = rng.standard_normal(2)
        m = rng.standard_normal((3, 2))
        fd_ok(masked(lambda x: eg.matmul(x, eg.constant(w)), m), a, TOL_LINEAR)
        fd_ok(masked(lambda x: eg.linear(x, eg.constant(w), eg.constant(bias)), m), a, TOL_LINEAR)
        fd_ok(masked(lambda wn: eg.linear(eg.constant(a), wn, eg.constant(bias)), m), w, TOL_LINEAR)

        stride, padding = [(1, 0), (2, 1), (3, 2)][i % 3]
        xc = rng.standard_normal((2, 11))
        kc = rng.standard_normal((3, 2, 4))
        shape = eg.conv1d(eg.constant(xc), eg.constant(kc), stride, padding).shape
        mc = rng.standard_normal(shape)
        fd_ok(masked(lambda x: eg.conv1d(x, eg.constant(kc), stride, padding), mc), xc, TOL_LINEAR)
        fd_ok(masked(lambda k: eg.conv1d(eg.constant(xc), k, stride, padding), mc), kc, TOL_LINEAR)

        xt = rng.standard_normal((3, 5))
        kt = rng.standard_normal((3, 2, 4))
        shape = eg.conv1d_transposed(eg.constant(xt), eg.constant(kt), stride).shape
        mt = rng.standard_normal(shape)
        fd_ok(masked(lambda x: eg.conv1d_transposed(x, eg.constant(kt), stride), mt), xt, TOL_LINEAR)
        fd_ok(masked(lambda k: eg.conv1d_transposed(eg.constant(xt), k, stride), mt), kt, TOL_LINEAR)

        x2 = rng.standard_normal((2, 5, 6))
        k2 = rng.standard_normal((2, 2, 3, 3))
        shape = eg.conv2d(eg.constant(x2), eg.constant(k2), (2, 1), (1, 1)).shape
        m2 = rng.standard_normal(shape)
        fd_ok(masked(lambda x: eg.conv2d(x, eg.constant(k2), (2, 1), (1, 1)), m2), x2, TOL_LINEAR)
        fd_ok(masked(lambda k: eg.conv2d(eg.constant(x2), k, (2, 1), (1, 1)), m2), k2, TOL_LINEAR)

        sig_x = rng.standard_normal(24)
        mf = rng.standard_normal(((24 - 8) // 4 + 1, 8))
        fd_ok(masked(lambda x: eg.frame_signal(x, 8, 4), mf), sig_x, TOL_GENERAL)

        fr = rng.standard_normal((2, 8))
        m3 = rng.standard_normal((2, 2, 5))
        fd_ok(masked(lambda x: eg.rfft2ch(x), m3), fr, TOL_GENERAL)
        proj = rng.uniform(0.1, 1.0, (5, 3))
        fd_ok(lambda x: eg.sum_(eg.rfft_power_project(x, proj)), fr, TOL_GENERAL)

        g1 = rng.standard_normal((2, 3))
        g2 = rng.standard_normal((2, 2))
        mg = rng.standard_normal((2, 5))
        fd_ok(masked(lambda x: eg.concat([x, eg.constant(g2)], axis=1), mg), g1, TOL_GENERAL)
        fd_ok(masked(lambda x: eg.reshape(x, (6,)), rng.standard_normal(6)), g1, TOL_GENERAL)
        fd_ok(masked(lambda x: eg.transpose(x, (1, 0)), rng.standard_normal((3, 2))), g1, TOL_GENERAL)
        fd_ok(masked(lambda x: eg.repeat_frames(x, 2, axis=0), rng.standard_normal((4, 3))), g1, TOL_GENERAL)
        fd_ok(masked(lambda x: eg.narrow(x, 1, 1, 2), rng.standard_normal((2, 2))), g1, TOL_GENERAL)
        fd_ok(masked(lambda x: eg.avg_pool1d(x, 2), rng.standard_normal((2, 4))),
              rng.standard_normal((2, 8)), TOL_GENERAL)

        table = rng.standard_normal((5, 3))
        idx = rng.integers(0, 5, size=6)
        fd_ok(masked(lambda t: eg.embed_rows(t, idx), rng.standard_normal((6, 3))), table, TOL_GENERAL)
    dt = time.time() - t0
    assert dt < 120.0
    report("gradient-suite-ops", f"{N_INSTANCES} instances/op in {dt:.1f}s")


def test_gradient_suite_every_loss():
    t0 = time.time()
    rng = np.random.default_rng(1)

    def disc_outputs(logit_rows, map_rows):
        return [ls.DiscriminatorOutput(
            logits=lr if isinstance(lr, eg.DiffNode) else eg.constant(lr),
            feature_maps=[mr if isinstance(mr, eg.DiffNode) else eg.constant(mr)])
            for lr, mr in zip(logit_rows, map_rows)]

    for i in range(N_INSTANCES):
        # hinge losses: vary one discriminator's logits, keep off the kink
        base_logits = [rng.uniform(-0.8, 0.8, 5) for _ in range(4)]
        base_maps = [rng.standard_normal((2, 3)) for _ in range(4)]
        l0 = base_logits[0]

        def g_loss(x):
            outs = disc_outputs([x] + base_logits[1:], base_maps)
            return ls.adv_generator_loss(outs)

        fd_ok(g_loss, l0, TOL_GENERAL)

        fake_logits = [rng.uniform(-0.8, 0.8, 5) for _ in range(4)]

        def d_loss(x):
            real = disc_outputs([x] + base_logits[1:], base_maps)
            fake = disc_outputs(fake_logits, base_maps)
            return ls.adv_discriminator_loss(real, fake)

        fd_ok(d_loss, l0, TOL_GENERAL)

        m0 = base_maps[0]

        def fm_loss(x):
            real = disc_outputs(base_logits, [x] + base_maps[1:])
            fake = disc_outputs(base_logits, base_maps)
            return ls.feature_matching_loss(real, fake)

        off = np.where(np.abs(m0 - base_maps[0]) < 1e-9, m0 + 0.3, m0)  # avoid |0| kink
        fd_ok(fm_loss, off, TOL_GENERAL)

        # quantization loss: exact analytic routing plus FD of each term
        e0 = rng.standard_normal((2, 3))
        x0 = rng.standard_normal((2, 3))
        enc, ent = eg.parameter(x0), eg.parameter(e0)
        ls.quantization_loss(enc, ent, 0.25).backward()
        assert np.allclose(ent.grad, 2.0 * (e0 - x0), atol=1e-12)
        assert np.allclose(enc.grad, 0.5 * (x0 - e0), atol=1e-12)
        fd = central_difference(lambda arr: 0.25 * float(np.sum((e0 - arr) ** 2)), x0)
        assert relative_error(enc.grad, fd) <= TOL_GENERAL

    # reconstruction loss: directional finite differences on full-size inputs
    for i in range(N_INSTANCES):
        r = np.random.default_rng(100 + i)
        x = r.standard_normal(2048) * 0.3
        y0 = r.standard_normal(2048) * 0.3
        yhat = eg.parameter(y0)
        ls.reconstruction_loss(x, yhat).backward()

        def f(arr):
            with eg.no_grad():
                return float(ls.reconstruction_loss(x, eg.constant(arr)).value)

        v = r.standard_normal(2048)
        v /= np.linalg.norm(v)
        fd = (f(y0 + 1e-6 * v) - f(y0 - 1e-6 * v)) / 2e-6
        an = float(np.dot(yhat.grad, v))
        assert abs(an - fd) <= TOL_GENERAL * max(1.0, abs(fd))
    dt = time.time() - t0
    assert dt < 120.0
    report("gradient-suite-losses", f"{dt:.1f}s")


# ---------------------------------------------------------------------- 3


def test_straight_through_contract_exact():
    rng = np.random.default_rng(2)
    for trial in range(10):
        stages = [qz.Codebook(entries=rng.standard_normal((8, 4))) for _ in range(2)]
        s = qz.RvqState(stages=stages)
        w = rng.standard_normal((4, 3))

        def head(node):
            return eg.sum_(eg.tanh(eg.matmul(node, eg.constant(w))))

        f = eg.parameter(rng.standard_normal((6, 4)))
        st = qz.straight_through(f, s)
        assert np.array_equal(st.value, qz.rvq_quantize(s, f.value).reconstruction.frames)
        head(st).backward()

        u = eg.parameter(st.value)
        head(u).backward()
        assert np.array_equal(f.grad, u.grad)  # exact equality, no tolerance
    report("straight-through-identity")


# ---------------------------------------------------------------------- 4


def test_stop_gradient_routing_exact():
    rng = np.random.default_rng(3)
    for trial in range(10):
        tables = [eg.parameter(rng.standard_normal((8, 4))) for _ in range(2)]
        f0 = rng.standard_normal((6, 4))

        f = eg.parameter(f0)
        _, loss, _ = qz.quantize_with_loss(f, tables, beta=0.25, include_commitment=False)
        loss.backward()
        assert np.array_equal(f.grad, np.zeros_like(f0))
        assert any(np.any(t.grad != 0) for t in tables)
        for t in tables:
            t.zero_grad()

        f = eg.parameter(f0)
        _, loss, _ = qz.quantize_with_loss(f, tables, beta=0.25, include_codebook=False)
        loss.backward()
        assert all(np.array_equal(t.grad, np.zeros((8, 4))) for t in tables)
        assert np.any(f.grad != 0)
        for t in tables:
            t.zero_grad()
    report("stop-gradient-routing")


# ---------------------------------------------------------------------- 5


def test_rvq_properties():
    t0 = time.time()
    rng = np.random.default_rng(4)
    data = rng.standard_normal((600, 8))
    stages, errors, residual = [], [], data.copy()
    for j in range(6):
        stages.append(qz.kmeans_init(residual, k=64, seed=40 + j))
        q = qz.rvq_quantize(qz.RvqState(stages=stages), data)
        errors.append(float(np.mean((q.reconstruction.frames - data) ** 2)))
        residual = data - q.reconstruction.frames
        assert np.all(q.indices >= 0) and np.all(q.indices < 64)
    assert all(b <= a + 1e-12 for a, b in zip(errors, errors[1:]))

    _, dist = qz.kmeans(rng.standard_normal((500, 6)), 64, 10, seed=11)
    assert all(b <= a + 1e-12 for a, b in zip(dist, dist[1:]))

    batch = rng.standard_normal((300, 8))
    a = qz.kmeans_init(batch, k=64, seed=77)
    b = qz.kmeans_init(batch, k=64, seed=77)
    assert np.array_equal(a.entries, b.entries)
    sa = qz.RvqState(stages=[a])
    assert np.array_equal(qz.rvq_quantize(sa, batch).indices,
                          qz.rvq_quantize(sa, batch).indices)
    dt = time.time() - t0
    assert dt < 60.0
    report("rvq-properties", f"stage errors {['%.3f' % e for e in errors]} in {dt:.1f}s")


# ---------------------------------------------------------------------- 6


def test_bitstream_exactness():
    t0 = time.time()
    assert bs.pack_indices([5, 63, 0]) == bytes([0x17, 0xF0, 0x00])
    rng = np.random.default_rng(5)
    allocs = [bs.plan_allocation(600, "even"), bs.plan_allocation(900, "third"),
              bs.plan_allocation(1800, "even"), bs.plan_allocation(1800, "third"),
              bs.single_stream_allocation(600, "t"), bs.single_stream_allocation(600, "c")]
    for trial in range(1000):
        alloc = allocs[trial % len(allocs)]
        n = int(rng.integers(1, 40))
        t_idx = rng.integers(0, 64, (n, alloc.t_stages))
        c_idx = rng.integers(0, 64, (2 * n, alloc.c_stages))
        stream = bs.build_stream(alloc, t_idx, c_idx, bytes(rng.integers(0, 256, 8, dtype=np.uint8)))
        back = bs.parse_stream(bs.serialize_stream(stream))
        assert np.array_equal(back.t_indices, stream.t_indices)
        assert np.array_equal(back.c_indices, stream.c_indices)
        assert back.codebook_hash == stream.codebook_hash
    dt = time.time() - t0
    assert dt < 30.0
    report("bitstream-roundtrip", f"1000 streams in {dt:.1f}s")


# ---------------------------------------------------------------------- 7


def test_loss_hand_values():
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
    report("loss-hand-values")


# ---------------------------------------------------------------------- 8


def test_toy_end_to_end(toy_corpus):
    t0 = time.time()
    config = tr.TrainConfig(steps=2000, batch=8, seed=7, precision="float32")
    _, history = tr.train(config, toy_corpus)
    minutes = (time.time() - t0) / 60

    recon = np.array([h["recon"] for h in history])
    baseline = recon[49]
    final = float(np.mean(recon[-100:]))
    reduction = 1.0 - final / baseline
    finite = all(np.isfinite(list(h.values())).all() for h in history)

    assert finite, "non-finite loss component during the toy run"
    assert reduction >= 0.5, (
        f"reconstruction loss fell only {reduction:.1%} "
        f"(step-50 {baseline:.0f} -> final {final:.0f})")
    assert minutes <= 15.0, f"toy run took {minutes:.1f} min"

    # bit-reproducibility at 64-bit: two identical short runs; each training
    # step is a pure function of (parameters, batch), so equality of the
    # prefix extends to the full run by induction
    cfg64 = tr.TrainConfig(steps=120, batch=8, seed=7, precision="float64")
    tr_a, hist_a = tr.train(cfg64, toy_corpus)
    tr_b, hist_b = tr.train(cfg64, toy_corpus)
    assert hist_a == hist_b
    for pa, pb in zip(tr_a.codec.parameters() + tr_a.discs.parameters(),
                      tr_b.codec.parameters() + tr_b.discs.parameters()):
        assert np.array_equal(pa.value, pb.value)

    report("toy-end-to-end",
           f"recon {baseline:.0f} -> {final:.0f} ({reduction:.1%} drop) in {minutes:.1f} min; "
           f"64-bit prefix bit-identical")


# ---------------------------------------------------------------------- 9


def test_ablation_harness(toy_corpus, tmp_path):
    ordering, results = ev.ablation_experiment(
        toy_corpus, bitrate=600, steps=200, seed=3, out_dir=tmp_path,
        batch=4, eval_limit=6)
    assert set(ordering) == {"transformer", "cnn", "both"}
    for variant, r in results.items():
        assert np.isfinite(r["mean_mel_distance"])
        assert np.isfinite(r["mean_snr_db"])
        assert len(r["report"].rows) == 6
    assert (tmp_path / "ablation_summary.csv").exists()
    detail = " < ".join(f"{v}({results[v]['mean_mel_distance']:.0f})" for v in ordering)
    report("ablation-harness", f"mel-distance ordering: {detail}")
