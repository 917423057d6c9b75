from fractions import Fraction

import numpy as np
import pytest

from sbnn import engine
from sbnn.binquant import OmegaParams, ValidationError
from sbnn.bitpack import pack


def dense_int_preacts(bits, windows):
    """Independent oracle: z' and q from plain int64 arithmetic over {0,1}
    weight bits and {0,1} activation bits."""
    w01 = bits.astype(np.int64)
    x_pm = 2 * windows.astype(np.int64) - 1
    zprime = w01 @ x_pm.T
    q = x_pm.sum(axis=1)
    return zprime, q


class TestKernelClass:
    def test_zero(self):
        kc = engine.KernelClass.from_bits(np.zeros(9, dtype=np.uint8))
        assert kc.tag == engine.KERNEL_ZERO
        assert kc.hamming_weight == 0

    def test_single_center(self):
        bits = np.zeros(9, dtype=np.uint8)
        bits[4] = 1
        kc = engine.KernelClass.from_bits(bits)
        assert kc.tag == engine.KERNEL_SINGLE and kc.index == 4
        assert kc.hamming_weight == 1

    def test_dense_pattern(self):
        bits = np.array([1, 0, 1, 0, 0, 0, 0, 0, 1], dtype=np.uint8)
        kc = engine.KernelClass.from_bits(bits)
        assert kc.tag == engine.KERNEL_DENSE
        assert kc.pattern == 0b100000101
        assert kc.hamming_weight == 3

    def test_classify_counts(self):
        flat = np.concatenate(
            [
                np.zeros(9, dtype=np.uint8),
                np.eye(9, dtype=np.uint8)[3],
                np.ones(9, dtype=np.uint8),
            ]
        )
        classes, (k0, k1, kd) = engine.classify_kernels(flat)
        assert (k0, k1, kd) == (1, 1, 1)
        assert [c.tag for c in classes] == [0, 1, 2]

    def test_not_divisible(self):
        with pytest.raises(ValidationError):
            engine.classify_kernels(np.zeros(10, dtype=np.uint8))


class TestAffineRemap:
    def test_pm1_recovery(self):
        om = OmegaParams.from_xi_eta(-0.5, 2.0)
        # w01 = [1, 0], x = [+1, +1]: z' = 1, q = 2 -> z = 2*1 - 2 = 0
        assert engine.affine_remap(1, 2, om) == 0.0

    def test_all_zero_weights(self):
        om = OmegaParams(tau=0.4, phi=0.1)
        for q in (-5, 0, 7):
            z = engine.affine_remap(0, q, om)
            assert z == pytest.approx(om.alpha * q, rel=1e-15)

    def test_matches_dense_real_oracle(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            n = int(rng.integers(1, 65))
            w01 = rng.integers(0, 2, size=n)
            x = rng.choice([-1, 1], size=n)
            om = OmegaParams(
                tau=float(rng.uniform(0.05, 2.0)), phi=float(rng.uniform(-1, 1))
            )
            w_real = (w01 + om.xi) * om.eta
            dense = float(np.dot(w_real, x))
            zprime = int(np.dot(w01, x))
            q = int(x.sum())
            got = engine.affine_remap(zprime, q, om)
            assert got == pytest.approx(dense, rel=1e-12, abs=1e-12)

    def test_requires_canonical(self):
        with pytest.raises(ValidationError):
            engine.affine_remap(1, 1, OmegaParams(tau=-0.5, phi=0.0))


class TestFusedThreshold:
    def exact_bn_sign(self, z, gamma, beta, mean, var, eps=1e-5):
        inv_std = 1.0 / np.sqrt(var + eps)
        k = Fraction(gamma) * Fraction(float(inv_std))
        val = k * (Fraction(float(z)) - Fraction(mean)) + Fraction(beta)
        return 1 if val >= 0 else 0

    def test_plain_sign(self):
        thr = engine.FusedThreshold.from_batchnorm([1.0], [0.0], [0.0], [1.0 - 1e-5])
        assert thr.decide(np.array([0.0]), channel=0).tolist() == [1]
        assert thr.decide(np.array([-1e-300]), channel=0).tolist() == [0]

    def test_negative_gain_flips(self):
        thr = engine.FusedThreshold.from_batchnorm([-2.0], [0.0], [0.5], [1.0])
        assert int(thr.orientation[0]) == -1
        assert thr.decide(np.array([0.4]), channel=0).tolist() == [1]
        assert thr.decide(np.array([0.6]), channel=0).tolist() == [0]

    def test_zero_gain_constant(self):
        thr = engine.FusedThreshold.from_batchnorm([0.0, 0.0], [0.5, -0.5], [0.0, 0.0], [1.0, 1.0])
        z = np.array([[-10.0, 10.0], [-10.0, 10.0]])
        bits = thr.decide(z)
        assert bits[0].tolist() == [1, 1]
        assert bits[1].tolist() == [0, 0]

    def test_exhaustive_agreement_random_channels(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            gamma = float(rng.normal())
            beta = float(rng.normal())
            mean = float(rng.normal())
            var = float(rng.uniform(0.01, 4.0))
            thr = engine.FusedThreshold.from_batchnorm([gamma], [beta], [mean], [var])
            zs = np.concatenate(
                [rng.normal(mean, 2.0, size=200), [mean, np.floor(mean), np.ceil(mean)]]
            )
            got = thr.decide(zs, channel=0)
            want = [self.exact_bn_sign(z, gamma, beta, mean, var) for z in zs]
            assert got.tolist() == want

    def test_boundary_exactly_on_float(self):
        # theta lands exactly on a representable value: tie goes to +1
        thr = engine.FusedThreshold.from_batchnorm([2.0], [-3.0], [0.0], [1.0 - 1e-5])
        # root = mean - beta/(gamma*inv_std) = 1.5 exactly
        assert thr.theta[0] == 1.5
        assert thr.decide(np.array([1.5]), channel=0).tolist() == [1]
        assert thr.decide(np.array([np.nextafter(1.5, -np.inf)]), channel=0).tolist() == [0]

    def test_int_threshold_consistency(self):
        rng = np.random.default_rng(3)
        om = OmegaParams(tau=0.37, phi=-0.05)
        thr = engine.FusedThreshold.from_batchnorm([1.3], [0.2], [-0.4], [0.8])
        for q in (-9, -2, 0, 5, 11):
            bound, o = thr.int_threshold(0, q, om)
            for z_pm in range(bound - 3, bound + 4):
                z = om.tau * float(z_pm) + om.phi * float(q)
                want = int(thr.decide(np.array([z]), channel=0)[0])
                got = 1 if o * z_pm >= o * bound else 0
                assert got == want


def build_random_model(rng, in_hw=6, in_ch=1, classes=3):
    """Small random quantized conv model for fuzz tests."""
    from sbnn import nn as nnmod
    from sbnn.train import quantize_network

    width = int(rng.integers(3, 7))
    spec = nnmod.conv_net_spec(
        in_ch=in_ch, classes=classes, width=width, image_hw=in_hw + 2, omega_mode="analytic"
    )
    net = nnmod.Network(spec, np.random.default_rng(int(rng.integers(2**32))))
    # randomize batchnorm stats so thresholds are non-trivial
    for layer in net.layers:
        if isinstance(layer, nnmod.BatchNorm):
            c = layer.running_mean.size
            layer.running_mean[...] = rng.normal(0, 1.0, size=c)
            layer.running_var[...] = rng.uniform(0.05, 2.0, size=c)
            layer.gamma.value[...] = rng.normal(1.0, 0.5, size=c)
            layer.beta.value[...] = rng.normal(0, 0.5, size=c)
    return quantize_network(net, (in_ch, in_hw + 2, in_hw + 2), classes)


class TestEngineBitExactness:
    def test_integer_stage_matches_dense_oracle(self):
        rng = np.random.default_rng(44)
        model = build_random_model(rng)
        images = rng.normal(size=(5,) + tuple(model.input_shape))
        x = images
        counters = engine.OpsCounters()
        for stage in model.stages:
            if isinstance(stage, engine.BinStage):
                stage._prepare()
                windows, out_hw = stage.window_bits(x)
                zprime_oracle, q_oracle = dense_int_preacts(stage.packed.bits, windows)
                # engine path
                x_words = pack(windows).words.reshape(windows.shape[0], -1)
                from sbnn import _kernels

                overlap = _kernels.and_popcount_matmat(stage._full_words, x_words)
                zprime = 2 * overlap - stage._full_pop[:, None]
                q = 2 * _kernels.popcount_rows(x_words) - stage.packed.fan_in
                assert np.array_equal(zprime, zprime_oracle)
                assert np.array_equal(q, q_oracle)
                x, _ = stage.forward(x, counters)
            else:
                x = stage.forward(x, counters)

    def test_skipping_never_changes_outputs(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            model = build_random_model(rng)
            images = rng.normal(size=(4,) + tuple(model.input_shape))
            with_skip, c1 = engine.infer(model, images, skip=True)
            without, c2 = engine.infer(model, images, skip=False)
            assert np.array_equal(with_skip, without)
            assert c1.position_ops <= c2.position_ops

    def test_reference_forward_bit_identical(self):
        rng = np.random.default_rng(17)
        for _ in range(5):
            model = build_random_model(rng)
            images = rng.normal(size=(6,) + tuple(model.input_shape))
            logits, _ = engine.infer(model, images)
            ref = engine.reference_forward(model, images)
            assert np.array_equal(logits, ref)

    def test_pm1_model_matches_xnor_oracle(self):
        # +-1-domain model: engine logits equal a dense +-1 integer pipeline
        rng = np.random.default_rng(12)
        from sbnn import nn as nnmod
        from sbnn.train import quantize_network

        spec = nnmod.conv_net_spec(in_ch=1, classes=2, width=4, image_hw=8, omega_mode="pm1")
        net = nnmod.Network(spec, np.random.default_rng(0))
        for layer in net.layers:
            if isinstance(layer, nnmod.BatchNorm):
                c = layer.running_mean.size
                layer.running_mean[...] = rng.normal(0, 0.5, size=c)
                layer.running_var[...] = rng.uniform(0.2, 1.5, size=c)
        model = quantize_network(net, (1, 8, 8), 2, mode="pm1")
        images = rng.normal(size=(20, 1, 8, 8))
        logits, _ = engine.infer(model, images)

        # independent oracle: float stem, then integer +-1 convs + exact
        # batchnorm-then-sign via rationals
        x = images
        for stage in model.stages:
            if isinstance(stage, engine.BinStage):
                p = stage.packed
                w_pm = (2 * p.bits.astype(np.int64) - 1).reshape(p.out_ch, p.in_ch, 3, 3)
                b, c, h, w = x.shape
                ho, wo = h - 2, w - 2
                z = np.zeros((b, p.out_ch, ho, wo), dtype=np.int64)
                xs = (2 * x.astype(np.int64) - 1) if x.dtype == np.uint8 else x
                for oy in range(ho):
                    for ox in range(wo):
                        patch = xs[:, :, oy : oy + 3, ox : ox + 3]
                        z[:, :, oy, ox] = np.einsum("bcij,ocij->bo", patch, w_pm)
                bits = np.zeros_like(z, dtype=np.uint8)
                for ch in range(p.out_ch):
                    bits[:, ch] = stage.threshold.decide(
                        z[:, ch].astype(np.float64), channel=ch
                    )
                x = bits
            elif isinstance(stage, engine.FloatStage):
                zf = stage.preact(x)
                bits = np.zeros(zf.shape, dtype=np.uint8)
                for ch in range(stage.out_ch):
                    bits[:, ch] = stage.threshold.decide(zf[:, ch], channel=ch)
                x = bits
            elif isinstance(stage, engine.Head):
                xpm = 2.0 * x.reshape(x.shape[0], -1).astype(np.float64) - 1.0
                x = xpm @ stage.weight.T + stage.bias
        assert np.array_equal(logits, x)

    def test_all_zero_kernel_layer_costs_nothing(self):
        om = OmegaParams(tau=0.5, phi=-0.1)
        bits = np.zeros((4, 2 * 9), dtype=np.uint8)
        packed = engine.PackedLayer(
            kind="conv3x3", in_ch=2, out_ch=4, stride=1, padding=0, bits=bits, omega=om
        )
        thr = engine.FusedThreshold.from_batchnorm(
            np.ones(4), np.zeros(4), np.zeros(4), np.ones(4)
        )
        stage = engine.BinStage(packed=packed, threshold=thr)
        counters = engine.OpsCounters()
        x = np.random.default_rng(0).integers(0, 2, size=(3, 2, 5, 5)).astype(np.uint8)
        out, (zprime, q) = stage.forward(x, counters, skip=True)
        assert np.all(zprime == 0)
        assert counters.word_popcounts == 0
        assert counters.position_ops == 0
        # output decided purely by the alpha * q path
        z = engine.affine_remap(np.zeros_like(q), q, om)
        assert np.array_equal(out[:, 0].ravel(), thr.decide(z, channel=0))

    def test_counter_law_dense_pm1(self):
        # fully dense +-1 conv layer: counted position ops = 2 N per window
        om = OmegaParams(tau=1.0, phi=0.0)
        rng = np.random.default_rng(5)
        bits = np.ones((3, 2 * 9), dtype=np.uint8)
        packed = engine.PackedLayer(
            kind="conv3x3", in_ch=2, out_ch=3, stride=1, padding=0, bits=bits, omega=om
        )
        thr = engine.FusedThreshold.from_batchnorm(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3))
        stage = engine.BinStage(packed=packed, threshold=thr)
        counters = engine.OpsCounters()
        x = rng.integers(0, 2, size=(2, 2, 6, 6)).astype(np.uint8)
        stage.forward(x, counters, skip=True)
        nwin = 2 * 4 * 4
        assert counters.position_ops == 2 * bits.size * nwin

    def test_input_shape_validation(self):
        rng = np.random.default_rng(3)
        model = build_random_model(rng)
        with pytest.raises(ValidationError):
            engine.infer(model, rng.normal(size=(2, 3, 4, 4)))

    def test_threaded_inference_matches_serial(self):
        rng = np.random.default_rng(21)
        model = build_random_model(rng)
        images = rng.normal(size=(16,) + tuple(model.input_shape))
        serial, c1 = engine.infer(model, images, workers=1)
        threaded, c2 = engine.infer(model, images, workers=4)
        assert np.array_equal(serial, threaded)
        assert c1.position_ops == c2.position_ops
        assert c1.images == c2.images == 16

    def test_thread_env_cap(self, monkeypatch):
        monkeypatch.setenv("SBNN_THREADS", "3")
        rng = np.random.default_rng(23)
        model = build_random_model(rng)
        images = rng.normal(size=(12,) + tuple(model.input_shape))
        env_run, _ = engine.infer(model, images)
        serial, _ = engine.infer(model, images, workers=1)
        assert np.array_equal(env_run, serial)
        monkeypatch.setenv("SBNN_THREADS", "0")
        with pytest.raises(ValidationError):
            engine.infer(model, images)
