import dataclasses

import numpy as np
import pytest

from cdreg import quant
from cdreg.data import Batch, Dataset, SynthConfig, batches, synth_generate
from cdreg.model import ModelConfig, build_model
from cdreg.optimizer import OptimizerConfig, OptimizerState, train_step
from cdreg.pairs import enumerate_pairs


class TestCalibrateMinmax:
    def test_asymmetric_span_0_15(self):
        p = quant.calibrate_minmax(np.linspace(0.0, 15.0, 200), bits=4)
        assert p.scale == 1.0
        assert p.zero_point == 0
        assert (p.qmin, p.qmax) == (0, 15)

    def test_symmetric_span_7(self):
        p = quant.calibrate_minmax(np.array([-7.0, 3.0, 7.0]), bits=4, symmetric=True)
        assert p.scale == 1.0
        assert p.zero_point == 0
        assert (p.qmin, p.qmax) == (-8, 7)

    def test_negative_only_range_covers_values(self):
        x = np.array([-10.0, -4.0, -2.0])
        p = quant.calibrate_minmax(x, bits=4)
        xq = quant.fake_quantize(x, p)
        assert np.max(np.abs(xq - x)) <= p.scale / 2

    def test_constant_samples_round_trip(self):
        for c in (5.0, -3.0, 0.0):
            p = quant.calibrate_minmax(np.full(10, c), bits=4)
            got = quant.fake_quantize(np.array([c]), p)[0]
            assert abs(got - c) <= max(p.scale, quant.SCALE_FLOOR)

    def test_all_zero_floor_path(self):
        p = quant.calibrate_minmax(np.zeros(5), bits=4)
        assert p.scale == quant.SCALE_FLOOR
        assert p.zero_point == 7  # centered
        assert quant.fake_quantize(np.zeros(3), p).tolist() == [0.0, 0.0, 0.0]

    def test_empty_samples_rejected(self):
        with pytest.raises(ValueError):
            quant.calibrate_minmax(np.zeros(0), bits=4)


class TestCalibratePercentile:
    def test_nearest_rank(self):
        samples = np.arange(1.0, 101.0)
        assert quant.nearest_rank_percentile(samples, 99.0) == 99.0
        assert quant.nearest_rank_percentile(samples, 100.0) == 100.0
        assert quant.nearest_rank_percentile(samples, 1.0) == 1.0

    def test_q100_equals_minmax(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=1000) * 3.0
        for symmetric in (False, True):
            a = quant.calibrate_percentile(x, 100.0, bits=4, symmetric=symmetric)
            b = quant.calibrate_minmax(x, bits=4, symmetric=symmetric)
            assert a.scale == b.scale
            assert a.zero_point == b.zero_point

    def test_outlier_clipped(self):
        x = np.concatenate([np.linspace(-1.0, 1.0, 999), [1e6]])
        p = quant.calibrate_percentile(x, 99.0, bits=4)
        assert quant.nearest_rank_percentile(np.abs(x), 99.0) <= 1.0
        # the bulk is reconstructed far better than under min-max
        pm = quant.calibrate_minmax(x, bits=4)
        bulk = x[:-1]
        err_pct = np.mean(np.abs(quant.fake_quantize(bulk, p) - bulk))
        err_mm = np.mean(np.abs(quant.fake_quantize(bulk, pm) - bulk))
        # err_pct sits at the 4-bit grid floor; min-max loses the whole bulk
        assert err_pct < err_mm / 10

    def test_q_bounds(self):
        with pytest.raises(ValueError):
            quant.calibrate_percentile(np.ones(3), 0.0, bits=4)


class TestFakeQuantize:
    def test_grid_points_exact(self):
        p = quant.QuantParams(scale=0.37, zero_point=0, qmin=-8, qmax=7)
        grid = np.arange(-8, 8) * 0.37
        assert np.array_equal(quant.fake_quantize(grid, p), grid)

    def test_clamp_at_qmax(self):
        p = quant.QuantParams(scale=1.0, zero_point=0, qmin=-8, qmax=7)
        assert quant.fake_quantize(np.array([100.0]), p)[0] == 7.0

    def test_ties_to_even(self):
        p = quant.QuantParams(scale=1.0, zero_point=0, qmin=0, qmax=15)
        assert quant.fake_quantize(np.array([3.5]), p)[0] == 4.0
        assert quant.fake_quantize(np.array([2.5]), p)[0] == 2.0

    def test_idempotent_bit_exact(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=2000) * 5.0
        for symmetric in (True, False):
            p = quant.calibrate_minmax(x, bits=4, symmetric=symmetric)
            once = quant.fake_quantize(x, p)
            twice = quant.fake_quantize(once, p)
            assert np.array_equal(once, twice)

    def test_error_bound_within_range(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-6.0, 6.0, 5000)
        p = quant.calibrate_minmax(x, bits=6)
        err = np.abs(quant.fake_quantize(x, p) - x)
        assert np.max(err) <= p.scale / 2 + 1e-15

    def test_per_channel_scales_do_not_mix(self):
        w = np.ones((8, 3)) * 0.01
        w[:, 1] = 100.0
        p = quant.calibrate_weight_per_channel(w, bits=4)
        assert p.scale.shape == (3,)
        assert p.scale[1] > 1000 * p.scale[0]
        wq = quant.fake_quantize(w, p)
        # the small channels survive per-channel quantization
        assert np.max(np.abs(wq[:, 0] - w[:, 0])) <= p.scale[0] / 2
        assert np.max(np.abs(wq[:, 2] - w[:, 2])) <= p.scale[2] / 2


@pytest.fixture(scope="module")
def trained_setup():
    """A briefly trained desk model with decent accuracy on easy data."""
    cfg = ModelConfig(d_model=32, depth=1, heads=2, classes=10, seed=0)
    model = build_model(cfg)
    train, eval_ = synth_generate(SynthConfig(samples_train=1024, samples_eval=512,
                                              noise_sigma=0.15, seed=0))
    ocfg = OptimizerConfig(lr_peak=3e-3, warmup_steps=20, total_steps=250, lambda_wd=0.05)
    state = OptimizerState.init(model)
    step = 0
    epoch = 0
    while step < ocfg.total_steps:
        for batch in batches(train, 64, seed=0, epoch=epoch):
            step += 1
            train_step(model, batch, "none", ocfg, state, step, lambda_wd=0.05)
            if step >= ocfg.total_steps:
                break
        epoch += 1
    return model, train, eval_


class TestQuantizeModel:
    def test_high_bits_sanity(self, trained_setup):
        model, train, eval_ = trained_setup
        fp_acc = quant.evaluate(model, eval_)
        assert fp_acc > 0.9
        qcfg = quant.QuantConfig(weight_bits=16, act_bits=16, calib_batches=4)
        qm = quant.quantize_model_w4a4(model, train, qcfg)
        q_acc = quant.evaluate(qm, eval_)
        assert abs(q_acc - fp_acc) <= 0.001 + 1e-12

    def test_outlier_injection_percentile_beats_minmax(self, trained_setup):
        model, train, eval_ = trained_setup
        poisoned = model.copy()
        # scale one hidden channel up and compensate downstream: the function
        # is unchanged in full precision but the activation grid must absorb
        # a 100x outlier channel
        poisoned.params["blocks.0.ffn.w1"][:, 3] *= 100.0
        poisoned.params["blocks.0.ffn.b1"][3] *= 100.0
        poisoned.params["blocks.0.ffn.w2"][3, :] /= 100.0
        base = quant.QuantConfig(weight_bits=4, act_bits=4, calib_batches=4,
                                 percentile_q=99.5)
        qm_mm = quant.quantize_model_w4a4(poisoned, train, dataclasses.replace(base, calibration="minmax"))
        qm_pc = quant.quantize_model_w4a4(poisoned, train, dataclasses.replace(base, calibration="percentile"))
        acc_mm = quant.evaluate(qm_mm, eval_)
        acc_pc = quant.evaluate(qm_pc, eval_)
        assert acc_pc >= acc_mm

    def test_zero_weight_model(self, trained_setup):
        _, train, eval_ = trained_setup
        cfg = ModelConfig(d_model=32, depth=1, heads=2, classes=10, seed=0)
        model = build_model(cfg)
        for k in model.params:
            model.params[k] = np.zeros_like(model.params[k])
        model.params["head.b"][4] = 1.0
        qm = quant.quantize_model_w4a4(model, train, quant.QuantConfig(calib_batches=2))
        logits = qm.logits(eval_.images[:8])
        assert np.all(np.argmax(logits, axis=-1) == 4)
        acc = quant.evaluate(qm, eval_)
        majority = float(np.mean(eval_.labels == 4))
        assert acc == pytest.approx(majority)

    def test_report_fields(self, trained_setup):
        model, train, eval_ = trained_setup
        qcfg = quant.QuantConfig(calib_batches=2)
        qm = quant.quantize_model_w4a4(model, train, qcfg)
        report = quant.quantization_report(qm, 0.9, 0.8)
        assert report["acc_drop"] == pytest.approx(0.1)
        assert "patch.w" in report["weights"]
        assert "blocks.0.attn.qkv" in report["activations"]
        assert report["calibration_sample_counts"]["head.w"] > 0

    def test_missing_observation_point_named(self, trained_setup, monkeypatch):
        model, train, _ = trained_setup
        real = quant.observation_points(model)
        monkeypatch.setattr(quant, "observation_points", lambda m: real + ["blocks.9.ghost"])
        with pytest.raises(quant.CalibrationError, match="blocks.9.ghost"):
            quant.quantize_model_w4a4(model, train, quant.QuantConfig(calib_batches=1))


class TestEvaluate:
    def test_perfect_on_single_sample(self, trained_setup):
        model, _, eval_ = trained_setup
        logits, _, _ = quant._forward(model, eval_.images[:1])
        label = int(np.argmax(logits))
        ds = Dataset(images=eval_.images[:1], labels=np.array([label]))
        assert quant.evaluate(model, ds) == 1.0

    def test_untrained_near_chance(self):
        cfg = ModelConfig(d_model=16, depth=1, heads=2, classes=10, seed=42)
        model = build_model(cfg)
        _, eval_ = synth_generate(SynthConfig(samples_train=64, samples_eval=2000, seed=3))
        acc = quant.evaluate(model, eval_)
        assert 0.02 <= acc <= 0.25

    def test_deterministic(self, trained_setup):
        model, _, eval_ = trained_setup
        assert quant.evaluate(model, eval_) == quant.evaluate(model, eval_)

    def test_empty_dataset_rejected(self, trained_setup):
        model, _, _ = trained_setup
        with pytest.raises(ValueError):
            quant.evaluate(model, Dataset(np.zeros((0, 1, 16, 16)), np.zeros(0, dtype=np.int64)))


def test_bits_range_validation():
    with pytest.raises(ValueError):
        quant.QuantConfig(weight_bits=1)
    with pytest.raises(ValueError):
        quant.QuantConfig(act_bits=17)
    quant.QuantConfig(weight_bits=16, act_bits=16)  # sanity setting allowed
