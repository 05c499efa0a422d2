import numpy as np
import pytest

from cdreg import pairs, regularizers as reg
from cdreg.model import ActivationTrace, ModelConfig, build_model

W1_HAND = np.diag([1.0, 2.0])
W2_HAND = np.array([[1.0, 1.0], [0.0, 1.0]])


def rand_pair(rng, max_dim=10):
    dm = int(rng.integers(2, max_dim))
    di = int(rng.integers(2, max_dim))
    do = int(rng.integers(2, max_dim))
    return rng.normal(size=(dm, di)), rng.normal(size=(do, dm))


def fd_energy_grad(w1, w2, wrt, h=1e-6):
    target = {"w1": w1, "w2": w2}[wrt]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        ep = float(np.sum((w2 @ w1) ** 2))
        flat[i] = orig - h
        em = float(np.sum((w2 @ w1) ** 2))
        flat[i] = orig
        gflat[i] = (ep - em) / (2 * h)
    return grad


class TestCdGradients:
    def test_w2_hand(self):
        assert np.allclose(reg.cd_gradient_w2(W1_HAND, W2_HAND),
                           np.array([[2.0, 8.0], [0.0, 8.0]]), atol=1e-14)

    def test_w2_zero(self):
        assert np.array_equal(reg.cd_gradient_w2(W1_HAND, np.zeros((2, 2))), np.zeros((2, 2)))

    def test_w2_orthogonal_upstream(self):
        rng = np.random.default_rng(0)
        q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
        w2 = rng.normal(size=(3, 5))
        assert np.allclose(reg.cd_gradient_w2(q, w2), 2.0 * w2, atol=1e-12)

    def test_w1_hand(self):
        assert np.allclose(reg.cd_gradient_w1(W1_HAND, W2_HAND),
                           np.array([[2.0, 4.0], [2.0, 8.0]]), atol=1e-14)

    def test_w1_zero(self):
        assert np.array_equal(reg.cd_gradient_w1(np.zeros((2, 2)), W2_HAND), np.zeros((2, 2)))

    def test_w1_orthogonal_downstream(self):
        rng = np.random.default_rng(1)
        q, _ = np.linalg.qr(rng.normal(size=(4, 4)))
        w1 = rng.normal(size=(4, 6))
        assert np.allclose(reg.cd_gradient_w1(w1, q), 2.0 * w1, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            reg.cd_gradient_w2(np.zeros((3, 2)), np.zeros((2, 2)))

    def test_finite_differences(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            w1, w2 = rand_pair(rng)
            for wrt, fn in (("w1", reg.cd_gradient_w1), ("w2", reg.cd_gradient_w2)):
                fd = fd_energy_grad(w1, w2, wrt)
                an = fn(w1, w2)
                denom = np.maximum(np.maximum(np.abs(fd), np.abs(an)), 1e-8)
                assert np.max(np.abs(fd - an) / denom) <= 1e-6


class TestRowGradient:
    def test_null_space_row(self):
        # rank-1 upstream; a row orthogonal to its left direction
        u = np.array([1.0, 0.0, 0.0])
        v = np.array([0.0, 1.0])
        w1 = np.outer(u, v)
        row = np.array([0.0, 1.0, 1.0])
        assert np.max(np.abs(reg.cd_row_gradient(w1, row))) <= 1e-12

    def test_top_direction_row(self):
        got = reg.cd_row_gradient(np.diag([3.0, 1.0]), np.array([1.0, 0.0]))
        assert np.allclose(got, np.array([18.0, 0.0]), atol=1e-10)

    def test_matches_matrix_gradient_rows(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            w1, w2 = rand_pair(rng)
            full = reg.cd_gradient_w2(w1, w2)
            for j in range(w2.shape[0]):
                row = reg.cd_row_gradient(w1, w2[j])
                assert np.max(np.abs(row - full[j])) <= 1e-10

    def test_row_length_check(self):
        with pytest.raises(ValueError, match="row length"):
            reg.cd_row_gradient(np.zeros((3, 2)), np.zeros(2))


class TestNormalizedDirection:
    def test_identity_upstream(self):
        w2 = np.array([[1.0, 2.0], [3.0, 4.0]])
        assert np.allclose(reg.normalized_cd_direction(np.eye(2), w2), w2, atol=1e-14)

    def test_hand_value(self):
        got = reg.normalized_cd_direction(W1_HAND, W2_HAND)
        assert np.allclose(got, np.array([[0.4, 1.6], [0.0, 1.6]]), atol=1e-14)

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        w1, w2 = rand_pair(rng)
        base = reg.normalized_cd_direction(w1, w2)
        scaled = reg.normalized_cd_direction(10.0 * w1, w2)
        assert np.max(np.abs(scaled - base)) <= 1e-12 * max(np.max(np.abs(base)), 1.0)

    def test_zero_upstream_error(self):
        with pytest.raises(ValueError, match="zero Frobenius"):
            reg.normalized_cd_direction(np.zeros((2, 2)), np.eye(2))


def install_pair(w1_canonical, w2_canonical):
    d = w1_canonical.shape[0]
    model = build_model(ModelConfig(d_model=d, heads=1, depth=1, seed=0))
    pair = pairs.MatrixPair("functional", "blocks.0.attn.wv", "blocks.0.attn.wo")
    model.params["blocks.0.attn.wv"] = np.ascontiguousarray(w1_canonical.T)
    model.params["blocks.0.attn.wo"] = np.ascontiguousarray(w2_canonical.T)
    return model, pair


class TestApplyCdUpdate:
    def test_hand_example(self):
        model, pair = install_pair(W1_HAND, W2_HAND)
        cfg = reg.CdConfig(lambda_cd=0.5, normalized=False)
        report = reg.apply_cd_update(model, [pair], eta=0.1, cfg=cfg)
        got = pairs.canonical_matrix(model, "blocks.0.attn.wo")
        assert np.allclose(got, np.array([[0.95, 0.8], [0.0, 0.8]]), atol=1e-14)
        assert len(report) == 1
        assert report[0].target == "blocks.0.attn.wo"
        assert np.isfinite(report[0].energy_after)

    def test_zero_lambda_bit_identical(self):
        model = build_model(ModelConfig(d_model=16, heads=2, depth=2, seed=5))
        before = {k: v.copy() for k, v in model.params.items()}
        plist = pairs.enumerate_pairs(model, "A+B")
        reg.apply_cd_update(model, plist, eta=0.1, cfg=reg.CdConfig(lambda_cd=0.0))
        for k in before:
            assert np.array_equal(model.params[k], before[k])

    def test_descent_on_random_models(self):
        for seed in range(5):
            model = build_model(ModelConfig(d_model=16, heads=2, depth=2, seed=seed))
            # make the weights less tiny so energies are meaningful
            rng = np.random.default_rng(seed)
            for k, v in model.params.items():
                if v.ndim == 2 and k != "pos":
                    model.params[k] = rng.normal(size=v.shape) * 0.2
            plist = pairs.enumerate_pairs(model, "A+B")
            before = [pairs.pair_energy(p, model) for p in plist]
            reg.apply_cd_update(model, plist, eta=1.0, cfg=reg.CdConfig(lambda_cd=1e-3))
            after = [pairs.pair_energy(p, model) for p in plist]
            for b, a in zip(before, after):
                if b > 0:
                    assert a < b

    def test_pair_set_c_updates_both(self):
        model = build_model(ModelConfig(d_model=16, heads=2, depth=1, seed=9))
        plist = pairs.enumerate_pairs(model, "C")
        before_v = model.params["blocks.0.attn.wv"].copy()
        before_o = model.params["blocks.0.attn.wo"].copy()
        before_ln = model.params["blocks.0.ln1.g"].copy()
        reg.apply_cd_update(model, plist, eta=0.5, cfg=reg.CdConfig(lambda_cd=0.01))
        assert not np.array_equal(model.params["blocks.0.attn.wv"], before_v)
        assert not np.array_equal(model.params["blocks.0.attn.wo"], before_o)
        assert np.array_equal(model.params["blocks.0.ln1.g"], before_ln)

    def test_upstream_read_pre_update(self):
        # the (w1 -> w2) update must use w1 as it was before w1's own update
        model = build_model(ModelConfig(d_model=8, heads=1, depth=1, seed=3))
        plist = pairs.enumerate_pairs(model, "C")
        cfg = reg.CdConfig(lambda_cd=0.05, normalized=False)
        eta = 0.5
        expected = {}
        for pair in plist:
            w1 = pairs.canonical_matrix(model, pair.upstream)
            w2 = pairs.canonical_matrix(model, pair.downstream)
            expected[pair.downstream] = w2 - eta * cfg.lambda_cd * (w2 @ w1 @ w1.T)
            expected[pair.upstream] = w1 - eta * cfg.lambda_cd * (w2.T @ w2 @ w1)
        reg.apply_cd_update(model, plist, eta=eta, cfg=cfg)
        for ref, want in expected.items():
            got = pairs.canonical_matrix(model, ref)
            assert np.allclose(got, want, atol=1e-12), ref

    def test_per_matrix_override(self):
        model, pair = install_pair(np.eye(2), np.eye(2))
        cfg = reg.CdConfig(lambda_cd=0.0,
                           per_matrix_overrides={"blocks.0.attn.wo": 0.5})
        reg.apply_cd_update(model, [pair], eta=1.0, cfg=cfg)
        got = pairs.canonical_matrix(model, "blocks.0.attn.wo")
        assert np.allclose(got, 0.5 * np.eye(2), atol=1e-14)

    def test_non_finite_update_named(self):
        model, pair = install_pair(np.eye(2), np.eye(2))
        cfg = reg.CdConfig(lambda_cd=1e308, normalized=False)
        with pytest.raises(FloatingPointError, match="blocks.0.attn.wv->blocks.0.attn.wo"):
            reg.apply_cd_update(model, [pair], eta=1e308, cfg=cfg)


class TestCdLoss:
    def test_identity_upstream_value(self):
        w2 = np.array([[1.0, 2.0], [0.5, 1.5]])
        model, pair = install_pair(np.eye(2), w2)
        value, raw, grads = reg.cd_loss(model, [pair], reg.CdConfig(lambda_cd=1.0))
        assert value == pytest.approx(float(np.sum(w2**2)), rel=1e-14)
        assert raw == pytest.approx(value, rel=1e-14)

    def test_w2_gradient_is_twice_decoupled_direction(self):
        rng = np.random.default_rng(5)
        w1 = rng.normal(size=(4, 4))
        w2 = rng.normal(size=(4, 4))
        model, pair = install_pair(w1, w2)
        _, _, grads = reg.cd_loss(model, [pair], reg.CdConfig(lambda_cd=1.0))
        got = grads["blocks.0.attn.wo"].T  # storage -> canonical
        want = 2.0 * reg.normalized_cd_direction(w1, w2)
        assert np.max(np.abs(got - want)) <= 1e-10

    def test_w1_gradient_matches_scaled_exact_gradient(self):
        rng = np.random.default_rng(6)
        w1 = rng.normal(size=(4, 4))
        w2 = rng.normal(size=(4, 4))
        model, pair = install_pair(w1, w2)
        _, _, grads = reg.cd_loss(model, [pair], reg.CdConfig(lambda_cd=1.0))
        got = grads["blocks.0.attn.wv"].T
        factor = pairs.upstream_normalizer(w1)
        want = factor * reg.cd_gradient_w1(w1, w2)
        assert np.max(np.abs(got - want)) <= 1e-10

    def test_w1_gradient_finite_difference_frozen_normalizer(self):
        # the normalizer is a constant of the step; FD against that objective
        rng = np.random.default_rng(7)
        w1 = rng.normal(size=(3, 4))
        w2 = rng.normal(size=(5, 3))
        factor = pairs.upstream_normalizer(w1)
        an = factor * reg.cd_gradient_w1(w1, w2)
        h = 1e-6
        flat = w1.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            ep = factor * float(np.sum((w2 @ w1) ** 2))
            flat[i] = orig - h
            em = factor * float(np.sum((w2 @ w1) ** 2))
            flat[i] = orig
            fd = (ep - em) / (2 * h)
            assert abs(fd - an.reshape(-1)[i]) <= 1e-6 * max(abs(fd), abs(an.reshape(-1)[i]), 1e-8)

    def test_gradients_flow_to_ln_scale(self):
        model = build_model(ModelConfig(d_model=8, heads=2, depth=1, seed=1))
        plist = pairs.enumerate_pairs(model, "A")
        _, _, grads = reg.cd_loss(model, plist, reg.CdConfig(lambda_cd=1.0))
        assert "blocks.0.ln1.g" in grads
        assert "blocks.0.attn.wq" in grads
        assert grads["blocks.0.ln1.g"].shape == (8,)

    def test_stabilizer_scales_gradients(self):
        w1 = np.eye(3)
        w2 = np.diag([1.0, 2.0, 3.0])
        model, pair = install_pair(w1, w2)
        v1, _, g1 = reg.cd_loss(model, [pair], reg.CdConfig(lambda_cd=1.0), stabilizer=1.0)
        v2, _, g2 = reg.cd_loss(model, [pair], reg.CdConfig(lambda_cd=1.0), stabilizer=2.0)
        assert v2 == pytest.approx(2.0 * v1, rel=1e-14)
        assert np.allclose(g2["blocks.0.attn.wo"], 2.0 * g1["blocks.0.attn.wo"], rtol=1e-14)


class TestTweo:
    def make_trace(self, value, blocks=1, shape=(2, 3, 4)):
        trace = ActivationTrace()
        trace.block_outputs = [np.full(shape, value) for _ in range(blocks)]
        return trace

    def test_unit_value_at_tau(self):
        cfg = reg.TweoConfig(tau=3.0, p=4, epsilon=0.0)
        assert reg.tweo_loss(self.make_trace(3.0), cfg) == 1.0
        assert reg.tweo_loss(self.make_trace(-3.0), cfg) == 1.0

    def test_sixteen_at_twice_tau(self):
        cfg = reg.TweoConfig(tau=3.0, p=4, epsilon=0.0)
        assert reg.tweo_loss(self.make_trace(6.0), cfg) == 16.0

    def test_zero_activations(self):
        cfg = reg.TweoConfig(tau=3.0, p=4, epsilon=0.0)
        assert reg.tweo_loss(self.make_trace(0.0, blocks=3), cfg) == 0.0

    def test_requires_block_outputs(self):
        with pytest.raises(ValueError, match="block outputs"):
            reg.tweo_loss(ActivationTrace(), reg.TweoConfig())

    def test_grad_fn_finite_difference(self):
        cfg = reg.TweoConfig(tau=2.0, p=4, epsilon=1e-6)
        rng = np.random.default_rng(8)
        outputs = [rng.normal(size=(2, 3)) * 3.0 for _ in range(2)]
        fn = reg.make_tweo_grad_fn(cfg, weight=0.7)
        value, grads = fn(outputs)
        h = 1e-6
        for li in range(2):
            flat = outputs[li].reshape(-1)
            gflat = grads[li].reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                vp, _ = fn(outputs)
                flat[i] = orig - h
                vm, _ = fn(outputs)
                flat[i] = orig
                fd = (vp - vm) / (2 * h)
                # quartic term: FD cancellation noise ~1e-10 absolute
                assert abs(fd - gflat[i]) <= 1e-5 * max(abs(fd), abs(gflat[i]), 1e-4)

    def test_cosine_schedule(self):
        cfg = reg.TweoConfig(lambda_base=0.4, lambda_schedule="cosine")
        assert cfg.weight_at(0, 100) == pytest.approx(0.4)
        assert cfg.weight_at(50, 100) == pytest.approx(0.2)
        assert cfg.weight_at(100, 100) == pytest.approx(0.0, abs=1e-16)

    def test_validation(self):
        with pytest.raises(ValueError):
            reg.TweoConfig(tau=0.0)
        with pytest.raises(ValueError):
            reg.TweoConfig(p=0)
        with pytest.raises(ValueError):
            reg.TweoConfig(epsilon=-1.0)


class TestBudgetSplit:
    def test_reference_values(self):
        assert reg.budget_split(0.05, 0.1) == (0.045, 0.005)

    def test_cd_disabled(self):
        assert reg.budget_split(0.05, 0.0) == (0.05, 0.0)

    def test_one_tenth_of_larger_budget(self):
        assert reg.budget_split(0.1, 0.1) == (0.09, 0.01)

    def test_sum_conserved_to_machine_precision(self):
        rng = np.random.default_rng(9)
        for _ in range(100):
            base = float(rng.uniform(0.001, 0.5))
            ratio = float(rng.uniform(0.0, 0.9))
            wd, cd = reg.budget_split(base, ratio)
            assert abs((wd + cd) - base) <= 4 * np.finfo(float).eps * base

    def test_negative_inputs_rejected(self):
        with pytest.raises(ValueError):
            reg.budget_split(-0.1, 0.1)
        with pytest.raises(ValueError):
            reg.budget_split(0.1, -0.1)
        with pytest.raises(ValueError):
            reg.budget_split(0.1, 1.0)

    def test_effective_weight_decay(self):
        assert reg.effective_weight_decay(0.05, 0.005) == 0.045
        with pytest.raises(ValueError):
            reg.effective_weight_decay(0.05, 0.06)


class TestCompatibilityProperties:
    def test_row_gradient_nonnegative_inner_product(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            w1, w2 = rand_pair(rng)
            for j in range(w2.shape[0]):
                g = reg.cd_row_gradient(w1, w2[j])
                assert float(g @ w2[j]) >= -1e-12

    def test_gram_psd(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            w1 = rng.normal(size=(5, 7))
            gram = w1 @ w1.T
            z = rng.normal(size=5)
            assert float(z @ gram @ z) >= -1e-12
