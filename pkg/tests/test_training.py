import math

import numpy as np
import pytest

from aquafuse import nn, tensor as tz, training
from aquafuse.tensor import Tensor, backward
from aquafuse.training import (
    Adam,
    LogitPair,
    LossWeights,
    TrainConfig,
    TrainingBatch,
    TrainingError,
    make_toy_batches,
    rasgan_d_loss,
    rasgan_g_loss,
    total_generator_loss,
    train_toy,
)

TWO_LN2 = 2.0 * math.log(2.0)


def logit_pair(rng, shape=(2, 1, 3, 3), dtype=np.float64):
    return LogitPair(
        c_real=Tensor(rng.standard_normal(shape), dtype=dtype),
        c_fake=Tensor(rng.standard_normal(shape), dtype=dtype),
    )


def rasgan_scalar_oracle(c_real, c_fake):
    """Straight transliteration of the relativistic-average objective."""
    mean_fake = c_fake.mean()
    mean_real = c_real.mean()

    def sig(z):
        return 1.0 / (1.0 + math.exp(-z))

    total_real = 0.0
    for v in c_real.reshape(-1):
        total_real += math.log(max(sig(v - mean_fake), 1e-12))
    total_fake = 0.0
    for v in c_fake.reshape(-1):
        total_fake += math.log(max(1.0 - sig(v - mean_real), 1e-12))
    return -(total_real / c_real.size) - (total_fake / c_fake.size)


class TestRasganLosses:
    def test_identical_logits_fixed_point(self):
        logits = Tensor(np.full((2, 1, 4, 4), 0.73), dtype=np.float64)
        pair = LogitPair(c_real=logits, c_fake=Tensor(logits.data.copy(), dtype=np.float64))
        assert rasgan_d_loss(pair).item() == pytest.approx(TWO_LN2, abs=1e-9)
        assert rasgan_g_loss(pair).item() == pytest.approx(TWO_LN2, abs=1e-9)

    def test_saturation_drives_loss_to_zero(self):
        real = Tensor(np.full((1, 1, 2, 2), 20.0), dtype=np.float64)
        fake = Tensor(np.zeros((1, 1, 2, 2)), dtype=np.float64)
        assert rasgan_d_loss(LogitPair(real, fake)).item() <= 1e-8

    def test_matches_scalar_oracle(self, rng):
        for _ in range(5):
            pair = logit_pair(rng)
            want = rasgan_scalar_oracle(pair.c_real.data, pair.c_fake.data)
            assert rasgan_d_loss(pair).item() == pytest.approx(want, abs=1e-10)

    def test_role_swap_symmetry(self, rng):
        pair = logit_pair(rng)
        swapped = LogitPair(c_real=pair.c_fake, c_fake=pair.c_real)
        assert rasgan_g_loss(pair).item() == rasgan_d_loss(swapped).item()

    def test_shape_mismatch(self, rng):
        with pytest.raises(tz.DimensionError):
            LogitPair(c_real=Tensor(np.zeros((1, 1, 2, 2))),
                      c_fake=Tensor(np.zeros((1, 1, 3, 3))))

    def test_gradcheck(self, rng):
        real = Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True, dtype=np.float64)
        fake = Tensor(rng.standard_normal((2, 1, 3, 3)), requires_grad=True, dtype=np.float64)
        worst, _ = tz.finite_difference_check(
            lambda: rasgan_d_loss(LogitPair(real, fake)), [real, fake],
            samples_per_leaf=6, rng=rng)
        assert worst <= 1e-4


class TestL1Terms:
    def test_identical_zero(self, rng):
        a = Tensor(rng.standard_normal((1, 3, 4, 4)), dtype=np.float64)
        assert training.ground_truth_l1(a, a).item() == 0.0

    def test_uniform_gap(self, rng):
        a = Tensor(rng.standard_normal((1, 3, 4, 4)), dtype=np.float64)
        b = Tensor(a.data - 0.5, dtype=np.float64)
        assert training.fusion_guide_l1(a, b).item() == pytest.approx(0.5, rel=1e-12)

    def test_summation_oracle(self, rng):
        a = Tensor(rng.standard_normal((2, 3, 5, 5)), dtype=np.float64)
        b = Tensor(rng.standard_normal((2, 3, 5, 5)), dtype=np.float64)
        want = sum(abs(float(x) - float(y))
                   for x, y in zip(a.data.reshape(-1), b.data.reshape(-1))) / a.numel()
        assert training.ground_truth_l1(a, b).item() == pytest.approx(want, abs=1e-12)


class TestTotalLoss:
    def build(self, rng, gap_gt=1.0, gap_fe=1.0, constant_logits=True):
        g_y = Tensor(rng.uniform(-0.3, 0.3, (2, 3, 4, 4)), dtype=np.float64)
        batch = TrainingBatch(
            y=Tensor(g_y.data.copy(), dtype=np.float64),
            x=Tensor(g_y.data + gap_gt, dtype=np.float64),
            x_fe=Tensor(g_y.data - gap_fe, dtype=np.float64),
        )
        if constant_logits:  # 2*ln2 fixed point needs constant maps
            logits = Tensor(np.full((2, 1, 2, 2), 0.37), dtype=np.float64)
        else:
            logits = Tensor(rng.standard_normal((2, 1, 2, 2)), dtype=np.float64)
        pair = LogitPair(c_real=logits, c_fake=Tensor(logits.data.copy(), dtype=np.float64))
        return pair, batch, g_y

    def test_zero_weights_reduce_to_adversarial(self, rng):
        pair, batch, g_y = self.build(rng)
        total, _, _ = total_generator_loss(pair, batch, g_y, LossWeights(0.0, 0.0))
        assert total.item() == pytest.approx(rasgan_g_loss(pair).item(), rel=1e-12)

    def test_identity_everything_fixed_point(self, rng):
        pair, batch, g_y = self.build(rng, gap_gt=0.0, gap_fe=0.0)
        total, _, _ = total_generator_loss(pair, batch, g_y, LossWeights(10.0, 0.5))
        assert total.item() == pytest.approx(TWO_LN2, abs=1e-9)

    def test_unit_gaps_reference_value(self, rng):
        pair, batch, g_y = self.build(rng, gap_gt=1.0, gap_fe=1.0)
        total, l_gt, l_fe = total_generator_loss(pair, batch, g_y, LossWeights(10.0, 0.5))
        assert l_gt.item() == pytest.approx(1.0, rel=1e-12)
        assert l_fe.item() == pytest.approx(1.0, rel=1e-12)
        assert total.item() == pytest.approx(TWO_LN2 + 10.5, abs=1e-9)

    def test_affine_in_weights(self, rng):
        pair, batch, g_y = self.build(rng, gap_gt=0.7, gap_fe=0.3)
        base, l_gt, l_fe = total_generator_loss(pair, batch, g_y, LossWeights(0.0, 0.0))
        for lam_gt, lam_fe in ((1.0, 0.0), (3.0, 2.0), (10.0, 0.5)):
            total, _, _ = total_generator_loss(pair, batch, g_y, LossWeights(lam_gt, lam_fe))
            want = base.item() + lam_gt * l_gt.item() + lam_fe * l_fe.item()
            assert total.item() == pytest.approx(want, rel=1e-12)

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            LossWeights(-1.0, 0.5)


class TestAdam:
    def test_first_step_moves_by_lr(self, rng):
        p = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True, dtype=np.float64)
        p.grad = rng.standard_normal(p.shape) * 5.0
        before = p.data.copy()
        opt = Adam([("p", p)], lr=1e-3)
        opt.step()
        moves = np.abs(p.data - before)
        np.testing.assert_allclose(moves, 1e-3, rtol=1e-5)

    def test_zero_gradient_no_motion(self, rng):
        p = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True, dtype=np.float64)
        p.grad = np.zeros(p.shape)
        before = p.data.copy()
        Adam([("p", p)], lr=0.1).step()
        np.testing.assert_array_equal(p.data, before)

    def test_quadratic_bowl_convergence(self):
        w = Tensor(np.full((1, 1, 1, 8), 1.0) / math.sqrt(8), requires_grad=True,
                   dtype=np.float64)
        opt = Adam([("w", w)], lr=0.1)
        for _ in range(100):
            opt.zero_grad()
            loss = tz.scale(tz.mean(tz.mul(w, w)), float(w.numel()))
            backward(loss)
            opt.step()
        assert np.linalg.norm(w.data) < 1e-2

    def test_non_finite_gradient_aborts(self, rng):
        p = Tensor(rng.standard_normal((1, 1, 2, 2)), requires_grad=True, dtype=np.float64)
        p.grad = np.full(p.shape, np.inf)
        with pytest.raises(TrainingError, match="non-finite"):
            Adam([("p", p)]).step()

    def test_deterministic(self, rng):
        def run():
            p = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True, dtype=np.float64)
            opt = Adam([("p", p)], lr=0.05)
            rr = np.random.default_rng(3)
            for _ in range(20):
                p.grad = rr.standard_normal(p.shape)
                opt.step()
            return p.data.tobytes()

        assert run() == run()


class TestToyData:
    def test_shapes_and_range(self):
        batches = make_toy_batches(4, 4, 32, seed=1)
        assert len(batches) == 1
        batch = batches[0]
        assert batch.y.shape == batch.x.shape == batch.x_fe.shape == (4, 3, 32, 32)
        for t in (batch.y, batch.x, batch.x_fe):
            assert t.data.min() >= -1.0 and t.data.max() <= 1.0

    def test_deterministic(self):
        a = make_toy_batches(2, 2, 16, seed=7)[0]
        b = make_toy_batches(2, 2, 16, seed=7)[0]
        assert a.y.data.tobytes() == b.y.data.tobytes()
        assert a.x_fe.data.tobytes() == b.x_fe.data.tobytes()

    def test_degradation_casts_color(self):
        batch = make_toy_batches(4, 4, 32, seed=2)[0]
        y = training.to_unit(batch.y)
        x = training.to_unit(batch.x)
        # red is attenuated hardest, so the raw input is red-poor vs truth
        assert y[..., 0].mean() < x[..., 0].mean()


class TestTrainToy:
    def short_config(self, **kw):
        defaults = dict(steps=4, pair_count=2, batch_size=2, image_size=32, seed=5)
        defaults.update(kw)
        return TrainConfig(**defaults)

    def test_runs_and_logs(self):
        result = train_toy(self.short_config())
        assert len(result.curves["step"]) == 4
        for key in ("loss_d", "loss_g", "loss_gt", "loss_fe"):
            assert all(np.isfinite(v) for v in result.curves[key])

    def test_bitwise_reproducible(self):
        a = train_toy(self.short_config())
        b = train_toy(self.short_config())
        assert a.curves_csv() == b.curves_csv()
        for (_, pa), (_, pb) in zip(a.generator.named_parameters(),
                                    b.generator.named_parameters()):
            assert pa.data.tobytes() == pb.data.tobytes()

    def test_curves_csv_schema(self):
        result = train_toy(self.short_config())
        text = result.curves_csv()
        assert text.startswith("# schema=1\nstep,loss_d,loss_g,loss_gt,loss_fe\n")
        assert len(text.strip().splitlines()) == 2 + 4

    def test_zero_fe_weight_never_touches_updates(self, rng):
        # gradients with lambda_fe=0 must equal gradients with the term absent
        batches = make_toy_batches(2, 2, 32, seed=9)
        batch = batches[0]

        def grads(include_fe_term):
            gen = nn.GeneratorNet(seed=11)
            disc = nn.DiscriminatorNet(seed=12)
            g_y = gen(batch.y, batch.x_fe)
            pair = LogitPair(c_real=disc(batch.x), c_fake=disc(g_y))
            if include_fe_term:
                total, _, _ = total_generator_loss(pair, batch, g_y, LossWeights(10.0, 0.0))
            else:
                total = tz.add(rasgan_g_loss(pair),
                               tz.scale(training.ground_truth_l1(batch.x, g_y), 10.0))
            backward(total)
            return [p.grad.copy() for _, p in gen.named_parameters()]

        for ga, gb in zip(grads(True), grads(False)):
            np.testing.assert_array_equal(ga, gb)

    def test_nan_halts_with_step_index(self):
        cfg = self.short_config(steps=3)
        batches = make_toy_batches(2, 2, 32, seed=5)

        calls = {"n": 0}
        real_item = tz.Tensor.item

        def poisoned(selftensor):
            value = real_item(selftensor)
            calls["n"] += 1
            return float("nan") if calls["n"] == 3 else value

        tz.Tensor.item = poisoned
        try:
            with pytest.raises(TrainingError, match="at step 0"):
                train_toy(cfg, batches)
        finally:
            tz.Tensor.item = real_item


class TestGradcheckSuite:
    def test_ops_pass(self):
        entries = training.gradient_check_suite(seed=3, include_full_generator=False)
        table = training.gradcheck_table(entries)
        assert "FAIL" not in table
        assert all(e.passed for e in entries)

    def test_deterministic_table(self):
        a = training.gradcheck_table(training.gradient_check_suite(seed=3, include_full_generator=False))
        b = training.gradcheck_table(training.gradient_check_suite(seed=3, include_full_generator=False))
        assert a == b
