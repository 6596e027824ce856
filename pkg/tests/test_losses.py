import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from biuda.errors import NumericalError
from biuda.losses import (
    DICE_EPS,
    LOG_EPS,
    LossParts,
    LossWeights,
    cpc_loss,
    cycle_loss,
    gan_loss_d,
    gan_loss_g,
    lc_loss,
    one_hot,
    seg_loss,
    seg_loss_unnormalized,
    total_loss,
)

T = torch.tensor


def t64(arr):
    return torch.as_tensor(np.asarray(arr), dtype=torch.float64)


class TestCpcLoss:
    def test_identity_is_zero(self):
        c = torch.rand(2, 3, 4, 4)
        p = torch.rand(2, 8)
        assert cpc_loss(c, c.clone(), p, p.clone()).item() == 0.0

    def test_unit_offset(self):
        c = torch.zeros(2, 3, 4, 4)
        ch = torch.ones(2, 3, 4, 4)
        p = torch.rand(2, 8)
        assert cpc_loss(c, ch, p, p.clone()).item() == pytest.approx(1.0, abs=1e-7)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            cpc_loss(torch.rand(2, 3), torch.rand(2, 4), torch.rand(2, 2), torch.rand(2, 2))

    def test_matches_oracle(self, rng):
        for _ in range(100):
            c = rng.normal(size=(2, 3, 4, 4))
            ch = rng.normal(size=(2, 3, 4, 4))
            p = rng.normal(size=(2, 5))
            ph = rng.normal(size=(2, 5))
            got = cpc_loss(t64(c), t64(ch), t64(p), t64(ph)).item()
            assert got == pytest.approx(oracles.cpc(c, ch, p, ph), abs=1e-6)


class TestSegLoss:
    def test_perfect_prediction_is_zero(self, rng):
        a = oracles.random_onehot(rng, (3, 4, 4))
        loss = seg_loss(t64(a), t64(a.copy()))
        assert abs(loss.item()) <= 1e-4

    def test_single_pixel_closed_form(self):
        a = t64([[[1.0]], [[0.0]]])
        m = t64([[[0.5]], [[0.5]]])
        ce = -0.5 * math.log(0.5)
        d1 = (1.0 + DICE_EPS) / (1.25 + DICE_EPS)
        d2 = DICE_EPS / (0.25 + DICE_EPS)
        expected = ce + 1.0 - 0.5 * (d1 + d2)
        assert seg_loss(a, m).item() == pytest.approx(expected, abs=1e-9)

    def test_matches_oracle(self, rng):
        for _ in range(100):
            a = oracles.random_onehot(rng, (3, 4, 4))
            m = oracles.random_simplex(rng, (3, 4, 4))
            got = seg_loss(t64(a), t64(m)).item()
            assert got == pytest.approx(oracles.seg(a, m), abs=1e-6)

    def test_batched_matches_oracle(self, rng):
        a = oracles.random_onehot(rng, (2, 3, 4, 4))
        m = oracles.random_simplex(rng, (2, 3, 4, 4))
        got = seg_loss(t64(a), t64(m)).item()
        assert got == pytest.approx(oracles.seg(a, m), abs=1e-6)

    def test_strict_mode_rejects_non_simplex(self, rng):
        a = oracles.random_onehot(rng, (3, 4, 4))
        m = oracles.random_simplex(rng, (3, 4, 4)) + 0.01
        with pytest.raises(ValueError, match="sum to 1"):
            seg_loss(t64(a), t64(m), strict=True)

    def test_nonnegative(self, rng):
        for _ in range(50):
            a = oracles.random_onehot(rng, (4, 3, 3))
            m = oracles.random_simplex(rng, (4, 3, 3))
            assert seg_loss(t64(a), t64(m)).item() >= 0.0


class TestSegLossUnnormalized:
    def test_tiny_input_reference_value(self):
        # one pixel, two classes: ratio term only defined where a or m nonzero
        a = t64([[[1.0]], [[0.0]]])
        m = t64([[[0.8]], [[0.2]]])
        expected = (
            1.0
            - 0.5 * math.log(0.8)
            - (2 * 0.8 / (1 + 0.64) + 0.0 / (0.04))
        )
        got = seg_loss_unnormalized(a, m).item()
        assert got == pytest.approx(expected, abs=1e-9)

    def test_grows_with_size_unlike_normalized(self, rng):
        a_small = oracles.random_onehot(rng, (2, 2, 2))
        m_small = oracles.random_simplex(rng, (2, 2, 2))
        a_big = np.tile(a_small, (1, 4, 4))
        m_big = np.tile(m_small, (1, 4, 4))
        small = seg_loss_unnormalized(t64(a_small), t64(m_small)).item()
        big = seg_loss_unnormalized(t64(a_big), t64(m_big)).item()
        assert abs(big - 1.0) > abs(small - 1.0) * 4
        normalized_small = seg_loss(t64(a_small), t64(m_small)).item()
        normalized_big = seg_loss(t64(a_big), t64(m_big)).item()
        assert normalized_big == pytest.approx(normalized_small, rel=1e-3)


class TestLcLoss:
    def test_zero_at_identity(self, rng):
        a = oracles.random_onehot(rng, (3, 4, 4))
        assert abs(lc_loss(t64(a), t64(a.copy()), t64(a.copy())).item()) <= 2e-4

    def test_additive_identity(self, rng):
        a = oracles.random_onehot(rng, (3, 4, 4))
        m = oracles.random_simplex(rng, (3, 4, 4))
        combined = lc_loss(t64(a), t64(m), t64(a.copy())).item()
        direct = seg_loss(t64(a), t64(m)).item()
        assert combined == pytest.approx(direct, abs=1e-6)

    def test_matches_oracle_composition(self, rng):
        for _ in range(100):
            a = oracles.random_onehot(rng, (3, 4, 4))
            m1 = oracles.random_simplex(rng, (3, 4, 4))
            m2 = oracles.random_simplex(rng, (3, 4, 4))
            got = lc_loss(t64(a), t64(m1), t64(m2)).item()
            assert got == pytest.approx(oracles.lc(a, m1, m2), abs=1e-6)


class TestCycleLoss:
    def test_identity_is_zero(self):
        x = torch.rand(2, 1, 8, 8)
        assert cycle_loss(x, x.clone()).item() == 0.0

    def test_constant_offset(self):
        x = torch.zeros(2, 1, 4, 4)
        assert cycle_loss(x, torch.full_like(x, 0.25)).item() == pytest.approx(0.25)

    def test_matches_oracle(self, rng):
        for _ in range(100):
            x = rng.uniform(size=(2, 1, 4, 4))
            y = rng.uniform(size=(2, 1, 4, 4))
            got = cycle_loss(t64(x), t64(y)).item()
            assert got == pytest.approx(oracles.cycle(x, y), abs=1e-6)


class TestGanLosses:
    def test_perfect_discriminator(self):
        real = torch.full((2, 1, 3, 3), 1.0 - LOG_EPS, dtype=torch.float64)
        fake = torch.full((2, 1, 3, 3), LOG_EPS, dtype=torch.float64)
        assert gan_loss_d(real, fake).item() == pytest.approx(0.0, abs=1e-6)

    def test_coin_flip_discriminator(self):
        half = torch.full((2, 1, 3, 3), 0.5, dtype=torch.float64)
        assert gan_loss_d(half, half.clone()).item() == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_generator_wins(self):
        fake = torch.full((4,), 1.0 - LOG_EPS, dtype=torch.float64)
        assert gan_loss_g(fake).item() == pytest.approx(0.0, abs=1e-6)

    def test_generator_coin_flip(self):
        fake = torch.full((4,), 0.5, dtype=torch.float64)
        assert gan_loss_g(fake).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_rejects_out_of_range(self):
        bad = torch.tensor([0.5, 1.0])
        good = torch.tensor([0.5, 0.5])
        with pytest.raises(ValueError, match="inside"):
            gan_loss_d(bad, good)
        with pytest.raises(ValueError, match="inside"):
            gan_loss_g(torch.tensor([0.0, 0.5]))

    def test_matches_oracle(self, rng):
        for _ in range(100):
            real = rng.uniform(0.02, 0.98, size=(2, 1, 3, 3))
            fake = rng.uniform(0.02, 0.98, size=(2, 1, 3, 3))
            assert gan_loss_d(t64(real), t64(fake)).item() == pytest.approx(
                oracles.gan_d(real, fake), abs=1e-6
            )
            assert gan_loss_g(t64(fake)).item() == pytest.approx(
                oracles.gan_g(fake), abs=1e-6
            )

    def test_nonnegative(self, rng):
        for _ in range(50):
            real = rng.uniform(0.02, 0.98, size=(8,))
            fake = rng.uniform(0.02, 0.98, size=(8,))
            assert gan_loss_d(t64(real), t64(fake)).item() >= 0.0
            assert gan_loss_g(t64(fake)).item() >= 0.0


class TestTotalLoss:
    def test_all_zero(self):
        assert total_loss(LossParts(), LossWeights()).item() == 0.0

    def test_paper_weights_on_unit_parts(self):
        ones = {name: torch.tensor(1.0) for name, _ in LossParts().named()}
        total = total_loss(LossParts(**ones), LossWeights())
        assert total.item() == pytest.approx(2.04, abs=1e-9)

    def test_matches_weighted_sum_oracle(self, rng):
        for _ in range(100):
            values = {name: float(v) for name, v in
                      zip([n for n, _ in LossParts().named()], rng.normal(size=7))}
            weights = LossWeights(
                cpc=float(rng.uniform(0, 2)),
                lc=float(rng.uniform(0, 2)),
                cycle=float(rng.uniform(0, 2)),
                gan=float(rng.uniform(0, 2)),
            )
            parts = LossParts(**{k: torch.tensor(v) for k, v in values.items()})
            got = total_loss(parts, weights).item()
            assert got == pytest.approx(oracles.total(values, weights), abs=1e-9)

    def test_nan_part_names_offender(self):
        parts = LossParts(lc=torch.tensor(float("nan")))
        with pytest.raises(NumericalError, match="lc"):
            total_loss(parts, LossWeights())

    @given(
        lam=st.floats(0.0, 10.0, allow_nan=False),
        value=st.floats(-100.0, 100.0, allow_nan=False),
    )
    @settings(max_examples=50, deadline=None)
    def test_linear_in_each_part(self, lam, value):
        weights = LossWeights(lc=lam)
        base = total_loss(LossParts(), weights).item()
        with_part = total_loss(LossParts(lc=torch.tensor(value)), weights).item()
        assert with_part - base == pytest.approx(lam * value, rel=1e-9, abs=1e-9)


class TestGradients:
    """Analytic (autograd) vs central finite differences, float64."""

    STEP = 1e-5
    RTOL = 1e-4

    def _check(self, fn, tensors):
        leaves = [t.clone().double().requires_grad_(True) for t in tensors]
        fn(*leaves).backward()
        plain = [leaf.detach().clone() for leaf in leaves]
        for which, leaf in enumerate(leaves):
            analytic = leaf.grad.numpy().copy()
            numeric = np.zeros_like(analytic)
            flat_param = plain[which].reshape(-1)
            flat_numeric = numeric.reshape(-1)
            for i in range(flat_param.numel()):
                orig = flat_param[i].item()
                flat_param[i] = orig + self.STEP
                hi = fn(*plain).item()
                flat_param[i] = orig - self.STEP
                lo = fn(*plain).item()
                flat_param[i] = orig
                flat_numeric[i] = (hi - lo) / (2 * self.STEP)
            denom = np.maximum(np.abs(analytic), np.abs(numeric))
            mask = denom > 1e-10
            rel = np.abs(analytic - numeric)[mask] / denom[mask]
            assert rel.size == 0 or rel.max() < self.RTOL

    def test_cpc_gradients(self, rng):
        c = t64(rng.normal(size=(2, 3, 4, 4)))
        ch = c + t64(np.sign(rng.normal(size=c.shape)) * rng.uniform(0.1, 1.0, size=c.shape))
        p = t64(rng.normal(size=(2, 4)))
        ph = p + t64(np.sign(rng.normal(size=p.shape)) * rng.uniform(0.1, 1.0, size=p.shape))
        self._check(cpc_loss, [c, ch, p, ph])

    def test_seg_gradients_wrt_probs(self, rng):
        a = t64(oracles.random_onehot(rng, (2, 3, 4, 4)))
        m = t64(oracles.random_simplex(rng, (2, 3, 4, 4)))
        self._check(lambda probs: seg_loss(a, probs), [m])

    def test_lc_gradients(self, rng):
        a = t64(oracles.random_onehot(rng, (2, 3, 4, 4)))
        m1 = t64(oracles.random_simplex(rng, (2, 3, 4, 4)))
        m2 = t64(oracles.random_simplex(rng, (2, 3, 4, 4)))
        self._check(lambda x, y: lc_loss(a, x, y), [m1, m2])

    def test_cycle_gradients(self, rng):
        x = t64(rng.uniform(size=(2, 3, 4, 4)))
        y = x + t64(np.sign(rng.normal(size=x.shape)) * rng.uniform(0.1, 0.5, size=x.shape))
        self._check(cycle_loss, [x, y])

    def test_gan_d_gradients(self, rng):
        real = t64(rng.uniform(0.1, 0.9, size=(2, 3, 4, 4)))
        fake = t64(rng.uniform(0.1, 0.9, size=(2, 3, 4, 4)))
        self._check(gan_loss_d, [real, fake])

    def test_gan_g_gradients(self, rng):
        fake = t64(rng.uniform(0.1, 0.9, size=(2, 3, 4, 4)))
        self._check(gan_loss_g, [fake])

    def test_total_gradients(self, rng):
        values = [t64(rng.normal(size=())) for _ in range(7)]

        def fn(*parts):
            names = [n for n, _ in LossParts().named()]
            return total_loss(LossParts(**dict(zip(names, parts))), LossWeights())

        self._check(fn, values)


class TestOneHot:
    def test_round_trip(self, rng):
        labels = torch.from_numpy(rng.integers(0, 4, size=(2, 5, 5)))
        oh = one_hot(labels, 4)
        assert oh.shape == (2, 4, 5, 5)
        assert torch.equal(oh.argmax(dim=1), labels)
        assert torch.all(oh.sum(dim=1) == 1)
