"""Feature alignment and distillation losses."""
import numpy as np
import pytest

from faukd import distill, mae, tensor as T
from faukd.distill import KDConfig
from faukd.tensor import Tensor, finite_diff_grad, grad, relative_error

import oracles


class TestKDConfig:
    def test_validates(self):
        with pytest.raises(ValueError):
            KDConfig(temperature=0.0)
        with pytest.raises(ValueError):
            KDConfig(alpha=-1.0)
        with pytest.raises(ValueError):
            KDConfig(direction="sideways")

    def test_defaults_follow_training_recipe(self):
        cfg = KDConfig()
        assert (cfg.temperature, cfg.alpha, cfg.beta) == (2.0, 1.0, 0.1)


class TestAlignFeatures:
    def test_zero_weights_zero_output(self, rng):
        p = distill.init_alignment(16, 8, 4, 4, seed=0)
        p.fc1.w = Tensor(np.zeros_like(p.fc1.w.data), requires_grad=True)
        p.fc2.w = Tensor(np.zeros_like(p.fc2.w.data), requires_grad=True)
        p.fc2.b = Tensor(np.zeros_like(p.fc2.b.data), requires_grad=True)
        out = distill.align_features(Tensor(rng.normal(size=(2, 16, 16))), p)
        np.testing.assert_array_equal(out.data, np.zeros((2, 4, 4, 8)))

    def test_output_matches_target_grid(self, rng):
        p = distill.init_alignment(32, 12, 8, 4, seed=1)
        out = distill.align_features(Tensor(rng.normal(size=(3, 64, 32))), p)
        assert out.shape == (3, 4, 4, 12)
        assert p.pool == 2

    def test_constant_tokens_pool_to_constant(self, rng):
        p = distill.init_alignment(16, 8, 4, 2, seed=2)
        row = rng.normal(size=16)
        out = distill.align_features(Tensor(np.broadcast_to(row, (16, 16)).copy()), p)
        np.testing.assert_allclose(out.data, np.broadcast_to(out.data[0, 0], out.shape), atol=1e-12)

    def test_non_square_token_count(self, rng):
        p = distill.init_alignment(16, 8, 4, 4, seed=3)
        with pytest.raises(ValueError):
            distill.align_features(Tensor(rng.normal(size=(12, 16))), p)

    def test_incompatible_grids_rejected(self):
        with pytest.raises(ValueError):
            distill.init_alignment(16, 8, token_grid=6, target_grid=4, seed=0)


class TestKdAuLoss:
    def test_zero_iff_equal(self, rng):
        p = rng.uniform(0.1, 0.9, 5)
        assert distill.kd_au_loss(Tensor(p), Tensor(p.copy())).item() == 0.0
        q = p.copy()
        q[2] += 0.05
        assert distill.kd_au_loss(Tensor(p), Tensor(q)).item() > 0.0

    def test_worked_example(self):
        got = distill.kd_au_loss(Tensor([0.5]), Tensor([0.25])).item()
        want = 0.5 * np.log(2.0) + 0.5 * np.log(2.0 / 3.0)
        assert got == pytest.approx(want, abs=1e-12)
        assert got == pytest.approx(0.1438, abs=1e-4)

    def test_nonnegative(self, rng):
        for seed in range(50):
            rs = np.random.default_rng(seed)
            ps, pt = rs.uniform(0, 1, 6), rs.uniform(0, 1, 6)
            assert distill.kd_au_loss(Tensor(ps), Tensor(pt)).item() >= 0.0

    def test_matches_oracle(self, rng):
        for seed in range(100):
            rs = np.random.default_rng(seed)
            ps, pt = rs.uniform(0, 1, 8), rs.uniform(0, 1, 8)
            got = distill.kd_au_loss(Tensor(ps), Tensor(pt)).item()
            assert abs(got - oracles.kd_au_oracle(ps, pt)) < 1e-9

    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            distill.kd_au_loss(Tensor([1.5]), Tensor([0.5]))

    def test_no_gradient_to_teacher(self, rng):
        ps = Tensor(rng.uniform(0.2, 0.8, 4), requires_grad=True)
        pt = Tensor(rng.uniform(0.2, 0.8, 4), requires_grad=True)
        loss = distill.kd_au_loss(ps, pt)
        gs, gt = grad(loss, [ps, pt])
        assert np.any(gs.data != 0.0)
        np.testing.assert_array_equal(gt.data, np.zeros(4))

    def test_gradient_matches_fd(self, rng):
        ps = Tensor(rng.uniform(0.2, 0.8, 6), requires_grad=True)
        pt = rng.uniform(0.2, 0.8, 6)
        (g,) = grad(distill.kd_au_loss(ps, Tensor(pt)), [ps])
        fd = finite_diff_grad(lambda t: distill.kd_au_loss(t, Tensor(pt)), ps, 1e-6)
        assert relative_error(g.data, fd.data) < 1e-4

    def test_reversed_direction_switch(self, rng):
        ps, pt = rng.uniform(0.2, 0.8, 4), rng.uniform(0.2, 0.8, 4)
        fwd = distill.kd_au_loss(Tensor(ps), Tensor(pt), direction="as_printed").item()
        rev = distill.kd_au_loss(Tensor(ps), Tensor(pt), direction="reversed").item()
        assert fwd == pytest.approx(oracles.kd_au_oracle(ps, pt))
        assert rev == pytest.approx(oracles.kd_au_oracle(pt, ps))


class TestKdEdgeLoss:
    def test_zero_when_equal(self, rng):
        z = rng.normal(size=(3, 3, 4))
        assert distill.kd_edge_loss(Tensor(z), Tensor(z.copy()), 2.0).item() == 0.0

    def test_single_edge_worked_example(self):
        zs, zt = np.array([[1.0, 0, 0, 0]]), np.array([[0, 1.0, 0, 0]])
        got = distill.kd_edge_loss(Tensor(zs), Tensor(zt), 2.0).item()
        assert got == pytest.approx(oracles.kd_edge_oracle(zs, zt, 2.0), abs=1e-12)

    def test_softening_decreases_for_fixed_logits(self):
        zs, zt = np.array([[1.0, 0, 0, 0]]), np.array([[0, 1.0, 0, 0]])
        vals = [distill.kd_edge_loss(Tensor(zs), Tensor(zt), t).item() for t in (1.0, 2.0, 4.0, 8.0)]
        oracle_vals = [oracles.kd_edge_oracle(zs, zt, t) for t in (1.0, 2.0, 4.0, 8.0)]
        np.testing.assert_allclose(vals, oracle_vals, atol=1e-12)
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_matches_oracle(self, rng):
        for seed in range(100):
            rs = np.random.default_rng(seed)
            zs, zt = rs.normal(size=(4, 4, 4)), rs.normal(size=(4, 4, 4))
            temp = float(rs.choice([1.0, 2.0, 4.0]))
            got = distill.kd_edge_loss(Tensor(zs), Tensor(zt), temp).item()
            assert abs(got - oracles.kd_edge_oracle(zs, zt, temp)) < 1e-9

    def test_invalid_temperature(self, rng):
        z = Tensor(rng.normal(size=(2, 2, 4)))
        with pytest.raises(ValueError):
            distill.kd_edge_loss(z, z, 0.0)

    def test_no_gradient_to_teacher(self, rng):
        zs = Tensor(rng.normal(size=(2, 2, 4)), requires_grad=True)
        zt = Tensor(rng.normal(size=(2, 2, 4)), requires_grad=True)
        gs, gt = grad(distill.kd_edge_loss(zs, zt, 2.0), [zs, zt])
        assert np.any(gs.data != 0.0)
        np.testing.assert_array_equal(gt.data, np.zeros((2, 2, 4)))

    def test_gradient_matches_fd(self, rng):
        zs = Tensor(rng.normal(size=(2, 2, 4)), requires_grad=True)
        zt = rng.normal(size=(2, 2, 4))
        (g,) = grad(distill.kd_edge_loss(zs, Tensor(zt), 2.0), [zs])
        fd = finite_diff_grad(lambda t: distill.kd_edge_loss(t, Tensor(zt), 2.0), zs, 1e-6)
        assert relative_error(g.data, fd.data) < 1e-4


class TestCombinedLosses:
    def test_recipe_weights(self):
        # defaults beta=0.1, alpha=1, lambda=0.01 combine as stated
        l_kd = distill.kd_loss(Tensor(1.0), Tensor(2.0), beta=0.1)
        assert l_kd.item() == pytest.approx(1.2)
        total = distill.student_loss(Tensor(1.0), Tensor(2.0), l_kd, lam=0.01, alpha=1.0)
        assert total.item() == pytest.approx(1.0 + 0.02 + 1.2)

    def test_alpha_zero_reduces_to_stage2_form(self):
        total = distill.student_loss(Tensor(1.0), Tensor(2.0), Tensor(99.0), lam=0.01, alpha=0.0)
        assert total.item() == pytest.approx(1.02)

    def test_all_ones(self):
        l_kd = distill.kd_loss(Tensor(1.0), Tensor(1.0), beta=1.0)
        assert l_kd.item() == 2.0
        assert distill.student_loss(Tensor(1.0), Tensor(1.0), l_kd, 1.0, 1.0).item() == 4.0

    def test_negative_weights_rejected(self):
        with pytest.raises(ValueError):
            distill.kd_loss(Tensor(1.0), Tensor(1.0), beta=-0.1)
        with pytest.raises(ValueError):
            distill.student_loss(Tensor(1.0), Tensor(1.0), Tensor(1.0), -0.5, 1.0)
