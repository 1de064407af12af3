import numpy as np
import pytest

from avatarforge.losses import (
    LossWeights, MASK_EPS, density_loss, density_loss_with_grad, mask_loss,
    mask_loss_with_grad, normal_loss, normal_loss_with_grad, orientation_loss,
    orientation_loss_with_grad, proposal_loss, proposal_loss_with_grad, total_loss,
)


def unit(rng, shape):
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


class TestDensityLoss:
    def test_zero_at_equality(self):
        t = np.random.default_rng(0).random(50)
        assert density_loss(t, t) == 0.0

    def test_constant_offset(self):
        t = np.random.default_rng(1).random(50)
        assert density_loss(t + 1.0, t) == pytest.approx(1.0)

    def test_matches_elementwise_oracle(self):
        rng = np.random.default_rng(2)
        a, b = rng.random(200) * 5, rng.random(200) * 5
        assert density_loss(a, b) == pytest.approx(float(np.abs(a - b).mean()), abs=1e-15)

    def test_subgradient_zero_at_tie(self):
        _, g = density_loss_with_grad(np.array([1.0, 2.0]), np.array([1.0, 0.5]))
        assert g[0] == 0.0 and g[1] > 0.0

    def test_empty_batch_raises(self):
        with pytest.raises(ValueError):
            density_loss(np.zeros(0), np.zeros(0))


class TestNormalLoss:
    def test_zero_when_equal(self):
        rng = np.random.default_rng(3)
        n = unit(rng, (4, 6, 3))
        assert normal_loss(rng.random((4, 6)), n, n) == 0.0

    def test_zero_when_weights_zero(self):
        rng = np.random.default_rng(4)
        assert normal_loss(np.zeros((4, 6)), unit(rng, (4, 6, 3)), unit(rng, (4, 6, 3))) == 0.0

    def test_antipodal_single_sample(self):
        n = np.zeros((1, 1, 3))
        n[0, 0, 2] = 1.0
        assert normal_loss(np.ones((1, 1)), n, -n) == pytest.approx(2.0)

    def test_degenerate_samples_skipped(self):
        rng = np.random.default_rng(5)
        npred, ndens = unit(rng, (2, 3, 3)), unit(rng, (2, 3, 3))
        valid = np.ones((2, 3), dtype=bool)
        valid[0, 1] = False
        full = normal_loss(np.ones((2, 3)), npred, ndens)
        partial = normal_loss(np.ones((2, 3)), npred, ndens, valid)
        drop = np.linalg.norm(npred[0, 1] - ndens[0, 1]) / 2
        assert partial == pytest.approx(full - drop)

    def test_gradient_fd(self):
        rng = np.random.default_rng(6)
        w = rng.random((3, 4))
        npred, ndens = unit(rng, (3, 4, 3)), unit(rng, (3, 4, 3))
        _, g = normal_loss_with_grad(w, npred, ndens)
        h = 1e-6
        for _ in range(15):
            i = (int(rng.integers(3)), int(rng.integers(4)), int(rng.integers(3)))
            ap, am = npred.copy(), npred.copy()
            ap[i] += h
            am[i] -= h
            fd = (normal_loss(w, ap, ndens) - normal_loss(w, am, ndens)) / (2 * h)
            assert abs(fd - g[i]) / max(abs(fd), 1e-9) < 1e-4


class TestMaskLoss:
    def test_half_value(self):
        assert mask_loss(np.full((8, 8), 0.5)) == pytest.approx(np.log(0.5))

    def test_saturated_clamped(self):
        assert mask_loss(np.ones((4, 4))) == pytest.approx(np.log(MASK_EPS), rel=1e-6)
        assert mask_loss(np.zeros((4, 4))) == pytest.approx(np.log(MASK_EPS), rel=1e-6)

    def test_maximal_at_half(self):
        vals = np.linspace(MASK_EPS, 1 - MASK_EPS, 1001)
        losses = [mask_loss(np.array([[v]])) for v in vals]
        assert np.argmax(losses) == len(vals) // 2

    def test_gradient_branches(self):
        _, g = mask_loss_with_grad(np.array([[0.6]]))
        assert g[0, 0] == pytest.approx(1.0 / (0.6 - 1.0))
        _, g = mask_loss_with_grad(np.array([[0.4]]))
        assert g[0, 0] == pytest.approx(1.0 / 0.4)

    def test_descent_pushes_away_from_half(self):
        # minimizing the loss: M > 0.5 moves up, M < 0.5 moves down
        for m0, direction in ((0.7, +1), (0.3, -1)):
            _, g = mask_loss_with_grad(np.array([[m0]]))
            assert np.sign(m0 - g[0, 0] * 1e-3 - m0) == direction


class TestOrientationLoss:
    def test_zero_for_camera_facing(self):
        rng = np.random.default_rng(7)
        v = unit(rng, (5, 3))
        n = -v[:, None, :].repeat(4, 1)
        assert orientation_loss(rng.random((5, 4)), n, v) == 0.0

    def test_aligned_unit_case(self):
        v = np.array([[0.0, 0.0, 1.0]])
        n = v[:, None, :]
        assert orientation_loss(np.ones((1, 1)), n, v) == pytest.approx(1.0)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(8)
        w = rng.random((6, 5))
        n = unit(rng, (6, 5, 3))
        v = unit(rng, (6, 3))
        dots = np.maximum((n * v[:, None, :]).sum(-1), 0.0)
        want = float((w * dots ** 2).sum() / 6)
        assert orientation_loss(w, n, v) == pytest.approx(want, abs=1e-15)

    def test_gradient_fd(self):
        rng = np.random.default_rng(9)
        w = rng.random((3, 4))
        n, v = unit(rng, (3, 4, 3)), unit(rng, (3, 3))
        _, g = orientation_loss_with_grad(w, n, v)
        h = 1e-6
        for _ in range(15):
            i = (int(rng.integers(3)), int(rng.integers(4)), int(rng.integers(3)))
            dot = float((n[i[0], i[1]] * v[i[0]]).sum())
            if abs(dot) < 1e-4:
                continue
            ap, am = n.copy(), n.copy()
            ap[i] += h
            am[i] -= h
            fd = (orientation_loss(w, ap, v) - orientation_loss(w, am, v)) / (2 * h)
            assert abs(fd - g[i]) / max(abs(fd), 1e-9) < 1e-4


class TestProposalLoss:
    def test_zero_when_bounded(self):
        ce = np.linspace(0, 1, 9)[None]
        fe = np.linspace(0, 1, 5)[None]
        assert proposal_loss(ce, np.full((1, 8), 0.2), fe, np.full((1, 4), 0.1)) == 0.0

    def test_zero_on_identical(self):
        rng = np.random.default_rng(10)
        e = np.sort(rng.random((3, 9)), axis=1)
        w = rng.random((3, 8)) * 0.3
        assert proposal_loss(e, w, e, w) == 0.0

    def test_hand_computed_case(self):
        ce = np.array([[0.0, 1.0]])
        fe = np.array([[0.0, 1.0]])
        got = proposal_loss(ce, np.array([[0.2]]), fe, np.array([[0.5]]))
        assert got == pytest.approx(0.09 / 0.5, rel=1e-4)

    def test_gradient_reaches_coarse_only(self):
        ce = np.array([[0.0, 0.5, 1.0]])
        fe = np.array([[0.0, 1.0]])
        _, g = proposal_loss_with_grad(ce, np.array([[0.1, 0.1]]), fe, np.array([[0.6]]))
        assert (g < 0).all()  # raising any overlapping coarse weight reduces excess

    def test_gradient_fd(self):
        rng = np.random.default_rng(11)
        ce = np.sort(rng.random((2, 7)), axis=1)
        cw = rng.random((2, 6)) * 0.2
        fe = np.sort(rng.random((2, 5)), axis=1)
        fw = rng.random((2, 4)) * 0.5
        _, g = proposal_loss_with_grad(ce, cw, fe, fw)
        h = 1e-7
        for _ in range(12):
            i = (int(rng.integers(2)), int(rng.integers(6)))
            cp, cm = cw.copy(), cw.copy()
            cp[i] += h
            cm[i] -= h
            fd = (proposal_loss(ce, cp, fe, fw) - proposal_loss(ce, cm, fe, fw)) / (2 * h)
            assert abs(fd - g[i]) / max(abs(fd), abs(g[i]), 1e-9) < 1e-4

    def test_mismatched_edges_raise(self):
        with pytest.raises(ValueError):
            proposal_loss(np.zeros((1, 3)), np.zeros((1, 3)), np.zeros((1, 2)), np.zeros((1, 1)))


class TestTotalLoss:
    def test_all_zero_weights(self):
        lw = LossWeights(sds=0, orientation=0, proposal=0, mask=0, normal=0, density=0)
        bd = total_loss({"density": 3.0, "mask": -2.0, "normal": 1.0,
                         "orientation": 0.5, "proposal": 0.2}, lw)
        assert bd.total == 0.0

    def test_single_term(self):
        lw = LossWeights(sds=0, orientation=0, proposal=0, mask=0, normal=0, density=2.0)
        bd = total_loss({"density": 3.0}, lw)
        assert bd.total == pytest.approx(6.0)

    def test_defaults_match_unweighted_sum(self):
        vals = {"density": 1.5, "mask": -0.4, "normal": 0.3, "orientation": 0.1,
                "proposal": 0.05}
        bd = total_loss(vals, LossWeights())
        assert abs(bd.total - sum(vals.values())) < 1e-9

    def test_invalid_weight_rejected(self):
        with pytest.raises(ValueError):
            total_loss({}, LossWeights(mask=-1.0))

    def test_record_shape(self):
        bd = total_loss({"density": 1.0}, LossWeights(), {"guidance": 2.5})
        rec = bd.to_record(7)
        assert rec["step"] == 7 and rec["loss_density"] == 1.0 and rec["gnorm_guidance"] == 2.5
