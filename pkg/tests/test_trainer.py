import os

import numpy as np
import pytest

from avatarforge.body import Pose, PosedBody, Shape, SkeletonConfig, REGIONS, SHAPE_BOUNDS
from avatarforge.config import TrainConfig
from avatarforge.guidance import GuidanceError
from avatarforge.losses import LossWeights
from avatarforge.reference import make_view_dataset, render_reference
from avatarforge.render import Camera, RenderOptions, SHLighting, render, generate_rays
from avatarforge.trainer import (
    CheckpointError, DatasetPhotometricGuidance, TrainState, ViewDataset,
    adam_update, checkpoint_load, checkpoint_save, default_pose_sampler,
    run_training, sample_camera_and_prompt, sample_lighting, sample_pose,
    train_step, view_fragment,
)


@pytest.fixture(scope="module")
def small_cfg():
    return TrainConfig(prompt="a procedural test avatar", iterations=4,
                       rays_per_step=192, albedo_prob=1.0, checkpoint_every=0,
                       loss_weights=LossWeights(sds=1.0, density=1e-3, normal=0.5,
                                                orientation=0.1, proposal=1.0, mask=1e-3))


@pytest.fixture(scope="module")
def tiny_dataset(skeleton, small_cfg):
    return make_view_dataset(skeleton, small_cfg, 3, seed=42)


class TestPoseSampler:
    def test_zero_scale_rest_pose(self, skeleton):
        samplers = default_pose_sampler(skeleton, scale=0.0)
        pose = sample_pose(np.random.default_rng(0), samplers)
        assert np.abs(pose.joint_rotations).max() == 0.0

    def test_limits_respected(self, skeleton):
        samplers = default_pose_sampler(skeleton, scale=1.0)
        rng = np.random.default_rng(1)
        for _ in range(2000):
            pose = sample_pose(rng, samplers)
            for j, js in enumerate(samplers):
                if js.hinge_axis is not None:
                    angle = np.linalg.norm(pose.joint_rotations[j])
                    assert js.lo[0] - 1e-9 <= angle <= js.hi[0] + 1e-9
                else:
                    assert (pose.joint_rotations[j] >= js.lo - 1e-9).all()
                    assert (pose.joint_rotations[j] <= js.hi + 1e-9).all()

    def test_empirical_std_matches_config(self, skeleton):
        # wide limits: truncation inert, sample std tracks the configured std
        samplers = default_pose_sampler(skeleton, scale=1.0)
        for js in samplers:
            js.lo = np.full(3, -50.0)
            js.hi = np.full(3, 50.0)
            js.hinge_axis = None
        rng = np.random.default_rng(2)
        draws = np.stack([sample_pose(rng, samplers).joint_rotations for _ in range(4000)])
        stds = draws.std(axis=0)
        for j, js in enumerate(samplers):
            for k in range(3):
                if js.std[k] > 0:
                    assert abs(stds[j, k] - js.std[k]) / js.std[k] < 0.1


class TestCameraSampler:
    def test_front_view_at_zero(self):
        assert view_fragment(0.0, 0.0) == "front"
        assert view_fragment(np.pi, 0.0) == "back"
        assert view_fragment(np.pi / 2, 0.0) == "side"
        assert view_fragment(0.5 * np.pi, np.pi / 3) == "overhead"

    def test_region_look_at_is_box_center(self, skeleton):
        cfg = TrainConfig(prompt="x")
        body = PosedBody(skeleton, Pose.rest(), Shape.mean())
        cam, prompt = sample_camera_and_prompt(np.random.default_rng(3), cfg, body, "head")
        lo, hi = body.bounds("head")
        assert np.allclose(cam.look_at, (lo + hi) / 2)
        assert "head" in prompt.composed and "view" in prompt.composed

    def test_framing_covers_60_to_95_percent(self, skeleton):
        cfg = TrainConfig(prompt="x")
        rng = np.random.default_rng(4)
        samplers = default_pose_sampler(skeleton, 0.5)
        for i in range(1000):
            region = list(REGIONS)[i % len(REGIONS)]
            pose = sample_pose(rng, samplers) if i % 3 else Pose.rest()
            body = PosedBody(skeleton, pose, Shape.mean())
            cam, _ = sample_camera_and_prompt(rng, cfg, body, region)
            lo, hi = body.bounds(region)
            corners = np.stack(np.meshgrid(*[(lo[k], hi[k]) for k in range(3)],
                                           indexing="ij"), axis=-1).reshape(-1, 3)
            right, up, fwd = cam.basis()
            rel = corners - cam.position
            depth = rel @ fwd
            px = cam.focal * (rel @ right) / depth
            py = cam.focal * (rel @ up) / depth
            fill = max(px.max() - px.min(), py.max() - py.min()) / cfg.image_width
            assert 0.60 <= fill <= 0.95


class TestLightingSampler:
    def test_p_zero_always_optimized(self):
        cfg = TrainConfig(prompt="x", p_rand_light=0.0)
        h = np.arange(10, dtype=np.float64)
        rng = np.random.default_rng(5)
        for _ in range(50):
            light, is_random = sample_lighting(rng, h, cfg)
            assert not is_random and np.array_equal(light.coeffs, h)

    def test_p_one_never_optimized(self):
        cfg = TrainConfig(prompt="x", p_rand_light=1.0)
        h = np.arange(10, dtype=np.float64)
        rng = np.random.default_rng(6)
        for _ in range(50):
            light, is_random = sample_lighting(rng, h, cfg)
            assert is_random
            assert cfg.light_dc_range[0] <= light.coeffs[0] <= cfg.light_dc_range[1]

    def test_empirical_fraction(self):
        cfg = TrainConfig(prompt="x", p_rand_light=0.2)
        rng = np.random.default_rng(7)
        n = 10000
        count = sum(sample_lighting(rng, np.zeros(10), cfg)[1] for _ in range(n))
        sigma = np.sqrt(n * 0.2 * 0.8)
        assert abs(count - 0.2 * n) < 3 * sigma


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = {"w": np.ones(4, dtype=np.float32)}
        m = {"w": np.zeros(4, dtype=np.float32)}
        v = {"w": np.zeros(4, dtype=np.float32)}
        ok = adam_update(p, {"w": np.zeros(4, dtype=np.float32)}, m, v, 1, 0.1)
        assert ok and np.array_equal(p["w"], np.ones(4, dtype=np.float32))

    def test_first_step_magnitude_is_lr(self):
        p = {"w": np.zeros(3)}
        m = {"w": np.zeros(3)}
        v = {"w": np.zeros(3)}
        adam_update(p, {"w": np.full(3, 0.37)}, m, v, 1, lr=0.01)
        # bias correction makes the first update ~ lr * sign(g)
        assert np.allclose(np.abs(p["w"]), 0.01, rtol=1e-6)

    def test_nan_gradient_skips_group(self):
        p = {"w": np.ones(3), "b": np.ones(2)}
        m = {k: np.zeros_like(a) for k, a in p.items()}
        v = {k: np.zeros_like(a) for k, a in p.items()}
        g = {"w": np.ones(3), "b": np.array([np.nan, 1.0])}
        ok = adam_update(p, g, m, v, 1, 0.1)
        assert not ok
        assert np.array_equal(p["w"], np.ones(3)) and np.array_equal(p["b"], np.ones(2))
        assert np.abs(m["w"]).max() == 0.0  # moments untouched on skip


class TestTrainStep:
    def test_noop_with_zero_weights_and_zero_guidance(self, skeleton, tiny_dataset):
        cfg = TrainConfig(prompt="x", iterations=1, albedo_prob=1.0,
                          loss_weights=LossWeights(sds=0, orientation=0, proposal=0,
                                                   mask=0, normal=0, density=0))

        class ZeroGuidance:
            requires_full_image = False
            replays_views = True

            def pick(self, rng):
                return tiny_dataset.poses[0], tiny_dataset.cameras[0], tiny_dataset.images[0]

            def pixel_gradient(self, rendered, target):
                return np.zeros_like(rendered, dtype=np.float64)

        state = TrainState.init(cfg)
        before = {k: a.copy() for k, a in state.params.arrays.items()}
        b0, l0 = state.beta.copy(), state.lighting.copy()
        train_step(state, cfg, skeleton, ZeroGuidance())
        assert state.step == 1
        assert all(np.array_equal(state.params.arrays[k], before[k]) for k in before)
        assert np.array_equal(state.beta, b0) and np.array_equal(state.lighting, l0)

    def test_photometric_step_decreases_replayed_error(self, skeleton, tiny_dataset):
        cfg = TrainConfig(prompt="x", iterations=1, albedo_prob=1.0, lr_field=1e-3,
                          loss_weights=LossWeights(sds=1.0, density=0, normal=0,
                                                   orientation=0, proposal=0, mask=0))

        class FixedView:
            requires_full_image = False
            replays_views = True

            def pick(self, rng):
                return tiny_dataset.poses[0], tiny_dataset.cameras[0], tiny_dataset.images[0]

            def pixel_gradient(self, rendered, target):
                return rendered.astype(np.float64) - target.astype(np.float64)

        def replay_error(state):
            body = PosedBody(skeleton, tiny_dataset.poses[0],
                             Shape(state.beta.astype(np.float64)))
            out = render(state.params, body, tiny_dataset.cameras[0],
                         SHLighting(state.lighting.astype(np.float64)),
                         RenderOptions(mode="albedo"), rng=np.random.default_rng(99))
            return float(((out.rgb.reshape(tiny_dataset.images[0].shape)
                           - tiny_dataset.images[0]) ** 2).mean())

        state = TrainState.init(cfg)
        before = replay_error(state)
        for _ in range(5):
            train_step(state, cfg, skeleton, FixedView())
        after = replay_error(state)
        assert after < before

    def test_determinism_bit_identical(self, skeleton, small_cfg, tiny_dataset):
        guid = DatasetPhotometricGuidance(tiny_dataset)

        def run():
            state = TrainState.init(small_cfg)
            for _ in range(4):
                train_step(state, small_cfg, skeleton, guid)
            return state

        s1, s2 = run(), run()
        assert all(np.array_equal(s1.params.arrays[k], s2.params.arrays[k])
                   for k in s1.params.arrays)
        assert np.array_equal(s1.beta, s2.beta)
        assert np.array_equal(s1.lighting, s2.lighting)
        assert s1.rng.bit_generator.state == s2.rng.bit_generator.state

    def test_beta_stays_in_bounds(self, skeleton, small_cfg, tiny_dataset):
        guid = DatasetPhotometricGuidance(tiny_dataset)
        state = TrainState.init(small_cfg)
        state.beta = np.full(10, SHAPE_BOUNDS[1], dtype=np.float32)
        for _ in range(3):
            train_step(state, small_cfg, skeleton, guid)
            assert (state.beta >= SHAPE_BOUNDS[0]).all()
            assert (state.beta <= SHAPE_BOUNDS[1]).all()

    def test_guidance_failure_leaves_state_unchanged(self, skeleton, small_cfg, tiny_dataset):
        class FailingGuidance:
            requires_full_image = False
            replays_views = True

            def pick(self, rng):
                return tiny_dataset.poses[0], tiny_dataset.cameras[0], tiny_dataset.images[0]

            def pixel_gradient(self, rendered, target):
                raise GuidanceError("backend down")

        state = TrainState.init(small_cfg)
        before = {k: a.copy() for k, a in state.params.arrays.items()}
        step0 = state.step
        with pytest.raises(GuidanceError):
            train_step(state, small_cfg, skeleton, FailingGuidance())
        assert state.step == step0
        assert all(np.array_equal(state.params.arrays[k], before[k]) for k in before)

    def test_all_regions_visited(self, skeleton):
        # sampling distribution only; no rendering needed
        cfg = TrainConfig(prompt="x")
        rng = np.random.default_rng(8)
        names = list(REGIONS)
        probs = np.array([cfg.region_probs[r] for r in names])
        seen = set()
        for _ in range(1000):
            seen.add(names[int(rng.choice(len(names), p=probs))])
        assert seen == set(REGIONS)


class TestCheckpoint:
    def test_save_load_save_identical(self, small_cfg, tmp_path):
        state = TrainState.init(small_cfg)
        p1 = tmp_path / "a.dhck"
        checkpoint_save(state, p1)
        data1 = p1.read_bytes()
        state2 = checkpoint_load(p1)
        p2 = tmp_path / "b.dhck"
        checkpoint_save(state2, p2)
        assert data1 == p2.read_bytes()

    def test_corrupt_magic(self, tmp_path):
        p = tmp_path / "bad.dhck"
        p.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            checkpoint_load(p)

    def test_truncated_blob(self, small_cfg, tmp_path):
        state = TrainState.init(small_cfg)
        p = tmp_path / "t.dhck"
        checkpoint_save(state, p)
        p.write_bytes(p.read_bytes()[:-40])
        with pytest.raises(CheckpointError):
            checkpoint_load(p)

    def test_resume_matches_uninterrupted(self, skeleton, small_cfg, tiny_dataset, tmp_path):
        guid = DatasetPhotometricGuidance(tiny_dataset)
        base = TrainState.init(small_cfg)
        for _ in range(2):
            train_step(base, small_cfg, skeleton, guid)
        ck = tmp_path / "mid.dhck"
        checkpoint_save(base, ck)
        resumed = checkpoint_load(ck)
        for _ in range(3):
            train_step(base, small_cfg, skeleton, guid)
            train_step(resumed, small_cfg, skeleton, guid)
        assert all(np.array_equal(base.params.arrays[k], resumed.params.arrays[k])
                   for k in base.params.arrays)
        assert np.array_equal(base.beta, resumed.beta)
        assert base.rng.bit_generator.state == resumed.rng.bit_generator.state


class TestRunTraining:
    def test_writes_metrics_and_checkpoints(self, skeleton, tiny_dataset, tmp_path):
        cfg = TrainConfig(prompt="x", iterations=4, rays_per_step=128, albedo_prob=1.0,
                          checkpoint_every=2,
                          loss_weights=LossWeights(sds=1.0, density=1e-3, normal=0.0,
                                                   orientation=0.0, proposal=0.0, mask=0.0))
        out = tmp_path / "run"
        state = run_training(cfg, skeleton, DatasetPhotometricGuidance(tiny_dataset), out)
        assert state.step == 4
        assert (out / "checkpoint_final.dhck").exists()
        assert (out / "checkpoint_000002.dhck").exists()
        lines = (out / "metrics.jsonl").read_text().strip().splitlines()
        assert len(lines) == 4

    def test_resume_runs_remaining_steps(self, skeleton, tiny_dataset, tmp_path):
        cfg = TrainConfig(prompt="x", iterations=2, rays_per_step=128, albedo_prob=1.0,
                          checkpoint_every=0)
        out = tmp_path / "run2"
        guid = DatasetPhotometricGuidance(tiny_dataset)
        run_training(cfg, skeleton, guid, out)
        cfg.iterations = 4
        state = run_training(cfg, skeleton, guid, out, resume=True)
        assert state.step == 4


class TestViewDataset:
    def test_npz_round_trip(self, tiny_dataset, tmp_path):
        p = tmp_path / "views.npz"
        tiny_dataset.save(p)
        loaded = ViewDataset.load(p)
        assert len(loaded) == len(tiny_dataset)
        assert np.allclose(loaded.images, tiny_dataset.images)
        assert np.allclose(loaded.poses[1].joint_rotations,
                           tiny_dataset.poses[1].joint_rotations)
        assert loaded.cameras[2].focal == pytest.approx(tiny_dataset.cameras[2].focal)

    def test_reference_render_modes(self, skeleton):
        body = PosedBody(skeleton, Pose.rest(), Shape.mean())
        lo, hi = body.bounds("full_body")
        cam = Camera(0.3, 0.1, 2.2, (lo + hi) / 2, 50.0, 32, 32)
        for mode in ("albedo", "shaded", "mask", "normals"):
            out = render_reference(body, cam, mode=mode, rng=np.random.default_rng(0))
            assert out.rgb.shape == (1024, 3)
            assert np.isfinite(out.rgb).all()
        assert render_reference(body, cam, rng=np.random.default_rng(0)).mask.max() > 0.9
