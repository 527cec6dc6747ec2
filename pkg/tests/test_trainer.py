"""Optimizer, schedule and training-step tests.

The AdamW oracle is a hand-executed scalar recurrence written out in the
test; determinism checks compare full metric tuples across repeated runs.
"""

import numpy as np
import pytest

from pointsplat.losses import default_perceptual_net
from pointsplat.synthetic import make_toy_scene
from pointsplat.trainer import (
    TrainConfig,
    TrainState,
    adamw_step,
    cosine_lr,
    init_train_state,
    psnr,
    train_step,
)


class TestCosineLr:
    def test_endpoints_exact(self):
        assert cosine_lr(0, 1000, 1e-4, 1e-6) == 1e-4
        assert cosine_lr(1000, 1000, 1e-4, 1e-6) == 1e-6

    def test_midpoint(self):
        assert cosine_lr(500, 1000, 1e-4, 1e-6) == pytest.approx(5.05e-5,
                                                                 rel=1e-12)

    def test_beyond_total_clamps_to_minimum(self):
        assert cosine_lr(1500, 1000, 1e-4, 1e-6) == 1e-6

    def test_monotone_non_increasing(self):
        values = [cosine_lr(s, 200, 1e-4, 1e-6) for s in range(201)]
        assert all(b <= a for a, b in zip(values, values[1:]))

    def test_negative_step_raises(self):
        with pytest.raises(ValueError):
            cosine_lr(-1, 10, 1e-4, 1e-6)


def scalar_state(theta, config):
    return TrainState(
        params={"w": np.array([theta])},
        m={"w": np.zeros(1)},
        v={"w": np.zeros(1)},
        step=0,
        rng=np.random.default_rng(0),
    )


class TestAdamW:
    def test_zero_grads_no_decay_is_identity(self):
        config = TrainConfig(weight_decay=0.0)
        state = scalar_state(1.234, config)
        state = adamw_step(state, {"w": np.zeros(1)}, 0.1, config)
        assert state.params["w"][0] == 1.234
        assert state.step == 1

    def test_pure_decoupled_decay(self):
        config = TrainConfig(weight_decay=0.05)
        state = scalar_state(1.0, config)
        state = adamw_step(state, {"w": np.zeros(1)}, 0.1, config)
        assert state.params["w"][0] == pytest.approx(0.995, abs=1e-15)

    def test_three_steps_match_hand_recurrence(self):
        config = TrainConfig(weight_decay=0.05, beta1=0.9, beta2=0.999,
                             eps=1e-8)
        lr = 0.01
        grads = [0.3, -0.7, 0.2]
        state = scalar_state(0.5, config)
        for g in grads:
            state = adamw_step(state, {"w": np.array([g])}, lr, config)

        # Hand-executed recurrence: decay first, then bias-corrected Adam.
        theta, m, v = 0.5, 0.0, 0.0
        for t, g in enumerate(grads, start=1):
            theta *= 1.0 - lr * 0.05
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            m_hat = m / (1.0 - 0.9**t)
            v_hat = v / (1.0 - 0.999**t)
            theta -= lr * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert state.params["w"][0] == pytest.approx(theta, abs=1e-12)
        assert state.step == 3

    def test_non_finite_gradient_names_tensor(self):
        config = TrainConfig()
        state = scalar_state(1.0, config)
        with pytest.raises(ValueError, match="w"):
            adamw_step(state, {"w": np.array([np.nan])}, 0.1, config)

    def test_gradient_shape_mismatch_raises(self):
        config = TrainConfig()
        state = scalar_state(1.0, config)
        with pytest.raises(ValueError, match="shape"):
            adamw_step(state, {"w": np.zeros(2)}, 0.1, config)


class TestPsnr:
    def test_identical_images_infinite(self):
        img = np.full((4, 4, 3), 0.25)
        assert psnr(img, img) == np.inf

    def test_known_value(self):
        a = np.zeros((4, 4, 3))
        b = np.full((4, 4, 3), 51 / 255)  # quantization-exact difference
        expected = 10 * np.log10(1.0 / np.mean((a - b) ** 2))
        assert psnr(a, b) == pytest.approx(expected, rel=1e-12)

    def test_quantization_applied(self):
        a = np.zeros((4, 4, 3))
        b = np.full((4, 4, 3), 0.4 / 255)  # rounds to zero difference
        assert psnr(a, b) == np.inf


class TestTrainStep:
    def _setup(self, seed=0, lr=1e-3):
        scenes = [make_toy_scene(seed=seed + i, width=32, height=24)
                  for i in range(2)]
        config = TrainConfig(image_width=32, image_height=24, batch_size=2,
                             lr=lr, seed=seed)
        return scenes, config, default_perceptual_net()

    def test_determinism_bit_identical_metrics(self):
        scenes, config, net = self._setup()
        rows = []
        for _ in range(2):
            state = init_train_state(config)
            run = []
            for _ in range(3):
                state, m = train_step(state, scenes, config, state.rng, 10, net)
                run.append(m.csv_row())
            rows.append(run)
        assert rows[0] == rows[1]

    def test_determinism_across_thread_counts(self):
        scenes, config, net = self._setup()
        rows = {}
        for threads in (1, 3):
            cfg = TrainConfig(**{**config.__dict__, "threads": threads})
            state = init_train_state(cfg)
            run = []
            for _ in range(2):
                state, m = train_step(state, scenes, cfg, state.rng, 10, net)
                run.append(m.csv_row())
            rows[threads] = run
        assert rows[1] == rows[3]

    def test_gaussian_count_law_under_masking(self):
        scenes, config, net = self._setup()
        state = init_train_state(config)
        _, metrics = train_step(state, scenes[:1], config, state.rng, 10, net)
        n_points = 2 * 32 * 24  # two views, every pixel valid
        expected = config.k * int(np.ceil(0.5 * n_points))
        assert metrics.n_gaussians == expected

    def test_parameters_move(self):
        scenes, config, net = self._setup()
        state = init_train_state(config)
        before = {k: v.copy() for k, v in state.params.items()}
        state, _ = train_step(state, scenes, config, state.rng, 10, net)
        moved = any(
            not np.array_equal(before[k], state.params[k]) for k in before
        )
        assert moved

    def test_lr_follows_cosine_schedule(self):
        scenes, config, net = self._setup()
        state = init_train_state(config)
        state, m0 = train_step(state, scenes, config, state.rng, 100, net)
        assert m0.lr == config.lr  # step 0
        state, m1 = train_step(state, scenes, config, state.rng, 100, net)
        assert m1.lr == cosine_lr(1, 100, config.lr, config.lr_min)

    def test_empty_batch_after_skips_returns_state_unchanged(self, caplog):
        # A scene whose sampled pair has no depth-valid pixels is skipped;
        # an all-skipped batch leaves parameters untouched.
        scenes, config, net = self._setup()
        bad = make_toy_scene(seed=5, width=32, height=24)
        for frame in bad.frames:
            frame.depth[:] = 0.0
        state = init_train_state(config)
        before = {k: v.copy() for k, v in state.params.items()}
        import logging

        with caplog.at_level(logging.WARNING):
            state, metrics = train_step(state, [bad], config, state.rng, 10,
                                        net)
        assert np.isnan(metrics.loss_total)
        for k in before:
            np.testing.assert_array_equal(before[k], state.params[k])
        assert any("skip" in r.message for r in caplog.records)


class TestEndToEndGradients:
    def test_sixteen_point_chain_matches_finite_differences(self):
        from pointsplat.verify import gradcheck_pipeline

        report = gradcheck_pipeline(seed=3, n_configs=2, coords_per_tensor=2)
        for name, err in report.max_errors.items():
            assert err <= 1e-3, f"{name}: {err}"
