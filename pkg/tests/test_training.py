import math
import os
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd
import torch

from cascade_splat.splat_utils.config import COMPARE_SEEDS, FieldConfig, RenderConfig, RunConfig, TrainConfig, WindowConfig
from cascade_splat.splat_utils.deformation import DeformationField, TemporalQuantizer
from cascade_splat.splat_utils.errors import NonFiniteLossError, UsageError
from cascade_splat.splat_utils.geometry import SH_C0, Camera, GaussianSet, quaternion_to_rotation
from cascade_splat.splat_utils.rasterizer import render_reference
from cascade_splat.splat_utils.scenes import DatasetFrame
from cascade_splat.splat_utils.training import (
    GAUSSIAN_GROUPS,
    GaussianModel,
    TrainState,
    checkpoint_from_state,
    create_state,
    evaluate,
    expon_lr,
    frame_for_iteration,
    load_state,
    photometric_loss,
    train,
    train_step,
)
from cascade_splat.splat_utils.checkpoint import save_checkpoint
from cascade_splat.splat_utils.windows import equal_windows

SMALL_FIELD = FieldConfig(feature_dim=2, spatial_resolution=4, temporal_resolution=3, hidden_width=8, head_width=8)
SLOW = os.environ.get("CASCADE_SPLAT_SLOW") == "1"


def _blob(color, opacity: float = 0.9, scale: float = 0.4, mean=(0.0, 0.0, 0.0)) -> GaussianSet:
    sh = torch.zeros(1, 1, 3, dtype=torch.float64)
    sh[0, 0] = torch.tensor(color, dtype=torch.float64) / SH_C0
    return GaussianSet(
        means=torch.tensor([mean], dtype=torch.float64),
        rotations=torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=torch.float64),
        log_scales=torch.full((1, 3), math.log(scale), dtype=torch.float64),
        opacity_logits=torch.tensor([math.log(opacity / (1 - opacity))], dtype=torch.float64),
        sh_coeffs=sh,
    )


def _frames(scene: GaussianSet, count: int = 4, size: int = 16) -> list[DatasetFrame]:
    camera = Camera.look_at((0.0, 0.0, -4.0), (0.0, 0.0, 0.0), focal=float(size), resolution=(size, size))
    with torch.no_grad():
        image = render_reference(scene, camera).image()
    frames = []
    for i in range(count):
        t = i / (count - 1)
        frames.append(DatasetFrame(Path(f"frame_{i}.pf"), camera, t, "val" if i % 4 == 2 else "train", i, image))
    return frames


def _config(**train) -> RunConfig:
    defaults = dict(
        total_iterations=10,
        warmup_iterations=0,
        densify_until=0,
        initial_gaussians=6,
        eval_interval=5,
    )
    defaults.update(train)
    return RunConfig(field=SMALL_FIELD, windows=WindowConfig(count=2), train=TrainConfig(**defaults), seed=3)


def _frozen(**overrides) -> TrainConfig:
    rates = {name: 0.0 for name in TrainConfig.__dataclass_fields__ if name.startswith("lr_")}
    rates.update(overrides)
    return TrainConfig(total_iterations=1000, warmup_iterations=0, densify_until=0, **rates)


class TestScheduleHelpers(unittest.TestCase):
    def test_expon_lr_interpolates_in_log_space(self) -> None:
        self.assertEqual(expon_lr(0, 1e-2, 1e-4, 100), 1e-2)
        self.assertAlmostEqual(expon_lr(50, 1e-2, 1e-4, 100), 1e-3, places=15)
        self.assertAlmostEqual(expon_lr(100, 1e-2, 1e-4, 100), 1e-4, places=15)
        self.assertAlmostEqual(expon_lr(500, 1e-2, 1e-4, 100), 1e-4, places=15)
        self.assertEqual(expon_lr(5, 1e-2, 1e-4, 0), 1e-2)
        self.assertEqual(expon_lr(5, 0.0, 0.0, 10), 0.0)

    def test_each_epoch_visits_every_frame_once(self) -> None:
        for epoch in range(3):
            seen = sorted(frame_for_iteration(7, epoch * 5 + k, 5) for k in range(5))
            self.assertEqual(seen, [0, 1, 2, 3, 4])
        first = [frame_for_iteration(7, k, 5) for k in range(10)]
        self.assertEqual(first, [frame_for_iteration(7, k, 5) for k in range(10)])


class TestPhotometricLoss(unittest.TestCase):
    def test_mean_absolute_error(self) -> None:
        rendered = torch.zeros(2, 2, 3, dtype=torch.float64, requires_grad=True)
        result = photometric_loss(rendered, np.full((2, 2, 3), 0.25))
        self.assertEqual(float(result.loss), 0.25)
        result.loss.backward()
        np.testing.assert_allclose(rendered.grad.numpy(), np.full((2, 2, 3), -1 / 12), rtol=1e-15)

    def test_identical_images_give_zero(self) -> None:
        image = torch.rand(3, 3, 3, dtype=torch.float64)
        self.assertEqual(float(photometric_loss(image, image.clone()).loss), 0.0)

    def test_plane_smoothness_term(self) -> None:
        field = DeformationField(SMALL_FIELD)
        image = torch.zeros(2, 2, 3, dtype=torch.float64)
        result = photometric_loss(image, image.clone(), tv_weight=0.5, field=field)
        self.assertAlmostEqual(float(result.loss), 0.5 * float(field.encoder.total_variation()), places=15)
        self.assertGreater(result.tv, 0.0)

    def test_size_mismatch(self) -> None:
        with self.assertRaises(UsageError):
            photometric_loss(torch.zeros(2, 2, 3, dtype=torch.float64), np.zeros((2, 3, 3)))


def _manual_state(gaussians: GaussianSet, train_cfg: TrainConfig) -> TrainState:
    cfg = RunConfig(field=SMALL_FIELD, train=train_cfg)
    windows = equal_windows(2)
    model = GaussianModel(gaussians, DeformationField(cfg.field), train_cfg)
    return TrainState(cfg, model, TemporalQuantizer(windows, 0.5), windows, scene_extent=1.0)


def _snapshot(state: TrainState) -> dict[str, torch.Tensor]:
    tensors = {name: getattr(state.model, name).detach().clone() for name in GAUSSIAN_GROUPS}
    tensors.update({f"field.{k}": v.clone() for k, v in state.model.field.state_dict().items()})
    return tensors


class TestTrainStep(unittest.TestCase):
    def test_zero_learning_rates_change_nothing(self) -> None:
        frames = _frames(_blob([0.9, 0.1, 0.1]))
        state = _manual_state(_blob([0.5, 0.5, 0.5], scale=0.3), _frozen())
        before = _snapshot(state)
        for i in range(5):
            train_step(state, frames[i % len(frames)])
        after = _snapshot(state)
        for key, value in before.items():
            self.assertTrue(torch.equal(value, after[key]), key)

    def test_colour_mismatch_loss_decreases(self) -> None:
        frames = _frames(_blob([0.9, 0.1, 0.1]))
        state = _manual_state(_blob([0.5, 0.5, 0.5]), _frozen(lr_sh=0.01))
        losses = [train_step(state, frames[i % len(frames)])["loss"] for i in range(200)]
        self.assertTrue(all(math.isfinite(v) for v in losses))
        self.assertLess(np.mean(losses[-50:]), np.mean(losses[:50]))

    def test_warmup_renders_downscaled(self) -> None:
        frames = _frames(_blob([0.9, 0.1, 0.1]))
        state = _manual_state(
            _blob([0.5, 0.5, 0.5]),
            TrainConfig(total_iterations=10, warmup_iterations=3, warmup_downscale=2, densify_until=0),
        )
        factors = [train_step(state, frames[0])["downscale"] for _ in range(5)]
        self.assertEqual(factors, [2, 2, 2, 1, 1])
        self.assertEqual(tuple(state.targets[(0, 2)].shape), (8, 8, 3))

    def test_densify_fires_on_schedule(self) -> None:
        frames = _frames(_blob([0.9, 0.1, 0.1]))
        state = _manual_state(
            _blob([0.5, 0.5, 0.5]),
            TrainConfig(total_iterations=10, warmup_iterations=0, densify_interval=2, densify_until=4),
        )
        fired = [train_step(state, frames[0])["densify"] is not None for _ in range(6)]
        self.assertEqual(fired, [False, True, False, True, False, False])

    def test_non_finite_loss_stops_with_a_dump(self) -> None:
        frames = _frames(_blob([0.9, 0.1, 0.1]), count=2)
        frames[0].image = np.full_like(frames[0].image, np.nan)
        state = _manual_state(_blob([0.5, 0.5, 0.5]), _frozen())
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(NonFiniteLossError):
                train_step(state, frames[0], Path(tmp))
            self.assertTrue((Path(tmp) / "nonfinite_dump.json").exists())


class TestDensification(unittest.TestCase):
    def _model(self, gaussians: GaussianSet, **cfg) -> GaussianModel:
        return GaussianModel(gaussians, DeformationField(SMALL_FIELD), TrainConfig(**cfg))

    def _cluster(self, opacities, scales) -> GaussianSet:
        n = len(opacities)
        alpha = np.asarray(opacities)
        return GaussianSet(
            means=torch.as_tensor(np.random.default_rng(0).uniform(-0.5, 0.5, (n, 3))),
            rotations=torch.tensor([[1.0, 0.0, 0.0, 0.0]] * n, dtype=torch.float64),
            log_scales=torch.as_tensor(np.log(np.asarray(scales, dtype=np.float64))),
            opacity_logits=torch.as_tensor(np.log(alpha / (1 - alpha))),
            sh_coeffs=torch.zeros(n, 1, 3, dtype=torch.float64),
        )

    def test_prunes_exactly_the_transparent(self) -> None:
        model = self._model(self._cluster([0.001, 0.004, 0.006, 0.5], [[0.1] * 3] * 4), densify_grad_threshold=1e9)
        report = model.densify_and_prune(scene_extent=1.0)
        self.assertEqual(report, {"cloned": 0, "split": 0, "pruned": 2, "count": 2})
        np.testing.assert_allclose(torch.sigmoid(model.opacity_logits).detach().numpy(), [0.006, 0.5])

    def test_large_gaussians_split_along_the_longest_axis(self) -> None:
        model = self._model(self._cluster([0.5], [[0.1, 0.5, 0.2]]), densify_grad_threshold=1e-3)
        parent = model.means.detach().clone()
        model.grad_accum[:] = 1.0
        model.denom[:] = 1.0
        report = model.densify_and_prune(scene_extent=1.0)
        self.assertEqual(report["split"], 1)
        self.assertEqual(len(model), 2)
        offsets = model.means.detach() - parent
        np.testing.assert_allclose(offsets.numpy(), [[0.0, 0.75, 0.0], [0.0, -0.75, 0.0]], atol=1e-15)
        np.testing.assert_allclose(
            torch.exp(model.log_scales).detach().numpy(), np.tile([0.1, 0.5 / 1.6, 0.2], (2, 1)), rtol=1e-12
        )

    def test_split_children_cover_the_parent(self) -> None:
        rng = np.random.default_rng(11)
        n = 50
        scene = GaussianSet(
            means=torch.as_tensor(rng.uniform(-0.5, 0.5, (n, 3))),
            rotations=torch.as_tensor(rng.normal(size=(n, 4))),
            log_scales=torch.as_tensor(np.log(rng.uniform(0.05, 0.6, (n, 3)))),
            opacity_logits=torch.zeros(n, dtype=torch.float64),
            sh_coeffs=torch.zeros(n, 1, 3, dtype=torch.float64),
        )
        model = self._model(scene, densify_grad_threshold=1e-3)
        centres = model.means.detach().clone()
        scales = torch.exp(model.log_scales).detach().clone()
        axes = quaternion_to_rotation(model.rotations.detach())  # columns are the principal axes
        model.grad_accum[:] = 1.0
        model.denom[:] = 1.0
        self.assertEqual(model.densify_and_prune(scene_extent=1.0)["split"], n)

        children = model.means.detach().reshape(2, n, 3)
        child_scales = torch.exp(model.log_scales).detach().reshape(2, n, 3)
        split_axis = scales.argmax(dim=1)
        tol = 1e-12
        for i in range(n):
            for a in range(3):
                d = axes[i, :, a]
                lo, hi = float(centres[i] @ d - 3 * scales[i, a]), float(centres[i] @ d + 3 * scales[i, a])
                c = [float(children[k, i] @ d) for k in range(2)]
                h = [3 * float(child_scales[k, i, a]) for k in range(2)]
                if a == int(split_axis[i]):
                    self.assertLessEqual(min(c[0] - h[0], c[1] - h[1]), lo + tol)
                    self.assertGreaterEqual(max(c[0] + h[0], c[1] + h[1]), hi - tol)
                    # the two intervals overlap, so their union has no gap
                    self.assertLessEqual(max(c[0] - h[0], c[1] - h[1]), min(c[0] + h[0], c[1] + h[1]) + tol)
                else:
                    for k in range(2):
                        self.assertLessEqual(c[k] - h[k], lo + tol)
                        self.assertGreaterEqual(c[k] + h[k], hi - tol)

    def test_small_gaussians_are_cloned(self) -> None:
        model = self._model(self._cluster([0.5, 0.5], [[0.001] * 3] * 2), densify_grad_threshold=1e-3)
        model.grad_accum[:] = torch.tensor([1.0, 0.0], dtype=torch.float64)
        model.denom[:] = 1.0
        report = model.densify_and_prune(scene_extent=1.0)
        self.assertEqual((report["cloned"], report["count"]), (1, 3))
        self.assertTrue(torch.equal(model.means[2], model.means[0]))

    def test_budget_keeps_the_largest_gradients(self) -> None:
        model = self._model(
            self._cluster([0.5] * 3, [[0.001] * 3] * 3), densify_grad_threshold=1e-3, max_gaussians=4
        )
        model.grad_accum[:] = torch.tensor([0.1, 0.5, 0.2], dtype=torch.float64)
        model.denom[:] = 1.0
        report = model.densify_and_prune(scene_extent=1.0)
        self.assertEqual((report["cloned"], report["count"]), (1, 4))
        self.assertTrue(torch.equal(model.means[3], model.means[1]))

    def test_optimizer_moments_follow_the_gaussians(self) -> None:
        model = self._model(self._cluster([0.001, 0.5, 0.5], [[0.001] * 3] * 3), densify_grad_threshold=1e-3)
        loss = sum((getattr(model, name) ** 2).sum() for name in GAUSSIAN_GROUPS)
        loss.backward()
        model.optimizer.step()
        before = model.optimizer.state[model.means]["exp_avg"].clone()
        model.grad_accum[:] = torch.tensor([0.0, 1.0, 0.0], dtype=torch.float64)
        model.denom[:] = 1.0
        model.densify_and_prune(scene_extent=1.0)
        self.assertEqual(len(model), 3)  # one clone in, one transparent out
        for name in GAUSSIAN_GROUPS:
            param = getattr(model, name)
            group = next(g for g in model.optimizer.param_groups if g["name"] == name)
            self.assertIs(group["params"][0], param)
            self.assertEqual(model.optimizer.state[param]["exp_avg"].shape, param.shape)
        after = model.optimizer.state[model.means]["exp_avg"]
        np.testing.assert_array_equal(after[:2].numpy(), before[1:].numpy())
        np.testing.assert_array_equal(after[2].numpy(), np.zeros(3))
        self.assertEqual(tuple(model.grad_accum.shape), (3,))


class TestResumeAndDeterminism(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        scene = GaussianSet.random(5, np.random.default_rng(1), bounds=((-0.8, -0.8, -0.8), (0.8, 0.8, 0.8)))
        self.frames = _frames(scene, count=6)
        self.cfg = _config(total_iterations=12, densify_interval=4, densify_until=12, densify_grad_threshold=1e-6)

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def _run(self, state: TrainState, steps: int) -> None:
        train_frames = [f for f in self.frames if f.split == "train"]
        for _ in range(steps):
            index = frame_for_iteration(state.config.seed, state.iteration, len(train_frames))
            train_step(state, train_frames[index])

    def test_two_runs_agree_bit_for_bit(self) -> None:
        a = create_state(self.cfg, self.frames, equal_windows(2))
        b = create_state(self.cfg, self.frames, equal_windows(2))
        self._run(a, 6)
        self._run(b, 6)
        for key, value in _snapshot(a).items():
            self.assertTrue(torch.equal(value, _snapshot(b)[key]), key)

    def test_resumed_run_matches_uninterrupted(self) -> None:
        straight = create_state(self.cfg, self.frames, equal_windows(2))
        self._run(straight, 12)

        first = create_state(self.cfg, self.frames, equal_windows(2))
        self._run(first, 6)
        save_checkpoint(self.tmp / "mid.ctrlgs", checkpoint_from_state(first))
        resumed = load_state(self.tmp / "mid.ctrlgs", [f.t for f in self.frames])
        self.assertEqual(resumed.iteration, 6)
        self._run(resumed, 6)

        expected, got = _snapshot(straight), _snapshot(resumed)
        self.assertEqual(expected.keys(), got.keys())
        for key, value in expected.items():
            self.assertTrue(torch.equal(value, got[key]), key)
        self.assertEqual(straight.model.optimizer_state().keys(), resumed.model.optimizer_state().keys())
        for key, value in straight.model.optimizer_state().items():
            self.assertTrue(torch.equal(value, resumed.model.optimizer_state()[key]), key)


class TestTrainLoop(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        scene = GaussianSet.random(4, np.random.default_rng(2), bounds=((-0.8, -0.8, -0.8), (0.8, 0.8, 0.8)))
        self.frames = _frames(scene, count=5)

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_writes_metrics_and_checkpoint(self) -> None:
        result = train(self.frames, _config(total_iterations=4, eval_interval=2), equal_windows(2), self.tmp, progress=False)
        metrics = pd.read_csv(self.tmp / "metrics.csv")
        self.assertEqual(list(metrics.columns), ["iter", "loss", "psnr", "ssim"])
        self.assertEqual(metrics["iter"].tolist(), [2, 4])
        self.assertTrue(result.checkpoint_path.exists())
        self.assertEqual(load_state(result.checkpoint_path).iteration, 4)

    def test_resume_extends_the_log(self) -> None:
        train(self.frames, _config(total_iterations=4, eval_interval=2), equal_windows(2), self.tmp, progress=False)
        result = train(
            self.frames,
            _config(total_iterations=6, eval_interval=2),
            out_dir=self.tmp,
            resume=self.tmp / "checkpoint.ctrlgs",
            progress=False,
        )
        self.assertEqual(result.state.iteration, 6)
        self.assertEqual(pd.read_csv(self.tmp / "metrics.csv")["iter"].tolist(), [2, 4, 6])

    def test_needs_training_frames(self) -> None:
        for frame in self.frames:
            frame.split = "val"
        with self.assertRaises(UsageError):
            train(self.frames, _config(), equal_windows(2), progress=False)

    def test_segment_heads_need_windows(self) -> None:
        with self.assertRaises(UsageError):
            create_state(_config(), self.frames, None)

    def test_evaluate_columns(self) -> None:
        state = create_state(_config(), self.frames, equal_windows(2))
        table = evaluate(state, self.frames[:2], with_ms_ssim=False)
        self.assertEqual(list(table.columns), ["frame", "t", "psnr", "ssim", "seconds"])
        self.assertEqual(len(table), 2)


class TestSelfConsistency(unittest.TestCase):
    def test_ground_truth_parameters_reproduce_targets(self) -> None:
        exact = RenderConfig(min_transmittance=0.0)
        scene = GaussianSet.random(6, np.random.default_rng(5), bounds=((-0.8, -0.8, -0.8), (0.8, 0.8, 0.8)))
        camera = Camera.look_at((0.0, 0.0, -4.0), (0.0, 0.0, 0.0), focal=24.0, resolution=(24, 24))
        with torch.no_grad():
            image = render_reference(scene, camera, render_config=exact).image()
        frames = [DatasetFrame(Path("f.pf"), camera, t, "train", i, image) for i, t in enumerate((0.0, 1.0))]
        cfg = RunConfig(render=exact, field=SMALL_FIELD)
        state = _manual_state(scene, cfg.train)
        state.config = cfg
        table = evaluate(state, frames, with_ms_ssim=False)
        self.assertEqual(table["psnr"].tolist(), [100.0, 100.0])


@unittest.skipUnless(SLOW, "set CASCADE_SPLAT_SLOW=1 for end-to-end convergence runs")
class TestToySceneConvergence(unittest.TestCase):
    def test_cascade_reaches_target_and_beats_frame_only(self) -> None:
        from cascade_splat.main import main

        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / "compare"
            processes = str(min(len(COMPARE_SEEDS), os.cpu_count() or 1))
            self.assertEqual(main(["compare", "--no-progress", "-p", processes, "-o", str(out)]), 0)
            table = pd.read_csv(out / "compare.csv")
        self.assertEqual(table["seed"].tolist(), list(COMPARE_SEEDS))
        self.assertGreaterEqual(float(table["psnr_cascade"].median()), 28.0, table)
        self.assertGreaterEqual(float(table["gain"].median()), 0.3, table)


if __name__ == "__main__":
    unittest.main()
