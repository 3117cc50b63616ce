import contextlib
import io
import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

from cascade_splat.main import build_parser, main

SMALL = [
    "--set", "field.feature_dim=2",
    "--set", "field.spatial_resolution=4",
    "--set", "field.temporal_resolution=3",
    "--set", "field.hidden_width=8",
    "--set", "field.head_width=8",
    "--set", "train.total_iterations=4",
    "--set", "train.warmup_iterations=2",
    "--set", "train.eval_interval=2",
    "--set", "train.initial_gaussians=8",
]


def _run(*argv: str) -> tuple[int, str, str]:
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


class TestParser(unittest.TestCase):
    def test_subcommands(self) -> None:
        parser = build_parser()
        args = parser.parse_args(["segment", "--method", "equal", "-n", "3", "-o", "w.txt"])
        self.assertEqual((args.command, args.method, args.count), ("segment", "equal", 3))
        args = parser.parse_args(["render", "-c", "x", "--camera", "m.json", "--t", "0", "0.5", "-o", "out"])
        self.assertEqual(args.t, ["0", "0.5"])
        self.assertEqual(args.format, "ppm")

    def test_unknown_method_is_an_argparse_error(self) -> None:
        with contextlib.redirect_stderr(io.StringIO()), self.assertRaises(SystemExit):
            build_parser().parse_args(["segment", "--method", "bogus", "-o", "w.txt"])


class TestCommandErrors(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_zero_windows_is_a_usage_error(self) -> None:
        code, _, err = _run("segment", "--method", "equal", "-n", "0", "-o", self.tmp / "w.txt")
        self.assertEqual(code, 2)
        self.assertTrue(err.startswith("error: UsageError:"), err)

    def test_compare_needs_a_window(self) -> None:
        code, _, err = _run("compare", "-n", "0", "-o", self.tmp / "cmp")
        self.assertEqual(code, 2)
        self.assertIn("window count", err)

    def test_dynamic_windows_need_flow(self) -> None:
        code, _, _ = _run("segment", "--method", "threshold", "-n", "2", "-o", self.tmp / "w.txt")
        self.assertEqual(code, 2)

    def test_render_time_outside_unit_interval(self) -> None:
        code, _, err = _run("render", "-c", self.tmp / "x.ctrlgs", "--camera", self.tmp / "c.json", "--t", "1.5", "-o", self.tmp)
        self.assertEqual(code, 2)
        self.assertIn("outside [0, 1]", err)

    def test_unknown_config_key(self) -> None:
        code, _, err = _run("segment", "--set", "train.bogus=1", "-o", self.tmp / "w.txt")
        self.assertEqual(code, 2)
        self.assertIn("ConfigError", err)

    def test_missing_manifest(self) -> None:
        code, _, err = _run("flow", "-m", self.tmp / "absent.json", "-o", self.tmp / "flow.txt")
        self.assertEqual(code, 1)
        self.assertIn("IngestionError", err)

    def test_eval_on_an_empty_split(self) -> None:
        self.assertEqual(
            _run("gen", "-o", self.tmp / "data", "--frames", "2", "--gaussians", "4",
                 "--width", "16", "--height", "16", "--no-progress")[0],
            0,
        )
        code, _, err = _run(
            "eval", "-c", self.tmp / "x.ctrlgs", "-m", self.tmp / "data" / "manifest.json", "--split", "val",
            "-o", self.tmp / "eval.csv",
        )
        self.assertEqual(code, 2)
        self.assertIn("no frames", err)

    def test_segment_writes_windows_and_config(self) -> None:
        code, out, _ = _run("segment", "--method", "equal", "-n", "4", "-o", self.tmp / "w.txt")
        self.assertEqual(code, 0)
        self.assertEqual((self.tmp / "w.txt").read_text().splitlines(), ["windows_v1", "0.0", "0.25", "0.5", "0.75", "1.0"])
        saved = json.loads((self.tmp / "config.json").read_text())
        self.assertEqual((saved["windows"]["method"], saved["windows"]["count"]), ("equal", 4))
        self.assertIn("4 windows (equal)", out)


class TestPipeline(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)
        data = self.tmp / "data"
        code, _, err = _run("gen", "-o", data, "--frames", "8", "--gaussians", "10",
                            "--width", "16", "--height", "16", "--no-progress")
        self.assertEqual(code, 0, err)
        self.manifest = data / "manifest.json"

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_gen_flow_segment_train_render_eval(self) -> None:
        tmp = self.tmp
        code, out, err = _run("flow", "-m", self.manifest, "-o", tmp / "flow.txt")
        self.assertEqual(code, 0, err)
        self.assertIn("peaks:", out)
        self.assertEqual(len(pd.read_csv(tmp / "flow.csv")), 7)

        code, _, err = _run("segment", "--flow", tmp / "flow.txt", "--method", "threshold", "-n", "2", "-o", tmp / "windows.txt")
        self.assertEqual(code, 0, err)

        code, out, err = _run("train", "-m", self.manifest, "--windows", tmp / "windows.txt", "-o", tmp / "run",
                              "--no-progress", *SMALL)
        self.assertEqual(code, 0, err)
        self.assertIn("Trained 4 iterations", out)
        self.assertEqual(pd.read_csv(tmp / "run" / "metrics.csv")["iter"].tolist(), [2, 4])
        self.assertTrue((tmp / "run" / "config.json").exists())
        self.assertTrue((tmp / "run" / "windows.txt").exists())

        checkpoint = tmp / "run" / "checkpoint.ctrlgs"
        code, _, err = _run("render", "-c", checkpoint, "--camera", self.manifest, "--t", "0", "1",
                            "-o", tmp / "renders", "--format", "pf")
        self.assertEqual(code, 0, err)
        self.assertTrue((tmp / "renders" / "render_000.pf").exists())
        self.assertTrue((tmp / "renders" / "render_001.pf").exists())

        code, out, err = _run("eval", "-c", checkpoint, "-m", self.manifest, "--split", "val", "-o", tmp / "eval.csv")
        self.assertEqual(code, 0, err)
        table = pd.read_csv(tmp / "eval.csv")
        self.assertEqual(table["frame"].astype(str).tolist()[-1], "mean")
        self.assertEqual(len(table), 3)  # two validation frames plus the mean row
        self.assertIn("frames/s", out)

    def test_resume_continues_training(self) -> None:
        run = self.tmp / "run"
        base = ["train", "-m", self.manifest, "--set", "windows.method=\"equal\"", "-o", run, "--no-progress", *SMALL]
        self.assertEqual(_run(*base)[0], 0)
        code, out, err = _run(*base, "--resume", run / "checkpoint.ctrlgs", "--set", "train.total_iterations=6")
        self.assertEqual(code, 0, err)
        self.assertIn("Trained 6 iterations", out)
        self.assertEqual(pd.read_csv(run / "metrics.csv")["iter"].tolist(), [2, 4, 6])

    def test_sweep_writes_one_row_per_case(self) -> None:
        code, _, err = _run("flow", "-m", self.manifest, "-o", self.tmp / "flow.txt")
        self.assertEqual(code, 0, err)
        code, _, err = _run(
            "sweep", "-m", self.manifest, "--flow", self.tmp / "flow.txt", "--methods", "equal", "threshold",
            "--counts", "2", "--qs", "0.5", "-o", self.tmp / "sweep", *SMALL,
        )
        self.assertEqual(code, 0, err)
        table = pd.read_csv(self.tmp / "sweep" / "sweep.csv")
        self.assertEqual(sorted(table["method"]), ["equal", "threshold"])
        self.assertTrue({"psnr", "ssim", "ms_ssim", "fps"} <= set(table.columns))

    def test_compare_writes_one_row_per_seed(self) -> None:
        code, out, err = _run(
            "compare", "--seeds", "0", "1", "-n", "2", "--frames", "8", "--gaussians", "10",
            "--width", "16", "--height", "16", "--no-progress", "-o", self.tmp / "compare", *SMALL,
        )
        self.assertEqual(code, 0, err)
        table = pd.read_csv(self.tmp / "compare" / "compare.csv")
        self.assertEqual(list(table.columns), ["seed", "psnr_cascade", "psnr_frame_only", "gain"])
        self.assertEqual(table["seed"].tolist(), [0, 1])
        np.testing.assert_allclose(table["gain"], table["psnr_cascade"] - table["psnr_frame_only"], atol=1e-12)
        saved = json.loads((self.tmp / "compare" / "seed1" / "frame_only" / "config.json").read_text())
        self.assertEqual((saved["field"]["segment_heads"], saved["seed"]), (False, 1))
        self.assertTrue((self.tmp / "compare" / "seed0" / "cascade" / "checkpoint.ctrlgs").exists())
        self.assertIn("median over 2 seeds", out)


if __name__ == "__main__":
    unittest.main()
