import math
import unittest

import pandas as pd

from cascade_splat.splat_utils.stats import (
    aggregate_eval,
    best_per_method,
    compare_summary,
    describe,
    eval_table_with_mean,
)


class TestDescribe(unittest.TestCase):
    def test_basic(self) -> None:
        out = describe([1.0, 2.0, 3.0, 10.0])
        self.assertEqual(out["min"], 1.0)
        self.assertEqual(out["max"], 10.0)
        self.assertEqual(out["mean"], 4.0)
        self.assertEqual(out["median"], 2.5)
        self.assertAlmostEqual(out["stdev"], pd.Series([1.0, 2.0, 3.0, 10.0]).std())

    def test_single_value_and_nans(self) -> None:
        self.assertEqual(describe([float("nan"), 5.0])["stdev"], 0.0)
        self.assertEqual(describe([]), {})


class TestAggregateEval(unittest.TestCase):
    def test_means_and_throughput(self) -> None:
        table = pd.DataFrame(
            {"frame": [2, 6], "psnr": [30.0, 32.0], "ssim": [0.9, 0.8], "ms_ssim": [0.95, 0.85], "seconds": [0.25, 0.75]}
        )
        summary = aggregate_eval(table)
        self.assertEqual(summary["frames"], 2)
        self.assertEqual(summary["psnr"], 31.0)
        self.assertAlmostEqual(summary["ssim"], 0.85)
        self.assertAlmostEqual(summary["ms_ssim"], 0.9)
        self.assertEqual(summary["fps"], 2.0)

    def test_empty_table(self) -> None:
        self.assertEqual(aggregate_eval(pd.DataFrame()), {"frames": 0})

    def test_zero_render_time(self) -> None:
        summary = aggregate_eval(pd.DataFrame({"psnr": [20.0], "seconds": [0.0]}))
        self.assertTrue(math.isinf(summary["fps"]))
        self.assertNotIn("ssim", summary)


class TestTables(unittest.TestCase):
    def test_mean_row_is_appended(self) -> None:
        table = pd.DataFrame({"frame": [2, 6], "t": [0.25, 0.75], "psnr": [30.0, 34.0]})
        out = eval_table_with_mean(table)
        self.assertEqual(out["frame"].tolist(), ["2", "6", "mean"])
        self.assertEqual(out["psnr"].iloc[-1], 32.0)
        self.assertEqual(out["t"].iloc[-1], 0.5)
        self.assertEqual(table["frame"].tolist(), [2, 6])

    def test_best_per_method(self) -> None:
        sweep = pd.DataFrame(
            {
                "method": ["equal", "equal", "threshold", "threshold", "nhighest"],
                "count": [2, 4, 2, 4, 3],
                "psnr": [28.0, 29.5, 30.0, 30.0, 27.0],
            }
        )
        best = best_per_method(sweep)
        self.assertEqual(best["method"].tolist(), ["equal", "nhighest", "threshold"])
        self.assertEqual(best["count"].tolist(), [4, 3, 2])
        self.assertTrue(best_per_method(sweep.iloc[0:0]).empty)

    def test_compare_summary(self) -> None:
        table = pd.DataFrame(
            {
                "seed": [0, 1, 2],
                "psnr_cascade": [30.0, 29.0, 31.0],
                "psnr_frame_only": [29.5, 29.2, 30.0],
            }
        )
        table["gain"] = table["psnr_cascade"] - table["psnr_frame_only"]
        summary = compare_summary(table)
        self.assertEqual(summary["seeds"], 3)
        self.assertEqual(summary["psnr_cascade"], 30.0)
        self.assertEqual(summary["psnr_frame_only"], 29.5)
        self.assertAlmostEqual(summary["median_gain"], 0.5)
        self.assertEqual(summary["wins"], 2)
        self.assertEqual(compare_summary(table.iloc[0:0]), {"seeds": 0})


if __name__ == "__main__":
    unittest.main()
