import tempfile
import unittest
from pathlib import Path

import numpy as np

from cascade_splat.splat_utils.errors import IngestionError
from cascade_splat.splat_utils.imageio import area_downsample, read_image, to_luma, write_image


class TestImageCodecs(unittest.TestCase):
    def setUp(self) -> None:
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self) -> None:
        self._tmp.cleanup()

    def test_pf_is_bit_exact_for_float32(self) -> None:
        image = np.random.default_rng(0).random((5, 7, 3)).astype(np.float32)
        write_image(self.tmp / "a.pf", image)
        back = read_image(self.tmp / "a.pf")
        self.assertEqual(back.shape, (5, 7, 3))
        np.testing.assert_array_equal(back.astype(np.float32), image)

    def test_pf_rows_are_bottom_to_top(self) -> None:
        image = np.zeros((2, 1, 3), dtype=np.float32)
        image[0] = 1.0
        write_image(self.tmp / "rows.pf", image)
        raw = (self.tmp / "rows.pf").read_bytes()
        body = np.frombuffer(raw[-6 * 4 :], dtype="<f4").reshape(2, 1, 3)
        np.testing.assert_array_equal(body[0], 0.0)
        np.testing.assert_array_equal(body[1], 1.0)

    def test_ppm_quantizes_to_8_bits(self) -> None:
        image = np.array([[[0.0, 0.5, 1.0]]])
        write_image(self.tmp / "a.ppm", image)
        back = read_image(self.tmp / "a.ppm")
        np.testing.assert_allclose(back, [[[0.0, 128 / 255, 1.0]]])

    def test_unknown_magic(self) -> None:
        (self.tmp / "bad.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0\n")
        with self.assertRaises(IngestionError):
            read_image(self.tmp / "bad.ppm")

    def test_truncated_raster(self) -> None:
        (self.tmp / "short.ppm").write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with self.assertRaises(IngestionError):
            read_image(self.tmp / "short.ppm")

    def test_missing_file(self) -> None:
        with self.assertRaises(IngestionError):
            read_image(self.tmp / "nope.pf")


class TestImageHelpers(unittest.TestCase):
    def test_area_downsample_averages_blocks(self) -> None:
        image = np.arange(4 * 4 * 3, dtype=np.float64).reshape(4, 4, 3)
        small = area_downsample(image, 2)
        self.assertEqual(small.shape, (2, 2, 3))
        np.testing.assert_allclose(small[0, 0], image[:2, :2].mean(axis=(0, 1)))

    def test_area_downsample_drops_partial_blocks(self) -> None:
        self.assertEqual(area_downsample(np.zeros((5, 7, 3)), 2).shape, (2, 3, 3))

    def test_luma_weights_sum_to_one(self) -> None:
        np.testing.assert_allclose(to_luma(np.ones((2, 2, 3))), np.ones((2, 2)))


if __name__ == "__main__":
    unittest.main()
