import numpy as np
import pytest

from sdslam import imaging
from sdslam.errors import DimensionMismatch, ImageTooSmall, IoFailure, TooManyLevels
from sdslam.imaging import Image, RectificationMap


def ramp_image(w=16, h=12):
    xs = np.tile(np.arange(w) / w, (h, 1))
    return Image(xs)


class TestSampleBilinear:
    def test_integer_coordinate_exact(self):
        rng = np.random.default_rng(0)
        img = Image(rng.uniform(size=(8, 9)))
        for x in range(9):
            for y in range(8):
                assert np.isclose(imaging.sample_bilinear(img, (x, y)), img.data[y, x])

    def test_midpoint_linear(self):
        img = Image(np.array([[0.0, 1.0], [0.0, 1.0]]))
        assert np.isclose(imaging.sample_bilinear(img, (0.5, 0.5)), 0.5)

    def test_out_of_bounds_none(self):
        img = Image(np.zeros((4, 4)))
        assert imaging.sample_bilinear(img, (-0.5, 0)) is None
        assert imaging.sample_bilinear(img, (0, 3.5)) is None

    def test_continuous_across_pixel_boundary(self):
        rng = np.random.default_rng(1)
        img = Image(rng.uniform(size=(6, 6)))
        for x in (1.0, 2.0, 3.0):
            below = imaging.sample_bilinear(img, (x - 1e-12, 2.3))
            above = imaging.sample_bilinear(img, (x + 1e-12, 2.3))
            assert abs(below - above) < 1e-9

    def test_vectorized_matches_scalar(self):
        rng = np.random.default_rng(2)
        img = Image(rng.uniform(size=(10, 12)))
        uv = rng.uniform([0, 0], [11, 9], (100, 2))
        vals, valid = imaging.sample_bilinear_many(img.data, uv)
        assert valid.all()
        for i in range(100):
            assert np.isclose(vals[i], imaging.sample_bilinear(img, uv[i]))


class TestGradient:
    def test_constant_zero(self):
        g = imaging.gradient(Image(np.full((5, 5), 0.3)))
        assert np.allclose(g, 0)

    def test_horizontal_ramp(self):
        img = ramp_image(16, 12)
        g = imaging.gradient(img)
        assert np.allclose(g[1:-1, 1:-1, 0], 1.0 / 16)
        assert np.allclose(g[1:-1, 1:-1, 1], 0.0)

    def test_border_zero(self):
        rng = np.random.default_rng(3)
        g = imaging.gradient(Image(rng.uniform(size=(7, 7))))
        assert np.allclose(g[0], 0) and np.allclose(g[-1], 0)
        assert np.allclose(g[:, 0], 0) and np.allclose(g[:, -1], 0)

    def test_too_small(self):
        with pytest.raises(ImageTooSmall):
            imaging.gradient(Image(np.zeros((2, 2))))


class TestPyramid:
    def test_single_level(self):
        img = ramp_image()
        pyr = imaging.build_pyramid(img, 1)
        assert len(pyr) == 1
        assert np.array_equal(pyr[0].data, img.data)

    def test_constant_stays_constant(self):
        pyr = imaging.build_pyramid(Image(np.full((32, 32), 0.7)), 3)
        for level in pyr.levels:
            assert np.allclose(level.data, 0.7)

    def test_checkerboard_averages_to_half(self):
        cb = np.indices((4, 4)).sum(axis=0) % 2
        half = imaging._halve(cb.astype(float))
        assert np.allclose(half, 0.5)

    def test_dims_floor_halved(self):
        pyr = imaging.build_pyramid(Image(np.zeros((33, 47))), 3)
        assert pyr[1].data.shape == (16, 23)
        assert pyr[2].data.shape == (8, 11)

    def test_mean_preserved_on_divisible_dims(self):
        rng = np.random.default_rng(4)
        img = Image(rng.uniform(size=(64, 64)))
        pyr = imaging.build_pyramid(img, 4)
        for level in pyr.levels:
            assert abs(level.data.mean() - img.data.mean()) < 1e-9

    def test_too_many_levels(self):
        with pytest.raises(TooManyLevels):
            imaging.build_pyramid(Image(np.zeros((16, 16))), 3)


class TestRectify:
    def test_identity_map_is_identity(self):
        rng = np.random.default_rng(5)
        img = Image(rng.uniform(size=(12, 16)))
        out, mask = imaging.rectify(img, RectificationMap.identity(16, 12))
        assert mask.all()
        assert np.allclose(out.data, img.data, atol=1e-12)

    def test_downsample_factor_two(self):
        img = Image(np.zeros((1024, 1280)))
        out, mask = imaging.rectify(img, RectificationMap.identity(1280, 1024, factor=2))
        assert (out.width, out.height) == (640, 512)

    def test_translation_map(self):
        rng = np.random.default_rng(6)
        img = Image(rng.uniform(size=(20, 20)))
        m = RectificationMap.identity(20, 20)
        shifted = RectificationMap(m.map_x + 3.0, m.map_y)
        out, mask = imaging.rectify(img, shifted)
        assert np.allclose(out.data[:, :17], img.data[:, 3:], atol=1e-12)
        assert not mask[:, 17:].any()

    def test_invalid_entries_masked(self):
        img = Image(np.ones((8, 8)))
        m = RectificationMap.identity(8, 8)
        mx = m.map_x.copy()
        mx[0, 0] = -1.0
        out, mask = imaging.rectify(img, RectificationMap(mx, m.map_y))
        assert not mask[0, 0]
        assert out.data[0, 0] == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            imaging.rectify(Image(np.zeros((4, 4))), RectificationMap.identity(5, 5))


class TestLutFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        m = RectificationMap(
            rng.uniform(0, 100, (10, 14)), rng.uniform(0, 100, (10, 14)), factor=2
        )
        path = tmp_path / "left.lut"
        m.to_file(path)
        back = RectificationMap.from_file(path, factor=2)
        assert np.allclose(back.map_x, m.map_x, atol=1e-4)
        assert np.allclose(back.map_y, m.map_y, atol=1e-4)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.lut"
        path.write_bytes(b"NOTALUT!" + b"\x00" * 8)
        with pytest.raises(IoFailure):
            RectificationMap.from_file(path)


class TestImageIo:
    def test_png_8bit_normalized(self, tmp_path):
        from PIL import Image as PilImage

        arr = np.arange(0, 256, dtype=np.uint8).reshape(16, 16)
        p = tmp_path / "t.png"
        PilImage.fromarray(arr).save(p)
        img = Image.from_file(p)
        assert np.allclose(img.data, arr / 255.0)

    def test_pgm_16bit_normalized(self, tmp_path):
        from PIL import Image as PilImage

        arr = (np.arange(256, dtype=np.uint16).reshape(16, 16)) * 257
        p = tmp_path / "t.png"
        PilImage.fromarray(arr).save(p)
        img = Image.from_file(p)
        assert img.data.max() <= 1.0
        assert np.allclose(img.data, arr / 65535.0)
