"""Tests for Pillow-backed image reading and writing."""

import numpy as np
import pytest
from PIL import Image

from utils.errors import ConfigurationError, InputError
from utils.image_io import read_image, write_image


class TestImageIO:

    def test_8bit_png_colour(self, tmp_path, scene):
        path = write_image(tmp_path / "scene.png", scene)
        back = read_image(path)
        assert back.shape == (48, 48, 3)
        np.testing.assert_allclose(back, scene, atol=0.5 / 255 + 1e-12)

    def test_16bit_png_plane(self, tmp_path, rng):
        plane = rng.uniform(0, 1, (10, 12))
        back = read_image(write_image(tmp_path / "map.png", plane, bit_depth=16))
        assert back.shape == (10, 12)
        np.testing.assert_allclose(back, plane, atol=0.5 / 65535 + 1e-12)

    def test_pgm_plane(self, tmp_path, rng):
        plane = rng.uniform(0, 1, (7, 9))
        back = read_image(write_image(tmp_path / "plane.pgm", plane))
        np.testing.assert_allclose(back, plane, atol=0.5 / 255 + 1e-12)

    def test_ppm_colour(self, tmp_path, scene):
        back = read_image(write_image(tmp_path / "scene.ppm", scene))
        np.testing.assert_allclose(back, scene, atol=0.5 / 255 + 1e-12)

    def test_values_clipped_on_write(self, tmp_path):
        back = read_image(write_image(tmp_path / "c.png", np.array([[-0.5, 1.5]])))
        np.testing.assert_array_equal(back, [[0.0, 1.0]])

    def test_palette_image_read_as_rgb(self, tmp_path):
        Image.new("P", (4, 3), color=5).save(tmp_path / "pal.png")
        assert read_image(tmp_path / "pal.png").shape == (3, 4, 3)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            read_image(tmp_path / "absent.png")

    def test_not_an_image(self, tmp_path):
        path = tmp_path / "notes.png"
        path.write_text("not pixels")
        with pytest.raises(InputError):
            read_image(path)

    @pytest.mark.parametrize(
        "name, array, bits",
        [
            ("x.jpg", np.zeros((2, 2)), 8),
            ("x.png", np.zeros((2, 2)), 12),
            ("x.png", np.zeros((2, 2, 3)), 16),
            ("x.pgm", np.zeros((2, 2, 3)), 8),
            ("x.png", np.zeros((2, 2, 4)), 8),
        ],
    )
    def test_unsupported_writes(self, tmp_path, name, array, bits):
        with pytest.raises(ConfigurationError):
            write_image(tmp_path / name, array, bit_depth=bits)
