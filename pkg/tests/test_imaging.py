import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import blob_image
from warpagg.imaging import (
    Image,
    PgmDataError,
    PgmHeaderError,
    PgmTruncatedError,
    PgmUnsupportedError,
    bilinear_sample,
    from_pixel,
    load_image,
    normalized_grid,
    resize_bilinear,
    resize_bilinear_vjp,
    sample_grid,
    sample_grid_vjp_image,
    save_image,
    to_pixel,
)


class TestImageType:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            Image(np.array([[0.0, 1.5]]))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Image(np.array([[0.0, np.nan]]))

    def test_shape_properties(self):
        img = Image(np.zeros((3, 5)))
        assert (img.width, img.height) == (5, 3)


class TestPgmIO:
    def test_p2_maxval_division(self, tmp_path):
        f = tmp_path / "a.pgm"
        f.write_text("P2\n2 2\n255\n0 255 0 255\n")
        img = load_image(f)
        assert img.data.ravel().tolist() == [0.0, 1.0, 0.0, 1.0]

    def test_p5_constant(self, tmp_path):
        f = tmp_path / "b.pgm"
        f.write_bytes(b"P5\n3 2\n255\n" + bytes([128] * 6))
        img = load_image(f)
        assert np.allclose(img.data, 128 / 255)

    def test_p5_sixteen_bit(self, tmp_path):
        f = tmp_path / "c.pgm"
        f.write_bytes(b"P5\n1 1\n65535\n" + (30000).to_bytes(2, "big"))
        img = load_image(f)
        assert img.data[0, 0] == pytest.approx(30000 / 65535)

    def test_comments_in_header(self, tmp_path):
        f = tmp_path / "d.pgm"
        f.write_text("P2 # gray\n# comment line\n1 1\n10\n7\n")
        assert load_image(f).data[0, 0] == pytest.approx(0.7)

    def test_color_unsupported(self, tmp_path):
        f = tmp_path / "e.pgm"
        f.write_bytes(b"P6\n1 1\n255\n\0\0\0")
        with pytest.raises(PgmUnsupportedError):
            load_image(f)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image(tmp_path / "nope.pgm")

    def test_malformed_header(self, tmp_path):
        f = tmp_path / "f.pgm"
        f.write_text("P2\ntwo 2\n255\n0 0 0 0\n")
        with pytest.raises(PgmHeaderError):
            load_image(f)

    def test_truncated_p5(self, tmp_path):
        f = tmp_path / "g.pgm"
        f.write_bytes(b"P5\n2 2\n255\n\x00\x01")
        with pytest.raises(PgmTruncatedError):
            load_image(f)

    def test_truncated_p2(self, tmp_path):
        f = tmp_path / "h.pgm"
        f.write_text("P2\n2 2\n255\n0 1 2\n")
        with pytest.raises(PgmTruncatedError):
            load_image(f)

    def test_sample_over_maxval(self, tmp_path):
        f = tmp_path / "i.pgm"
        f.write_text("P2\n1 1\n10\n11\n")
        with pytest.raises(PgmDataError):
            load_image(f)

    def test_save_load_half_gray(self, tmp_path):
        f = tmp_path / "j.pgm"
        save_image(Image(np.full((4, 4), 0.5)), f)
        assert np.allclose(load_image(f).data, 128 / 255)

    def test_save_extremes(self, tmp_path):
        f = tmp_path / "k.pgm"
        save_image(Image(np.array([[1.0]])), f)
        assert f.read_bytes().endswith(b"\xff")
        save_image(Image(np.array([[0.0]])), f)
        assert f.read_bytes().endswith(b"\x00")

    def test_round_trip_error_bound(self, tmp_path):
        img = blob_image(16, seed=3)
        f = tmp_path / "l.pgm"
        save_image(img, f)
        back = load_image(f)
        assert np.max(np.abs(back.data - img.data)) < 1 / 255


class TestCoordinates:
    def test_corners(self):
        assert np.allclose(to_pixel([-1.0, -1.0], 256, 256), [0.0, 0.0])
        assert np.allclose(to_pixel([1.0, 1.0], 256, 256), [255.0, 255.0])

    def test_midpoint(self):
        assert np.allclose(to_pixel([0.0, 0.0], 256, 256), [127.5, 127.5])

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(-1, 1, (1000, 2))
        back = from_pixel(to_pixel(pts, 97, 41), 97, 41)
        assert np.max(np.abs(back - pts)) < 1e-12

    def test_zero_size_rejected(self):
        with pytest.raises(ValueError):
            to_pixel([0.0, 0.0], 0, 4)

    @given(
        st.floats(-1, 1), st.floats(-1, 1),
        st.integers(2, 512), st.integers(2, 512),
    )
    @settings(max_examples=60, deadline=None)
    def test_round_trip_property(self, x, y, w, h):
        p = np.array([x, y])
        assert np.max(np.abs(from_pixel(to_pixel(p, w, h), w, h) - p)) < 1e-12


class TestBilinearSample:
    def test_cell_center_mean(self):
        img = Image(np.array([[0.0, 1.0], [2.0, 3.0]]) / 3)
        val, _ = bilinear_sample(img, (0.0, 0.0))
        assert val == pytest.approx((0 + 1 + 2 + 3) / 4 / 3)

    def test_exact_at_pixel_centers(self):
        img = blob_image(9, seed=1)
        grid = normalized_grid(9, 9)
        vals, _ = sample_grid(img.data, grid)
        assert np.array_equal(vals.reshape(9, 9), img.data)

    def test_continuity_across_cell_boundaries(self):
        img = blob_image(16, seed=2)
        # normalized coordinate of an interior pixel center = cell boundary
        for k in range(1, 15):
            x = 2 * k / 15 - 1
            lo, _ = bilinear_sample(img, (x - 1e-9, 0.1))
            hi, _ = bilinear_sample(img, (x + 1e-9, 0.1))
            assert abs(hi - lo) < 1e-6

    def test_grad_matches_finite_differences(self):
        img = blob_image(24, seed=4)
        rng = np.random.default_rng(5)
        n, checked = 24, 0
        h = 1e-4
        while checked < 1000:
            p = rng.uniform(-0.95, 0.95, 2)
            pix = to_pixel(p, n, n)
            fr = pix - np.floor(pix)
            if np.any(fr < 1e-3) or np.any(fr > 1 - 1e-3):
                continue
            _, g = bilinear_sample(img, p)
            for axis in range(2):
                e = np.zeros(2)
                e[axis] = h
                fp, _ = bilinear_sample(img, p + e)
                fm, _ = bilinear_sample(img, p - e)
                fd = (fp - fm) / (2 * h)
                denom = max(abs(fd), abs(g[axis]), 1e-8)
                assert abs(g[axis] - fd) / denom < 1e-5
            checked += 1

    def test_clamp_outside(self):
        img = Image(np.array([[0.0, 1.0], [0.25, 0.75]]))
        val, g = bilinear_sample(img, (-2.0, -2.0))
        assert val == 0.0
        assert np.allclose(g, 0.0)


class TestGridVjpAndResize:
    def test_scatter_is_adjoint_of_gather(self):
        img = blob_image(12, seed=6)
        rng = np.random.default_rng(7)
        pts = rng.uniform(-0.9, 0.9, (40, 2))
        cot = rng.normal(size=40)
        vals, _ = sample_grid(img.data, pts)
        lhs = float(cot @ vals)
        grad_img = sample_grid_vjp_image(img.data, pts, cot)
        # <cot, S(img)> must equal <dS/dimg^T cot, img> since S is linear in img
        assert float((grad_img * img.data).sum()) == pytest.approx(lhs, rel=1e-12)

    def test_resize_identity(self):
        img = blob_image(10, seed=8)
        out = resize_bilinear(img, 10, 10)
        assert np.array_equal(out.data, img.data)

    def test_resize_vjp_finite_difference(self):
        img = blob_image(10, seed=9)
        rng = np.random.default_rng(10)
        cot = rng.normal(size=(6, 6))
        grad = resize_bilinear_vjp(img, 6, 6, cot)
        h = 1e-6
        for y, x in [(2, 3), (7, 1), (5, 5), (0, 0)]:
            bumped = img.data.copy()
            bumped[y, x] += h
            up = float((resize_bilinear(Image(bumped), 6, 6).data * cot).sum())
            bumped[y, x] -= 2 * h
            dn = float((resize_bilinear(Image(bumped), 6, 6).data * cot).sum())
            fd = (up - dn) / (2 * h)
            assert grad[y, x] == pytest.approx(fd, abs=1e-6)
