import numpy as np
import pytest
from scipy.ndimage import convolve
from skimage.color import hsv2rgb, rgb2hsv

from nipfan import autodiff as ad
from nipfan import channel as ch
from nipfan.autodiff import InputError, ShapeError
from nipfan.metrics import psnr


@pytest.fixture
def textured(rng):
    return rng.uniform(0.1, 0.9, size=(32, 32, 3))


class TestClasses:
    def test_encoding(self):
        assert [int(c) for c in ch.ManipulationClass] == [0, 1, 2, 3, 4]
        assert ch.ManipulationClass.NATIVE == 0

    def test_report_order(self):
        assert [c.short for c in ch.REPORT_ORDER] == ["native", "sharpen", "gaussian", "jpg", "resample"]


class TestSharpen:
    def test_kernel(self):
        assert ch.SHARPEN_KERNEL.sum() == pytest.approx(1.0)
        assert ch.SHARPEN_KERNEL[1, 1] == pytest.approx(26 / 6)

    def test_constant_unchanged(self, f64):
        x = np.full((8, 8, 3), 0.4)
        np.testing.assert_allclose(ch.sharpen(ad.tensor(x)).data, x, atol=1e-12)

    def test_matches_hsv_oracle(self, f64, textured):
        hsv = rgb2hsv(textured)
        hsv[..., 2] = np.clip(convolve(hsv[..., 2], ch.SHARPEN_KERNEL, mode="nearest"), 0, 1)
        np.testing.assert_allclose(ch.sharpen(ad.tensor(textured)).data, hsv2rgb(hsv), atol=1e-9)

    def test_bright_pixel(self, f64):
        x = np.full((7, 7, 3), 0.3)
        x[3, 3] = 0.5
        y = ch.sharpen(ad.tensor(x)).data
        assert y[3, 3, 0] > 0.5
        assert y[2, 3, 0] < 0.3 and y[3, 2, 0] < 0.3
        # Value channel follows the direct convolution.
        assert y[2, 3, 0] == pytest.approx(0.3 - 4 / 6 * 0.2)


class TestGaussian:
    def test_kernel_normalized(self):
        k = ch.gaussian_kernel()
        assert k.sum() == pytest.approx(1.0)
        r = np.arange(5) - 2
        g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * 0.83 ** 2))
        assert k[2, 2] == pytest.approx(1 / g.sum())

    def test_constant_unchanged(self, f64):
        x = np.full((8, 8, 3), 0.7)
        np.testing.assert_allclose(ch.gaussian(ad.tensor(x)).data, x, atol=1e-12)

    def test_matches_scipy(self, f64, textured):
        ref = convolve(textured, ch.gaussian_kernel()[..., None], mode="nearest")
        np.testing.assert_allclose(ch.gaussian(ad.tensor(textured)).data, ref, atol=1e-12)


class TestResample:
    def test_constant_unchanged(self, f64):
        x = np.full((8, 8, 3), 0.2)
        np.testing.assert_allclose(ch.resample(ad.tensor(x)).data, x, atol=1e-12)

    def test_ramp_interior(self, f64):
        ramp = np.tile(np.linspace(0.1, 0.9, 32)[None, :, None], (16, 1, 3))
        out = ch.resample(ad.tensor(ramp)).data
        np.testing.assert_allclose(out[:, 2:-2], ramp[:, 2:-2], atol=1e-12)

    def test_checkerboard_flattens(self, f64):
        cb = (np.indices((16, 16)).sum(0) % 2).astype(float)
        out = ch.resample(ad.tensor(np.repeat(cb[..., None], 3, -1))).data
        np.testing.assert_allclose(out[2:-2, 2:-2], 0.5, atol=1e-12)

    def test_interp_matrix_rows_sum_to_one(self):
        assert np.allclose(ch._interp_matrix(10, 5).sum(1), 1.0)

    def test_odd_extent(self):
        with pytest.raises(ShapeError):
            ch.resample(ad.tensor(np.zeros((7, 8, 3))))


class TestJpeg80:
    def test_constant(self, f64):
        x = np.full((16, 16, 3), 0.45)
        np.testing.assert_allclose(ch.jpeg80(ad.tensor(x)).data, x, atol=1 / 255)

    def test_lossier_than_q95(self, f64, textured):
        from nipfan.djpeg import djpeg_forward
        q80 = ch.jpeg80(ad.tensor(textured)).data
        q95 = djpeg_forward(ad.tensor(textured), 95).data
        assert psnr(q80, textured) < psnr(q95, textured)


class TestDispatchAndChannel:
    def test_native_identity(self, textured):
        x = ad.tensor(textured)
        assert ch.apply_manipulation(ch.ManipulationClass.NATIVE, x) is x

    def test_outputs_distinct(self, textured):
        outs = [ch.apply_manipulation(c, ad.tensor(textured)).data for c in ch.ManipulationClass]
        for i in range(5):
            for j in range(i + 1, 5):
                assert np.sum((outs[i] - outs[j]) ** 2) > 0

    def test_pure(self, textured):
        for c in ch.ManipulationClass:
            a = ch.apply_manipulation(c, ad.tensor(textured)).data
            b = ch.apply_manipulation(c, ad.tensor(textured)).data
            np.testing.assert_array_equal(a, b)

    def test_geometry(self, rng):
        assert ch.distribution_channel(ad.tensor(rng.random((256, 256, 3)))).shape == (128, 128, 3)

    def test_constant_through_channel(self, f64):
        x = np.full((32, 32, 3), 0.6)
        np.testing.assert_allclose(ch.distribution_channel(ad.tensor(x)).data, 0.6, atol=1 / 255)

    def test_indivisible_extent(self):
        with pytest.raises(ShapeError):
            ch.distribution_channel(ad.tensor(np.zeros((10, 10, 3))), ch.ChannelConfig(downsample_factor=4))

    def test_bad_config(self):
        with pytest.raises(InputError):
            ch.ChannelConfig(downsample_factor=0)
        with pytest.raises(InputError):
            ch.ChannelConfig(jpeg_quality=0)

    def test_branch_all_layout(self, rng):
        x = ad.tensor(rng.random((3, 32, 32, 3)))
        images, labels = ch.branch_all(x)
        assert images.shape == (15, 16, 16, 3)
        np.testing.assert_array_equal(labels, np.repeat(np.arange(5), 3))

    def test_gradient_through_channel(self, f64, rng):
        x = ad.Tensor(rng.uniform(0.2, 0.8, (16, 16, 3)), dtype=np.float64)
        w = ad.Tensor(rng.normal(size=(8, 8, 3)), dtype=np.float64)
        err = ad.finite_diff_check(lambda p: ad.sum(ch.distribution_channel(ch.sharpen(p)) * w), x, max_coords=60)
        assert err <= 1e-4
