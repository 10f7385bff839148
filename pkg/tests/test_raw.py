import numpy as np
import pytest

from nipfan import raw
from nipfan.autodiff import InputError, ShapeError


def loop_preprocess(frame):
    """Per-site scalar oracle for preprocessing."""
    h, w, _ = frame.mosaic.shape
    colors = raw.cfa_color_map(h, w, frame.cfa_order)
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            v = (float(frame.mosaic[i, j, 0]) - frame.black_level) / (frame.saturation - frame.black_level)
            v = min(max(v, 0.0), 1.0) * frame.wb_gains[colors[i, j]]
            out[i, j] = min(max(v, 0.0), 1.0)
    stack = np.zeros((h // 2, w // 2, 4))
    for i in range(h // 2):
        for j in range(w // 2):
            stack[i, j] = [out[2 * i, 2 * j], out[2 * i, 2 * j + 1], out[2 * i + 1, 2 * j], out[2 * i + 1, 2 * j + 1]]
    return stack


def loop_develop(stack, cfa_order="RGGB"):
    """Scalar oracle: average of same-color neighbors, color matrix, clip, gamma."""
    h, w = stack.shape[0] * 2, stack.shape[1] * 2
    mosaic = raw.unpack(stack.astype(np.float64))
    colors = raw.cfa_color_map(h, w, cfa_order)
    out = np.zeros((h, w, 3))
    for i in range(h):
        for j in range(w):
            for c in range(3):
                if colors[i, j] == c:
                    out[i, j, c] = mosaic[i, j]
                    continue
                vals, weights = 0.0, 0.0
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        # Replicate whole 2x2 cells at the border, as the packed stack is edge-padded.
                        ii, jj = i + di, j + dj
                        if ii < 0:
                            ii += 2
                        if ii >= h:
                            ii -= 2
                        if jj < 0:
                            jj += 2
                        if jj >= w:
                            jj -= 2
                        if colors[ii, jj] == c and (di, dj) != (0, 0):
                            wgt = 1.0 if c == 1 or di == 0 or dj == 0 else 1.0
                            vals += wgt * mosaic[ii, jj]
                            weights += wgt
                out[i, j, c] = vals / weights
    out = out @ raw.COLOR_MATRIX.T
    return np.clip(out, 0, 1) ** (1 / 2.2)


class TestPacking:
    def test_pack_unpack_round_trip(self, rng):
        m = rng.random((6, 8))
        np.testing.assert_array_equal(raw.unpack(raw.pack(m)), m)

    def test_pack_channel_order(self):
        m = np.array([[1, 2], [3, 4]], dtype=float)
        np.testing.assert_array_equal(raw.pack(m)[0, 0], [1, 2, 3, 4])

    def test_cfa_layout(self):
        np.testing.assert_array_equal(raw.cfa_color_map(2, 2, "RGGB"), [[0, 1], [1, 2]])
        np.testing.assert_array_equal(raw.cfa_color_map(2, 2, "GBRG"), [[1, 2], [0, 1]])


class TestPreprocess:
    def test_black_level_gives_zero(self):
        f = raw.RawFrame(np.full((4, 4, 1), raw.DEFAULT_BLACK, dtype=np.float32))
        assert raw.preprocess_raw(f).data.max() == pytest.approx(0.0, abs=1e-6)

    def test_saturation_unit_wb_gives_one(self):
        f = raw.RawFrame(np.ones((4, 4, 1), dtype=np.float32), wb_gains=(1.0, 1.0, 1.0))
        np.testing.assert_allclose(raw.preprocess_raw(f).data, 1.0)

    def test_matches_loop_oracle(self, rng):
        f = raw.RawFrame(rng.random((8, 10, 1)).astype(np.float32), black_level=0.05, saturation=0.9,
                         wb_gains=(1.7, 1.0, 1.3), cfa_order="GBRG")
        np.testing.assert_allclose(raw.preprocess_raw(f).data, loop_preprocess(f), atol=1e-6)

    @pytest.mark.parametrize("kwargs, err", [
        ({"mosaic": np.zeros((5, 4, 1))}, ShapeError),
        ({"mosaic": np.zeros((4, 4))}, ShapeError),
        ({"mosaic": np.zeros((4, 4, 1)), "saturation": 0.01}, InputError),
        ({"mosaic": np.zeros((4, 4, 1)), "wb_gains": (1.0, 0.0, 1.0)}, InputError),
        ({"mosaic": np.zeros((4, 4, 1)), "cfa_order": "XYZW"}, InputError),
    ])
    def test_invalid_frames(self, kwargs, err):
        with pytest.raises(err):
            raw.RawFrame(**kwargs).validate()


class TestReferenceDevelop:
    def test_flat_gray(self):
        out = raw.reference_develop(np.full((4, 4, 4), 0.25))
        np.testing.assert_allclose(out, 0.25 ** (1 / 2.2), atol=1e-12)

    def test_ramp_interior(self):
        # Linear ramp in the mosaic is reproduced exactly by bilinear interpolation.
        h, w = 12, 16
        ramp = np.tile(np.linspace(0.1, 0.5, w), (h, 1))
        lin = raw.bilinear_demosaic(raw.pack(ramp))
        for c in range(3):
            np.testing.assert_allclose(lin[2:-2, 2:-2, c], ramp[2:-2, 2:-2], atol=1e-12)

    def test_matches_loop_oracle(self, rng):
        stack = rng.random((4, 5, 4))
        np.testing.assert_allclose(raw.reference_develop(stack), loop_develop(stack), atol=1e-5)

    def test_bilinear_kernel_partition_of_unity(self):
        k = raw.bilinear_kernel5()
        # Each plane's kernel sums to 4 / (sites per 2x2 cell) on its color plane.
        assert k[..., 1, 1].sum() == pytest.approx(2.0)
        assert k[..., 0, 0].sum() == pytest.approx(4.0)


class TestSynthesis:
    def test_round_trip_recovers_source(self):
        # Smooth content keeps bilinear demosaicing error small.
        yy, xx = np.mgrid[0:48, 0:48]
        src = np.stack([0.5 + 0.3 * np.sin(xx / 9 + c) * np.cos(yy / 11 - c) for c in range(3)], axis=-1)
        s = raw.make_sample(raw.raw_from_rgb(src))
        assert np.abs(s.target[2:-2, 2:-2] - src[2:-2, 2:-2]).max() <= 2 / 255

    def test_target_is_reference_output(self, tiny_dataset):
        for s in tiny_dataset:
            np.testing.assert_allclose(s.target, raw.reference_develop(raw.preprocess_raw(s.frame)), atol=2 / 255)

    def test_deterministic(self, rng):
        src = [rng.integers(0, 256, size=(64, 80, 3), dtype=np.uint8)]
        a = raw.synth_dataset(src, 7, 3, 32, raw.SensorConfig(noise=0.01))
        b = raw.synth_dataset(src, 7, 3, 32, raw.SensorConfig(noise=0.01))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.frame.mosaic, y.frame.mosaic)
            assert x.name == y.name

    def test_gray_card_mosaic(self):
        f = raw.raw_from_rgb(np.full((4, 4, 3), 0.5))
        counts = f.mosaic[..., 0]
        norm = (counts - f.black_level) / (f.saturation - f.black_level)
        colors = raw.cfa_color_map(4, 4)
        balanced = norm * np.asarray(f.wb_gains)[colors]
        np.testing.assert_allclose(balanced, balanced[0, 0], atol=1e-6)

    def test_patch_validation(self, rng):
        with pytest.raises(InputError):
            raw.synth_dataset([np.zeros((64, 64, 3))], 0, 1, 31)
        with pytest.raises(InputError):
            raw.synth_dataset([np.zeros((16, 16, 3))], 0, 1, 32)
