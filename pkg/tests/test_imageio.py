import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fgrnet.exceptions import ContractError, DimensionError
from fgrnet.imageio import read_ppm, read_saliency, render_overlay, write_ppm, write_saliency
from fgrnet.interpret import SaliencyMap, occlusion
from fgrnet.synthdata import generate_fundus, quantize
from fgrnet import tensor as T
from fgrnet.tensor import Tensor


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10_000), size=st.sampled_from([32, 48, 64]))
def test_generated_images_round_trip_losslessly(tmp_path_factory, seed, size):
    image = quantize(generate_fundus(seed, size))
    path = tmp_path_factory.mktemp("ppm") / "x.ppm"
    write_ppm(path, image)
    back = read_ppm(path)
    assert back.dtype == np.float32
    assert back.tobytes() == image.tobytes()


def test_ppm_header_and_comments(tmp_path):
    path = tmp_path / "c.ppm"
    path.write_bytes(b"P6\n# made by hand\n2 1\n255\n" + bytes([255, 0, 0, 0, 0, 255]))
    image = read_ppm(path)
    assert image.shape == (3, 1, 2)
    np.testing.assert_array_equal(image[:, 0, 0], [1, 0, 0])
    np.testing.assert_array_equal(image[:, 0, 1], [0, 0, 1])


def test_ppm_errors(tmp_path):
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(ContractError):
        read_ppm(bad)
    short = tmp_path / "short.ppm"
    short.write_bytes(b"P6\n4 4\n255\n\x00\x00")
    with pytest.raises(ContractError):
        read_ppm(short)
    with pytest.raises(ContractError):
        read_ppm(tmp_path / "missing.ppm")
    with pytest.raises(DimensionError):
        write_ppm(tmp_path / "x.ppm", np.zeros((1, 4, 4)))


def test_saliency_raw_round_trip(tmp_path, rng):
    smap = SaliencyMap(rng.standard_normal((5, 7)), "GradCAM", 1, True)
    path = tmp_path / "m.sal"
    write_saliency(path, smap)
    raw = path.read_bytes()
    assert raw.startswith(b"FGRSAL1\nGradCAM 5 7 1 1\n")
    back = read_saliency(path)
    assert back.values.tobytes() == smap.values.tobytes()
    assert (back.method, back.class_index, back.signed) == ("GradCAM", 1, True)


def test_zero_map_renders_grayscale(rng):
    image = rng.uniform(size=(3, 6, 6))
    out = render_overlay(image, np.zeros((6, 6)))
    gray = image.mean(axis=0)
    for ch in out:
        np.testing.assert_allclose(ch, gray)


def test_single_positive_pixel_tints_only_that_pixel_green(rng):
    image = rng.uniform(size=(3, 6, 6))
    smap = np.zeros((6, 6))
    smap[2, 3] = 0.4
    out = render_overlay(image, smap, "signed")
    gray = image.mean(axis=0)
    changed = np.any(np.abs(out - gray[None]) > 1e-12, axis=0)
    assert changed.sum() == 1 and changed[2, 3]
    r, g, b = out[:, 2, 3]
    assert g > r and g > b


def test_magnitude_ramp_ignores_sign(rng):
    image = rng.uniform(size=(3, 4, 4))
    smap = rng.standard_normal((4, 4))
    np.testing.assert_array_equal(render_overlay(image, smap, "magnitude"), render_overlay(image, -smap, "magnitude"))


def test_linear_occlusion_overlay_colours(rng):
    S = 8
    w = rng.standard_normal((2, 3, S, S))
    W = Tensor(w.reshape(2, -1).T)
    model = lambda x: T.linear(T.reshape(x, (x.shape[0], -1)), W)
    image = np.full((3, S, S), 0.2)
    smap = occlusion(model, image, 0, patch=1, stride=1, baseline=0.5)
    out = render_overlay(image, smap, "signed")
    push = w[0].sum(axis=0) * (0.5 - 0.2)
    green = out[1] > out[0]
    red = out[0] > out[1]
    np.testing.assert_array_equal(green, push > 0)
    np.testing.assert_array_equal(red, push < 0)


def test_overlay_errors(rng):
    with pytest.raises(DimensionError):
        render_overlay(rng.uniform(size=(3, 4, 4)), np.zeros((5, 5)))
    with pytest.raises(ContractError):
        render_overlay(rng.uniform(size=(3, 4, 4)), np.ones((4, 4)), polarity="rainbow")
