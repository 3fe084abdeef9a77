import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddslab.synthdata import (ATTRIBUTES, BACKGROUNDS, COLORS, NULL, SHAPES, VOCAB, Caption, SceneError, SceneSpec,
                              background_image, coverage, gen_image, load_dataset, load_png, mask_of, permute_captions,
                              place, sample_dataset, save_dataset, save_png)

CANVAS = (16, 16, 3)


def test_red_circle_is_red_inside_mask():
    spec = place(3, CANVAS, shape="circle", shape_color="red", background="white")
    img, m = gen_image(spec, CANVAS), mask_of(spec, CANVAS).mask
    r, g, b = (img[..., c][m].mean() for c in range(3))
    assert r > g and r > b


def test_render_is_bitwise_deterministic():
    spec = place(11, CANVAS, shape="triangle", shape_color="yellow", background="gray")
    assert gen_image(spec, CANVAS).tobytes() == gen_image(spec, CANVAS).tobytes()


@pytest.mark.parametrize("radius", [0.0, -1.0])
def test_degenerate_radius_rejected(radius):
    with pytest.raises(SceneError):
        gen_image(SceneSpec("circle", "red", "white", (8.0, 8.0), radius), CANVAS)


def test_out_of_bounds_rejected():
    with pytest.raises(SceneError):
        gen_image(SceneSpec("square", "red", "white", (2.0, 8.0), 5.0), CANVAS)


def test_unknown_attribute_rejected():
    with pytest.raises(SceneError):
        Caption(shape="hexagon")


def test_pixels_in_range_for_every_attribute_combo():
    for s in SHAPES:
        for c in COLORS:
            for b in BACKGROUNDS:
                img = gen_image(place(5, CANVAS, shape=s, shape_color=c, background=b), CANVAS)
                assert img.dtype == np.float32 and img.min() >= -1 and img.max() <= 1


def test_sample_dataset_deterministic():
    a, b = sample_dataset(7, 100, CANVAS), sample_dataset(7, 100, CANVAS)
    assert a.images.tobytes() == b.images.tobytes() and a.specs == b.specs


def test_sample_dataset_single_item():
    ds = sample_dataset(7, 1, CANVAS)
    assert len(ds) == 1 and ds.images.shape == (1, *CANVAS)


def test_sample_dataset_rejects_empty():
    with pytest.raises(ValueError):
        sample_dataset(7, 0, CANVAS)


def test_items_depend_only_on_seed_and_index():
    big, small = sample_dataset(5, 40, CANVAS), sample_dataset(5, 10, CANVAS)
    assert big.specs[:10] == small.specs


def test_attribute_marginals_uniform():
    n = 5000
    ds = sample_dataset(123, n, CANVAS)
    for attr in ATTRIBUTES:
        k = len(VOCAB[attr])
        p = 1.0 / k
        counts = np.array([sum(getattr(s, attr) == v for s in ds.specs) for v in VOCAB[attr]])
        sigma = np.sqrt(n * p * (1 - p))
        assert np.all(np.abs(counts - n * p) <= 3 * sigma), (attr, counts)


def test_permute_two_items_swaps():
    ds = sample_dataset(1, 2, CANVAS)
    pairs = permute_captions(ds, 0)
    assert pairs[0][1] == ds.specs[1] and pairs[1][1] == ds.specs[0]


def test_permute_is_derangement_and_reproducible():
    ds = sample_dataset(2, 100, CANVAS)
    p1, p2 = permute_captions(ds, 9), permute_captions(ds, 9)
    idx = {id(s): i for i, s in enumerate(ds.specs)}
    assert [idx[id(s)] for _, s in p1] == [idx[id(s)] for _, s in p2]
    assert all(idx[id(s)] != i for i, (_, s) in enumerate(p1))


def test_permute_single_item_rejected():
    with pytest.raises(ValueError):
        permute_captions(sample_dataset(1, 1, CANVAS), 0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**40), radius_frac=st.floats(0.2, 0.45))
def test_circle_mask_area_close_to_disc(seed, radius_frac):
    # the mask includes the anti-aliased rim, whose share of the area shrinks like 1/r;
    # on a 128 x 128 canvas (r >= 25 px) it stays under 5 %
    n = 128
    canvas = (n, n, 3)
    rng = np.random.default_rng(seed)
    r = radius_frac * n
    spec = SceneSpec("circle", "red", "white", (float(rng.uniform(r, n - r)), float(rng.uniform(r, n - r))), r)
    area = mask_of(spec, canvas).area
    assert abs(area - np.pi * r * r) <= 0.05 * np.pi * r * r


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**40))
def test_mask_covers_shape_colored_pixels(seed):
    ds = sample_dataset(seed, 1, CANVAS)
    spec, img = ds.specs[0], ds.images[0]
    from ddslab.synthdata import RGB

    shape_px = np.all(np.abs(img - np.asarray(RGB[spec.shape_color])) < 0.5, axis=-1)
    m = mask_of(spec, CANVAS).mask
    assert (shape_px & m).sum() >= 0.99 * shape_px.sum()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**40))
def test_background_outside_shape(seed):
    spec = sample_dataset(seed, 1, CANVAS).specs[0]
    img, bg = gen_image(spec, CANVAS), background_image(spec.background, CANVAS)
    off = ~mask_of(spec, CANVAS).mask
    assert np.array_equal(img[off], bg[off])


def test_mask_area_strictly_inside_canvas():
    for s in sample_dataset(4, 50, CANVAS).specs:
        a = mask_of(s, CANVAS).area
        assert 0 < a < CANVAS[0] * CANVAS[1]


def test_caption_indices_null():
    assert NULL.is_null
    assert NULL.indices() == tuple(len(VOCAB[a]) for a in ATTRIBUTES)
    assert Caption("circle", "red", "white").override(shape_color="blue") == Caption("circle", "blue", "white")


def test_dataset_roundtrip(tmp_path):
    ds = sample_dataset(3, 20, CANVAS)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.specs == ds.specs and back.canvas == ds.canvas and back.generator_seed == ds.generator_seed
    assert np.abs(back.images - ds.images).max() <= 1 / 255 + 1e-6
    m1 = (tmp_path / "d" / "manifest.json").read_text()
    save_dataset(back, tmp_path / "e")
    assert (tmp_path / "e" / "manifest.json").read_text() == m1
    assert json.loads(m1)["count"] == 20


def test_png_mapping(tmp_path):
    img = np.array([[[-1.0, 0.0, 1.0]]], np.float32)
    save_png(img, tmp_path / "x.png")
    from PIL import Image

    assert np.asarray(Image.open(tmp_path / "x.png")).tolist() == [[[0, 128, 255]]]
    assert np.abs(load_png(tmp_path / "x.png") - img).max() <= 1 / 255 + 1e-6
