import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glyphstyle.decomp import UnknownGlyphError, load_table, parse_table
from glyphstyle.glyphsynth import (
    NEUTRAL_STYLE,
    StyleParams,
    component_labels,
    default_styles,
    downsample_mask,
    glyph_filename,
    load_png,
    make_dataset,
    render_glyph,
    sample_table_path,
    save_png,
    split_items,
    write_dataset,
)
from glyphstyle.refsel import build_full_mapping, select_reference_set


@pytest.fixture(scope="module")
def table():
    return load_table(sample_table_path())


@pytest.fixture(scope="module")
def small_ds(table):
    rs = select_reference_set(table)
    contents = table.glyphs[:6]
    return make_dataset(table, default_styles(3), contents, build_full_mapping(table, rs, contents), size=32, seed=1)


def test_render_deterministic(table):
    style = default_styles(2)[1]
    a = render_glyph(table, "明", style, 32)
    b = render_glyph(table, "明", style, 32)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    np.testing.assert_array_equal(a.mask, b.mask)


@pytest.mark.parametrize("size", [32, 64, 128])
def test_render_sizes_and_range(table, size):
    img = render_glyph(table, "森", default_styles(1)[0], size)
    assert img.pixels.shape == img.mask.shape == (size, size)
    assert img.pixels.min() >= 0 and img.pixels.max() <= 1
    assert img.pixels.dtype == np.float32


def test_left_right_mask_halves(table):
    img = render_glyph(table, "明", NEUTRAL_STYLE, 32)
    labels = component_labels(table)
    left = img.mask == labels["日"]
    right = img.mask == labels["月"]
    assert left.any() and right.any()
    assert not left[:, 16:].any()
    assert not right[:, :16].any()


def test_top_bottom_mask_halves(table):
    img = render_glyph(table, "杏", NEUTRAL_STYLE, 32)
    labels = component_labels(table)
    assert not (img.mask == labels["木"])[16:].any()
    assert not (img.mask == labels["口"])[:16].any()


def test_ink_monotone_in_stroke_width(table):
    ink = [render_glyph(table, "森", StyleParams(stroke_width=w), 32).pixels.sum() for w in (1, 1.5, 2, 3, 4, 5)]
    assert all(b > a for a, b in zip(ink, ink[1:]))


def test_mask_partitions_ink(table):
    for g in ("明", "品", "困", "想"):
        img = render_glyph(table, g, default_styles(4)[3], 32)
        np.testing.assert_array_equal(img.mask > 0, img.pixels > 0)
        assert set(np.unique(img.mask)) - {0} <= set(img.labels)


def test_mask_labels_come_from_the_tree(table):
    img = render_glyph(table, "明", NEUTRAL_STYLE, 32)
    assert {img.labels[v] for v in np.unique(img.mask) if v} == {"日", "月"}


def test_ink_level_scales_pixels(table):
    full = render_glyph(table, "回", StyleParams(ink_level=1.0), 32).pixels
    half = render_glyph(table, "回", StyleParams(ink_level=0.5), 32).pixels
    np.testing.assert_allclose(half, 0.5 * full, atol=1e-7)


@pytest.mark.parametrize(
    "kwargs", [dict(stroke_width=0.5), dict(slant=0.8), dict(ink_level=0.0), dict(ink_level=1.5), dict(corner_radius=-1)]
)
def test_style_validation(kwargs):
    with pytest.raises(ValueError):
        StyleParams(**kwargs)


def test_render_errors(table):
    with pytest.raises(UnknownGlyphError):
        render_glyph(table, "?", NEUTRAL_STYLE)
    with pytest.raises(ValueError):
        render_glyph(table, "明", NEUTRAL_STYLE, 48)


def test_downsample_mask_majority():
    m = np.zeros((4, 4), np.uint8)
    m[:2, :2] = [[1, 1], [2, 0]]
    m[2:, 2:] = [[3, 3], [3, 3]]
    np.testing.assert_array_equal(downsample_mask(m, 2), [[1, 0], [0, 3]])
    with pytest.raises(ValueError):
        downsample_mask(np.zeros((5, 4), np.uint8), 2)


# ---------------------------------------------------------------------------
# datasets


def test_dataset_size_is_product(small_ds):
    assert len(small_ds) == 3 * 6
    assert sorted(small_ds.pairs) == sorted((s, c) for s in range(3) for c in small_ds.contents)


def test_content_identical_across_styles(small_ds):
    c = small_ds.contents[0]
    x = small_ds.content_array([c] * 3)
    assert x.shape == (3, 1, 32, 32)
    np.testing.assert_array_equal(x[0], x[2])


def test_references_are_three_shot(small_ds):
    for s in range(3):
        for c in small_ds.contents:
            refs = small_ds.references(s, c)
            assert len(refs) == 3 and all(r.style_id == small_ds.style_ids[s] for r in refs)


def test_dataset_deterministic(table, small_ds):
    again = make_dataset(table, default_styles(3), small_ds.contents, small_ds.mapping, size=32, seed=1)
    assert again.pairs == small_ds.pairs
    for key, img in small_ds.styled.items():
        np.testing.assert_array_equal(again.styled[key].pixels, img.pixels)


def test_dataset_missing_mapping(table):
    with pytest.raises(KeyError):
        make_dataset(table, default_styles(1), ["明"], {})


def test_styles_differ(table):
    a, b = default_styles(2)
    assert not np.array_equal(render_glyph(table, "明", a).pixels, render_glyph(table, "明", b).pixels)


@given(st.integers(8, 40), st.integers(0, 5), st.integers(0, 1000))
def test_split_items_partition(n, n_unseen, seed):
    items = list(range(n))
    keep = items[:3]
    seen, unseen = split_items(items, n_unseen, seed, keep_seen=keep)
    assert sorted(seen + unseen) == items and len(unseen) == n_unseen
    assert not set(keep) & set(unseen)
    assert split_items(items, n_unseen, seed, keep_seen=keep) == (seen, unseen)


def test_split_items_too_many():
    with pytest.raises(ValueError):
        split_items([1, 2], 2, 0, keep_seen=[1])


def test_png_round_trip(tmp_path, rng):
    arr = np.round(rng.random((8, 8)) * 255) / 255
    save_png(tmp_path / "a.png", arr)
    np.testing.assert_allclose(load_png(tmp_path / "a.png"), arr, atol=1e-6)


def test_write_dataset_layout(tmp_path, small_ds):
    out = write_dataset(small_ds, tmp_path / "ds", {small_ds.contents[0]: "unseen"})
    meta = (out / "meta.tsv").read_text(encoding="utf-8").splitlines()
    assert meta[0].split("\t")[:3] == ["style_id", "content_id", "file"]
    c = small_ds.contents[0]
    assert (out / "images" / "s0" / f"{glyph_filename(c)}.png").exists()
    assert (out / "masks" / "content" / f"{glyph_filename(c)}.png").exists()
    assert any(r.startswith(f"s0\t{c}\t") and "\tunseen\t" in r for r in meta)


def test_glyph_filename_ascii_safe():
    assert glyph_filename("g1") == "g1"
    assert glyph_filename("明") == "u660e"
