from pathlib import Path

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glyphstyle.decomp import UnknownGlyphError, load_table, parse_table, search_components
from glyphstyle.glyphsynth import sample_table_path
from glyphstyle.refsel import (
    build_full_mapping,
    format_mapping,
    map_references,
    parse_mapping,
    random_references,
    select_reference_set,
)

from toy_tables import check_mapping_round_by_round, oracle_ids, oracle_reference_set, random_table

GOLDEN = Path(__file__).parent / "data" / "sample_mapping.tsv"

FIVE = "g1\tLR\ta,b\ng2\tLR\tb,c\ng3\tLR\tc,d\ng4\tLR\ta,b\ng5\tLR\te,f\n" + "".join(f"{x}\tatom\n" for x in "abcdef")

# content {a@LR, b@TB, c@TB}; r1={a@LR,d}, r2={b@TB,c@TB}, r3={c@ENC,e}
TIE = (
    "x\tLR\ta,y\ny\tTB\tb,c\n"
    "r1\tLR\ta,d\nr2\tTB\tb,c\nr3\tENC\tc,e\n"
    + "".join(f"{v}\tatom\n" for v in "abcde")
)


# ---------------------------------------------------------------------------
# reference set


def test_empty_scan():
    rs = select_reference_set(parse_table(FIVE), glyphs=[])
    assert rs.glyphs == () and rs.covered == frozenset()


def test_five_glyph_hand_execution():
    t = parse_table(FIVE)
    rs = select_reference_set(t, n_ref=100, min_new=2, glyphs=["g1", "g2", "g3", "g4", "g5"])
    assert rs.glyphs == ("g1", "g3", "g5")
    assert rs.covered == frozenset("abcdef")


def test_capacity_stops_scan():
    t = parse_table(FIVE)
    rs = select_reference_set(t, n_ref=2, glyphs=["g1", "g2", "g3", "g4", "g5"])
    assert rs.glyphs == ("g1", "g3") and len(rs) == 2


def test_real_scale_defaults():
    import inspect

    sig = inspect.signature(select_reference_set)
    assert sig.parameters["n_ref"].default == 100
    assert sig.parameters["min_new"].default == 2


@pytest.mark.parametrize("n_ref,min_new", [(0, 2), (5, 0)])
def test_reference_set_argument_checks(n_ref, min_new):
    with pytest.raises(ValueError):
        select_reference_set(parse_table(FIVE), n_ref=n_ref, min_new=min_new)


@given(st.integers(0, 100_000), st.integers(1, 8), st.integers(1, 3))
def test_reference_set_matches_resimulation(seed, n_ref, min_new):
    t = random_table(seed)
    rs = select_reference_set(t, n_ref=n_ref, min_new=min_new)
    chosen, covered = oracle_reference_set(t, n_ref, min_new)
    assert list(rs.glyphs) == chosen and rs.covered == covered
    assert len(rs) <= n_ref
    # coverage grows by >= min_new at each addition
    seen = set()
    for g in rs.glyphs:
        new = oracle_ids(t, g) - seen
        assert len(new) >= min_new
        seen |= new


# ---------------------------------------------------------------------------
# mapping


def test_forced_choice():
    t = parse_table(TIE)
    assert map_references(t, ["r2"], "y", k=1) == ["r2"]


def test_structure_tie_break():
    t = parse_table(TIE)
    assert map_references(t, ["r1", "r2", "r3"], "x", k=2) == ["r2", "r1"]


def test_tie_break_does_not_depend_on_pool_order():
    t = parse_table(TIE)
    assert map_references(t, ["r3", "r2", "r1"], "x", k=2) == ["r2", "r1"]


def test_padding_duplicates_first_pick():
    t = parse_table(TIE)
    assert map_references(t, ["r1", "r2"], "x", k=3) == ["r2", "r1", "r2"]


def test_mapping_errors():
    t = parse_table(TIE)
    with pytest.raises(UnknownGlyphError):
        map_references(t, ["r1"], "nope")
    with pytest.raises(ValueError):
        map_references(t, [], "x")


@given(st.integers(0, 100_000), st.integers(1, 5))
def test_mapping_round_by_round(seed, k):
    t = random_table(seed)
    refs = list(select_reference_set(t, n_ref=6, min_new=1).glyphs)
    for c in t.glyphs[:10]:
        check_mapping_round_by_round(t, refs, c, k, map_references(t, refs, c, k))


def test_full_mapping_idempotent_and_length():
    t = load_table(sample_table_path())
    rs = select_reference_set(t)
    a = build_full_mapping(t, rs, t.glyphs)
    b = build_full_mapping(t, rs, t.glyphs)
    assert a == b
    assert all(len(v) == 3 for v in a.values())


def test_sample_table_golden_mapping():
    t = load_table(sample_table_path())
    rs = select_reference_set(t)
    text = GOLDEN.read_text(encoding="utf-8")
    header, body = text.split("\n", 1)
    assert header == "# reference set: " + ",".join(rs.glyphs)
    assert format_mapping(build_full_mapping(t, rs, t.glyphs)) == body


def test_mapping_text_round_trip():
    m = {"x": ["r1", "r2", "r1"], "y": ["r3", "r3", "r3"]}
    assert parse_mapping("# c\n" + format_mapping(m)) == m
    with pytest.raises(ValueError, match="line 1"):
        parse_mapping("no tabs here\n")


# ---------------------------------------------------------------------------
# random baseline


def test_random_references_share_a_component():
    t = load_table(sample_table_path())
    rng = np.random.default_rng(0)
    target = {n for n, _ in search_components(t, "坦")}
    for _ in range(20):
        picks = random_references(t, t.glyphs, "坦", 3, rng)
        assert len(picks) == 3 and "坦" not in picks
        for p in picks:
            assert target & {n for n, _ in search_components(t, p)}


def test_random_references_deterministic_under_seed():
    t = load_table(sample_table_path())
    a = random_references(t, t.glyphs, "明", 3, np.random.default_rng(5))
    b = random_references(t, t.glyphs, "明", 3, np.random.default_rng(5))
    assert a == b
