"""Random decomposition tables and brute-force oracles shared by the
decomposition, reference-selection and acceptance tests.

The oracles deliberately avoid the library's traversal code: component sets
come from a full recursive expansion filtered by level afterwards, and the
selection/mapping checks re-derive every decision from scratch.
"""
from __future__ import annotations

import numpy as np

from glyphstyle.decomp import parse_table

OPS = ("LR", "TB", "ENC", "OTHER")


def random_table_text(rng: np.random.Generator, max_glyphs: int = 50) -> tuple[str, list[str]]:
    """Acyclic table text with atoms a0.., composites g0..; returns (text, universe)."""
    n_atoms = int(rng.integers(3, 10))
    n_comp = int(rng.integers(1, max_glyphs - n_atoms + 1))
    atoms = [f"a{i}" for i in range(n_atoms)]
    comps: dict[str, tuple[str, list[str]]] = {}
    names = list(atoms)
    for i in range(n_comp):
        op = OPS[int(rng.integers(len(OPS)))]
        n_kids = int(rng.integers(2, 4)) if op in ("LR", "TB") else int(rng.integers(1, 4))
        kids = [names[int(j)] for j in rng.integers(0, len(names), size=n_kids)]
        comps[f"g{i}"] = (op, kids)
        names.append(f"g{i}")
    order = list(comps) + atoms
    perm = rng.permutation(len(order))  # frequency order unrelated to build order
    lines = []
    for j in perm:
        g = order[j]
        lines.append(f"{g}\tatom" if g in atoms else f"{g}\t{comps[g][0]}\t{','.join(comps[g][1])}")
    universe = list(atoms) + [g for g in comps if rng.random() < 0.15]
    return "\n".join(lines) + "\n", universe


def random_table(seed: int, max_glyphs: int = 50):
    rng = np.random.default_rng(seed)
    text, universe = random_table_text(rng, max_glyphs)
    return parse_table(text, universe)


# ---------------------------------------------------------------------------
# oracles


def full_expansion(table, glyph, level=0, context=None):
    """Every node of the untruncated tree as (name, level, context)."""
    op = table.entries[glyph][0] if glyph in table.entries else "ATOM"
    kids = table.entries[glyph][1] if glyph in table.entries else ()
    out = [(glyph, level, op if context is None else context)]
    for k in kids:
        out.extend(full_expansion(table, k, level + 1, op))
    return out


def oracle_components(table, glyph, depth=None):
    d = table.max_depth if depth is None else depth
    return frozenset((n, c) for n, lvl, c in full_expansion(table, glyph) if lvl < d and n in table.components)


def oracle_ids(table, glyph):
    return frozenset(n for n, _ in oracle_components(table, glyph))


def oracle_reference_set(table, n_ref, min_new):
    """Scan composite glyphs (atoms are components, not characters) in file order."""
    chosen, covered = [], set()
    for g in [g for g in table.order if table.entries[g][0] != "ATOM"]:
        if len(chosen) == n_ref:
            break
        ids = oracle_ids(table, g)
        if len(ids - covered) >= min_new:
            chosen.append(g)
            covered |= ids
    return chosen, covered


def check_mapping_round_by_round(table, refs, content, k, picks):
    """Exhaustively verify each greedy round, the tie-break and the padding."""
    target = oracle_components(table, content)
    target_ids = frozenset(n for n, _ in target)
    pool = list(refs)
    n_real = min(k, len(pool))
    assert len(picks) == k
    for r in range(n_real):
        scores = {}
        for i, g in enumerate(pool):
            comps = oracle_components(table, g)
            shared = len(target_ids & {n for n, _ in comps})
            same = len(target & comps)
            scores[g] = (shared, same, -i)
        best = max(scores.values())
        pick = picks[r]
        assert pick in scores, f"round {r}: {pick} not in remaining pool"
        assert scores[pick][0] == max(s[0] for s in scores.values()), f"round {r}: not max shared"
        assert scores[pick] == best, f"round {r}: tie-break violated"
        pool.remove(pick)
    assert picks[n_real:] == [picks[0]] * (k - n_real)
