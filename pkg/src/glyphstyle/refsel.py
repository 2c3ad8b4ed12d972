"""Fixed reference-set selection and k-shot content-to-reference mapping."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .decomp import DecompositionTable, UnknownGlyphError, component_ids, search_components


@dataclass(frozen=True)
class ReferenceSet:
    glyphs: tuple[str, ...]
    covered: frozenset[str]
    n_ref: int
    min_new: int

    def __len__(self) -> int:
        return len(self.glyphs)


def select_reference_set(
    table: DecompositionTable,
    n_ref: int = 100,
    min_new: int = 2,
    glyphs: Optional[Sequence[str]] = None,
) -> ReferenceSet:
    """Scan glyphs in frequency order, keeping each one that brings at least
    ``min_new`` components not yet covered, until ``n_ref`` are kept."""
    if n_ref < 1 or min_new < 1:
        raise ValueError("n_ref and min_new must be >= 1")
    scan = table.glyphs if glyphs is None else list(glyphs)
    chosen: list[str] = []
    covered: set[str] = set()
    for g in scan:
        if len(chosen) >= n_ref:
            break
        comps = component_ids(search_components(table, g))
        if len(comps - covered) >= min_new:
            chosen.append(g)
            covered |= comps
    return ReferenceSet(tuple(chosen), frozenset(covered), n_ref, min_new)


def _score(content: frozenset, content_ids: frozenset, ref: frozenset) -> tuple[int, int]:
    shared = len(content_ids & component_ids(ref))
    same_structure = len(content & ref)
    return shared, same_structure


def map_references(table: DecompositionTable, ref_set: ReferenceSet | Sequence[str], content: str, k: int = 3) -> list[str]:
    """Greedy k-shot references for one content glyph.

    Each round takes the remaining reference sharing the most conspicuous
    components; ties go to the one with more shared components in the same
    structural position, then to reference-set order. When the pool runs
    dry the first pick is repeated.
    """
    pool = list(ref_set.glyphs if isinstance(ref_set, ReferenceSet) else ref_set)
    if not pool:
        raise ValueError("reference set is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    if content not in table:
        raise UnknownGlyphError(content)
    target = search_components(table, content)
    target_ids = component_ids(target)
    ref_comps = {r: search_components(table, r) for r in pool}
    picks: list[str] = []
    while len(picks) < k and pool:
        best = max(range(len(pool)), key=lambda i: (*_score(target, target_ids, ref_comps[pool[i]]), -i))
        picks.append(pool.pop(best))
    while len(picks) < k:
        picks.append(picks[0])
    return picks


def build_full_mapping(
    table: DecompositionTable, ref_set: ReferenceSet | Sequence[str], contents: Iterable[str], k: int = 3
) -> dict[str, list[str]]:
    return {c: map_references(table, ref_set, c, k) for c in contents}


def random_references(
    table: DecompositionTable,
    pool: Sequence[str],
    content: str,
    k: int,
    rng: np.random.Generator,
) -> list[str]:
    """Baseline: k draws from glyphs sharing at least one component with ``content``.

    Falls back to the whole pool when nothing shares a component; draws
    without replacement while possible.
    """
    target = component_ids(search_components(table, content))
    cands = [g for g in pool if g != content and target & component_ids(search_components(table, g))]
    if not cands:
        cands = [g for g in pool if g != content] or list(pool)
    replace = len(cands) < k
    idx = rng.choice(len(cands), size=k, replace=replace)
    return [cands[i] for i in idx]


def format_mapping(mapping: dict[str, Sequence[str]]) -> str:
    return "".join(f"{c}\t{','.join(refs)}\n" for c, refs in mapping.items())


def parse_mapping(text: str) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            content, refs = line.split("\t")
        except ValueError:
            raise ValueError(f"line {lineno}: expected content<TAB>ref,ref,...") from None
        out[content] = [r for r in refs.split(",") if r]
    return out
