"""Glyph decomposition tables, component trees and conspicuous components.

Table format, one glyph per line (UTF-8)::

    # comment
    glyph<TAB>op<TAB>child,child[,child]
    atom<TAB>atom

Line order is usage-frequency order. ``op`` is one of ``LR``, ``TB``,
``ENC``, ``OTHER``, ``ATOM`` (case-insensitive) or an ideographic
description character, which is folded onto that vocabulary.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional

LR, TB, ENC, ATOM, OTHER = "LR", "TB", "ENC", "ATOM", "OTHER"
STRUCTURE_OPS = (LR, TB, ENC, ATOM, OTHER)

_IDC = {
    "⿰": LR,
    "⿲": LR,
    "⿱": TB,
    "⿳": TB,
    "⿴": ENC,
    "⿵": ENC,
    "⿶": ENC,
    "⿷": ENC,
    "⿸": ENC,
    "⿹": ENC,
    "⿺": ENC,
    "⿻": OTHER,
}

DEFAULT_MAX_DEPTH = 3


class TableError(ValueError):
    """Malformed or inconsistent decomposition table."""


class UnknownGlyphError(KeyError):
    pass


def normalize_op(token: str) -> str:
    token = token.strip()
    if token in _IDC:
        return _IDC[token]
    up = token.upper()
    if up in STRUCTURE_OPS:
        return up
    raise TableError(f"unknown structure op {token!r}")


@dataclass
class DecompositionTable:
    """Single-level decomposition map plus the conspicuous component universe."""

    order: list[str]
    entries: dict[str, tuple[str, tuple[str, ...]]]
    components: frozenset[str]
    max_depth: int = DEFAULT_MAX_DEPTH
    explicit_components: bool = field(default=False, repr=False)

    def __post_init__(self) -> None:
        if self.max_depth < 1:
            raise TableError("max_depth must be >= 1")

    @property
    def glyphs(self) -> list[str]:
        """Composite glyphs in frequency order (the scan list for selection)."""
        return [g for g in self.order if self.entries[g][0] != ATOM]

    @property
    def atoms(self) -> list[str]:
        seen = [g for g in self.order if self.entries[g][0] == ATOM]
        extra = sorted(c for c in self.components if c not in self.entries)
        return seen + extra

    def component_list(self) -> list[str]:
        """Conspicuous components in a stable order (file order, then sorted)."""
        listed = [g for g in self.order if g in self.components]
        return listed + sorted(c for c in self.components if c not in self.entries)

    def op(self, glyph: str) -> str:
        if glyph in self.entries:
            return self.entries[glyph][0]
        if glyph in self.components:
            return ATOM
        raise UnknownGlyphError(glyph)

    def children(self, glyph: str) -> tuple[str, ...]:
        if glyph in self.entries:
            return self.entries[glyph][1]
        if glyph in self.components:
            return ()
        raise UnknownGlyphError(glyph)

    def __contains__(self, glyph: str) -> bool:
        return glyph in self.entries or glyph in self.components

    def __len__(self) -> int:
        return len(self.entries)

    def leaves(self, glyph: str) -> list[str]:
        """Atomic components of ``glyph`` in drawing order, no depth limit."""
        kids = self.children(glyph)
        if not kids:
            return [glyph]
        out: list[str] = []
        for k in kids:
            out.extend(self.leaves(k))
        return out


def parse_table(
    text: str,
    components: Optional[Iterable[str]] = None,
    max_depth: int = DEFAULT_MAX_DEPTH,
) -> DecompositionTable:
    """Parse and validate a table.

    ``components`` defaults to the glyphs declared ``atom``.
    """
    order: list[str] = []
    entries: dict[str, tuple[str, tuple[str, ...]]] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < 2 or len(parts) > 3 or not parts[0]:
            raise TableError(f"line {lineno}: expected glyph<TAB>op<TAB>children, got {line!r}")
        glyph = parts[0].strip()
        try:
            op = normalize_op(parts[1])
        except TableError as exc:
            raise TableError(f"line {lineno}: {exc}") from None
        kids = tuple(c.strip() for c in parts[2].split(",") if c.strip()) if len(parts) == 3 else ()
        if op == ATOM and kids:
            raise TableError(f"line {lineno}: atom {glyph!r} cannot have children")
        if op != ATOM and not kids:
            raise TableError(f"line {lineno}: composite {glyph!r} has no children")
        if op in (LR, TB) and len(kids) < 2:
            raise TableError(f"line {lineno}: {op} needs at least two children")
        if glyph in entries:
            raise TableError(f"line {lineno}: duplicate glyph {glyph!r} (first on line {lines[glyph]})")
        entries[glyph] = (op, kids)
        lines[glyph] = lineno
        order.append(glyph)

    explicit = components is not None
    comp = frozenset(components) if explicit else frozenset(g for g in order if entries[g][0] == ATOM)
    for g in order:
        for kid in entries[g][1]:
            if kid not in entries and kid not in comp:
                raise TableError(f"line {lines[g]}: unknown child {kid!r} of {g!r}")
    table = DecompositionTable(order, entries, comp, max_depth, explicit)
    _check_acyclic(table, lines)
    return table


def _check_acyclic(table: DecompositionTable, lines: dict[str, int]) -> None:
    state: dict[str, int] = {}  # 1 = on stack, 2 = done
    for start in table.order:
        if state.get(start) == 2:
            continue
        stack = [(start, iter(table.children(start)))]
        state[start] = 1
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[node] = 2
                stack.pop()
                continue
            s = state.get(nxt)
            if s == 1:
                raise TableError(f"line {lines.get(nxt, '?')}: cycle through {nxt!r}")
            if s is None:
                state[nxt] = 1
                stack.append((nxt, iter(table.children(nxt))))


def serialize_table(table: DecompositionTable) -> str:
    out = []
    for g in table.order:
        op, kids = table.entries[g]
        out.append(f"{g}\t{op.lower()}" if op == ATOM else f"{g}\t{op}\t{','.join(kids)}")
    return "\n".join(out) + "\n"


def load_table(path, components_path=None, max_depth: int = DEFAULT_MAX_DEPTH) -> DecompositionTable:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    comps = None
    if components_path is not None:
        with open(components_path, encoding="utf-8") as fh:
            comps = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    return parse_table(text, comps, max_depth)


@dataclass
class ComponentTree:
    name: str
    op: str
    level: int
    context: str
    children: list["ComponentTree"] = field(default_factory=list)

    def depth(self) -> int:
        return self.level if not self.children else max(c.depth() for c in self.children)

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


def build_component_tree(table: DecompositionTable, glyph: str, max_depth: Optional[int] = None) -> ComponentTree:
    """Expand ``glyph`` recursively, keeping levels ``0 .. max_depth - 1``.

    ``context`` of a node is the structure op of its parent (the root
    carries its own op).
    """
    d = table.max_depth if max_depth is None else max_depth
    if glyph not in table:
        raise UnknownGlyphError(glyph)
    root = ComponentTree(glyph, table.op(glyph), 0, table.op(glyph))
    frontier = [root]
    while frontier:
        nxt = []
        for node in frontier:
            if node.level + 1 >= d:
                continue
            for kid in table.children(node.name):
                child = ComponentTree(kid, table.op(kid), node.level + 1, node.op)
                node.children.append(child)
                nxt.append(child)
        frontier = nxt
    return root


def search_components(table: DecompositionTable, glyph: str) -> frozenset[tuple[str, str]]:
    """Conspicuous components of ``glyph`` as ``(component, context)`` pairs.

    Breadth-first over levels ``0 .. max_depth - 1``; members of the
    component universe are collected at every level.
    """
    if glyph not in table:
        raise UnknownGlyphError(glyph)
    found: set[tuple[str, str]] = set()
    queue = deque([(glyph, table.op(glyph))])
    for _level in range(table.max_depth):
        nxt: deque[tuple[str, str]] = deque()
        for name, ctx in queue:
            if name in table.components:
                found.add((name, ctx))
            op = table.op(name)
            nxt.extend((kid, op) for kid in table.children(name))
        queue = nxt
    return frozenset(found)


def component_ids(pairs: Iterable[tuple[str, str]]) -> frozenset[str]:
    return frozenset(name for name, _ in pairs)
