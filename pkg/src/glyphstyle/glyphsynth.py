"""Procedural compositional glyphs.

Atomic components are small sets of line strokes in a unit box. A composite
glyph lays its children out by structure op (LR splits the box into
columns, TB into rows, ENC puts the inner child in the middle of the outer
one) and rasterizes every stroke as a rounded rectangle on a 2x grid, then
box-filters down. Ink is 1, background 0.

A style changes stroke width, slant, corner rounding and ink level for the
whole glyph, and deforms each component with its own seeded jitter, so a
component looks the same wherever it appears within one style but differs
between styles. That makes the look of a component learnable only from
references that contain it.
"""
from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .decomp import ENC, LR, OTHER, TB, DecompositionTable, UnknownGlyphError

SUPPORTED_SIZES = (32, 64, 128)
REFERENCE_SCALE = 32  # stroke widths and radii are given in pixels at this size

Segment = tuple[float, float, float, float]

# Hand-drawn stroke sets, unit box, x to the right and y down.
STROKES: dict[str, list[Segment]] = {
    "口": [(0.15, 0.2, 0.85, 0.2), (0.15, 0.2, 0.15, 0.8), (0.85, 0.2, 0.85, 0.8), (0.15, 0.8, 0.85, 0.8)],
    "日": [(0.25, 0.1, 0.75, 0.1), (0.25, 0.1, 0.25, 0.9), (0.75, 0.1, 0.75, 0.9), (0.25, 0.5, 0.75, 0.5), (0.25, 0.9, 0.75, 0.9)],
    "月": [(0.3, 0.1, 0.2, 0.9), (0.3, 0.1, 0.75, 0.1), (0.75, 0.1, 0.75, 0.9), (0.3, 0.4, 0.75, 0.4), (0.28, 0.65, 0.75, 0.65)],
    "木": [(0.1, 0.35, 0.9, 0.35), (0.5, 0.1, 0.5, 0.9), (0.5, 0.35, 0.15, 0.8), (0.5, 0.35, 0.85, 0.8)],
    "女": [(0.45, 0.1, 0.25, 0.6), (0.25, 0.6, 0.8, 0.9), (0.1, 0.45, 0.9, 0.45), (0.7, 0.3, 0.3, 0.9)],
    "子": [(0.2, 0.15, 0.75, 0.15), (0.75, 0.15, 0.5, 0.4), (0.5, 0.4, 0.5, 0.9), (0.5, 0.9, 0.38, 0.82), (0.1, 0.55, 0.9, 0.55)],
    "山": [(0.5, 0.1, 0.5, 0.85), (0.15, 0.35, 0.15, 0.85), (0.85, 0.35, 0.85, 0.85), (0.15, 0.85, 0.85, 0.85)],
    "火": [(0.25, 0.3, 0.3, 0.45), (0.75, 0.3, 0.7, 0.45), (0.5, 0.1, 0.5, 0.5), (0.5, 0.5, 0.15, 0.9), (0.5, 0.5, 0.85, 0.9)],
    "水": [(0.5, 0.1, 0.5, 0.9), (0.15, 0.35, 0.4, 0.35), (0.4, 0.35, 0.15, 0.8), (0.85, 0.25, 0.55, 0.5), (0.55, 0.5, 0.9, 0.85)],
    "土": [(0.25, 0.4, 0.75, 0.4), (0.5, 0.15, 0.5, 0.85), (0.1, 0.85, 0.9, 0.85)],
    "人": [(0.5, 0.1, 0.15, 0.9), (0.5, 0.35, 0.85, 0.9)],
    "心": [(0.15, 0.55, 0.25, 0.75), (0.35, 0.4, 0.45, 0.85), (0.45, 0.85, 0.8, 0.75), (0.6, 0.3, 0.65, 0.5), (0.85, 0.5, 0.9, 0.65)],
}

_MARGIN = 0.04


def _stable_seed(*parts) -> int:
    return zlib.crc32("\x1f".join(str(p) for p in parts).encode("utf-8"))


def strokes_for(component: str) -> list[Segment]:
    """Known stroke set, or 3-5 pseudo-random strokes keyed by the name."""
    if component in STROKES:
        return STROKES[component]
    rng = np.random.default_rng(_stable_seed("strokes", component))
    n = int(rng.integers(3, 6))
    pts = rng.uniform(0.12, 0.88, size=(n, 4))
    return [tuple(float(v) for v in p) for p in pts]


@dataclass(frozen=True)
class StyleParams:
    stroke_width: float = 2.0
    slant: float = 0.0
    corner_radius: float = 1.0
    ink_level: float = 1.0
    jitter_seed: Optional[int] = None
    jitter_scale: float = 0.07

    def __post_init__(self) -> None:
        if self.stroke_width < 1:
            raise ValueError("stroke_width must be >= 1")
        if not abs(self.slant) < np.pi / 4:
            raise ValueError("|slant| must be < pi/4")
        if not 0 < self.ink_level <= 1:
            raise ValueError("ink_level must be in (0, 1]")
        if self.corner_radius < 0:
            raise ValueError("corner_radius must be >= 0")


NEUTRAL_STYLE = StyleParams(stroke_width=2.0, slant=0.0, corner_radius=1.0, ink_level=1.0, jitter_seed=None)


def default_styles(n: int = 8, seed: int = 0, jitter_scale: float = 0.07) -> list[StyleParams]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(
            StyleParams(
                stroke_width=float(np.round(rng.uniform(1.3, 3.4), 3)),
                slant=float(np.round(rng.uniform(-0.3, 0.3), 3)),
                corner_radius=float(np.round(rng.uniform(0.0, 1.6), 3)),
                ink_level=float(np.round(rng.uniform(0.8, 1.0), 3)),
                jitter_seed=1000 + i,
                jitter_scale=jitter_scale,
            )
        )
    return out


@dataclass
class GlyphImage:
    pixels: np.ndarray  # (H, W) in [0, 1]
    content_id: str
    style_id: str
    mask: np.ndarray  # (H, W) uint8, 0 = background
    labels: dict[int, str] = field(default_factory=dict)

    @property
    def size(self) -> int:
        return self.pixels.shape[0]


def component_labels(table: DecompositionTable) -> dict[str, int]:
    """Mask label for every atomic component (1-based, table order)."""
    return {c: i + 1 for i, c in enumerate(table.atoms)}


def _layout(table: DecompositionTable, glyph: str, box, out: list) -> None:
    kids = table.children(glyph)
    if not kids:
        out.append((glyph, box))
        return
    x0, y0, x1, y1 = box
    op = table.op(glyph)
    n = len(kids)
    if op == LR:
        w = (x1 - x0) / n
        for i, kid in enumerate(kids):
            _layout(table, kid, (x0 + i * w + _MARGIN * w, y0, x0 + (i + 1) * w - _MARGIN * w, y1), out)
    elif op == TB:
        h = (y1 - y0) / n
        for i, kid in enumerate(kids):
            _layout(table, kid, (x0, y0 + i * h + _MARGIN * h, x1, y0 + (i + 1) * h - _MARGIN * h), out)
    elif op == ENC:
        _layout(table, kids[0], box, out)
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        hw, hh = (x1 - x0) * 0.22, (y1 - y0) * 0.22
        for kid in kids[1:]:
            _layout(table, kid, (cx - hw, cy - hh, cx + hw, cy + hh), out)
    else:  # OTHER: overlay
        for kid in kids:
            _layout(table, kid, box, out)


def _deform(component: str, style: StyleParams) -> list[Segment]:
    segs = strokes_for(component)
    if style.jitter_seed is None or style.jitter_scale == 0:
        return list(segs)
    rng = np.random.default_rng(_stable_seed("jitter", style.jitter_seed, component))
    pts = np.asarray(segs, dtype=np.float64)
    sx, sy = rng.uniform(0.8, 1.1, size=2)
    pts[:, 0::2] = 0.5 + (pts[:, 0::2] - 0.5) * sx
    pts[:, 1::2] = 0.5 + (pts[:, 1::2] - 0.5) * sy
    pts += rng.normal(0.0, style.jitter_scale, size=pts.shape)
    pts = np.clip(pts, 0.03, 0.97)
    return [tuple(float(v) for v in p) for p in pts]


def _segment_sdf(px, py, seg, half_w, radius):
    x0, y0, x1, y1 = seg
    mx, my = (x0 + x1) / 2, (y0 + y1) / 2
    dx, dy = x1 - x0, y1 - y0
    length = np.hypot(dx, dy)
    if length < 1e-9:
        ux, uy = 1.0, 0.0
    else:
        ux, uy = dx / length, dy / length
    lx = (px - mx) * ux + (py - my) * uy
    ly = -(px - mx) * uy + (py - my) * ux
    r = min(radius, half_w)
    qx = np.abs(lx) - (length / 2 + half_w) + r
    qy = np.abs(ly) - half_w + r
    outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
    inside = np.minimum(np.maximum(qx, qy), 0)
    return outside + inside - r


def render_glyph(
    table: DecompositionTable,
    glyph: str,
    style: StyleParams,
    size: int = 32,
    style_id: str = "",
) -> GlyphImage:
    if size not in SUPPORTED_SIZES:
        raise ValueError(f"size must be one of {SUPPORTED_SIZES}")
    if glyph not in table:
        raise UnknownGlyphError(glyph)
    placed: list = []
    _layout(table, glyph, (0.06, 0.06, 0.94, 0.94), placed)

    ss = 2 * size
    coords = (np.arange(ss) + 0.5) / ss
    py, px = np.meshgrid(coords, coords, indexing="ij")
    unit = 1.0 / size * (size / REFERENCE_SCALE)  # one reference pixel in unit coordinates
    half_w = style.stroke_width * unit / 2
    radius = style.corner_radius * unit
    shear = np.tan(style.slant)

    labels = component_labels(table)
    ink = np.zeros((ss, ss), dtype=bool)
    lab = np.zeros((ss, ss), dtype=np.uint8)
    for comp, (bx0, by0, bx1, by1) in placed:
        for sx0, sy0, sx1, sy1 in _deform(comp, style):
            ax, ay = bx0 + sx0 * (bx1 - bx0), by0 + sy0 * (by1 - by0)
            cx, cy = bx0 + sx1 * (bx1 - bx0), by0 + sy1 * (by1 - by0)
            ax += shear * (0.5 - ay)
            cx += shear * (0.5 - cy)
            hit = _segment_sdf(px, py, (ax, ay, cx, cy), half_w, radius) <= 0
            ink |= hit
            lab[hit] = labels[comp]

    pixels = ink.reshape(size, 2, size, 2).mean(axis=(1, 3)) * style.ink_level
    mask = _majority_label(lab.reshape(size, 2, size, 2).transpose(0, 2, 1, 3).reshape(size, size, 4))
    names = {v: k for k, v in labels.items()}
    return GlyphImage(pixels.astype(np.float32), glyph, style_id, mask, names)


def _majority_label(blocks: np.ndarray) -> np.ndarray:
    """Most frequent nonzero label per cell; 0 when the cell has no ink."""
    n_labels = int(blocks.max()) + 1
    if n_labels == 1:
        return np.zeros(blocks.shape[:-1], dtype=np.uint8)
    counts = np.zeros(blocks.shape[:-1] + (n_labels,), dtype=np.int32)
    for lbl in range(1, n_labels):
        counts[..., lbl] = (blocks == lbl).sum(axis=-1)
    best = counts.argmax(axis=-1).astype(np.uint8)
    best[counts.max(axis=-1) == 0] = 0
    return best


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Majority nonzero label per ``factor x factor`` cell."""
    h, w = mask.shape
    if h % factor or w % factor:
        raise ValueError(f"mask {h}x{w} does not tile into {factor}x{factor} cells")
    blocks = mask.reshape(h // factor, factor, w // factor, factor).transpose(0, 2, 1, 3)
    return _majority_label(blocks.reshape(h // factor, w // factor, factor * factor))


# ---------------------------------------------------------------------------
# datasets


CONTENT_STYLE_ID = "content"


@dataclass
class Dataset:
    table: DecompositionTable
    styles: list[StyleParams]
    style_ids: list[str]
    contents: list[str]
    mapping: dict[str, list[str]]
    size: int
    seed: int
    content_images: dict[str, GlyphImage]
    styled: dict[tuple[int, str], GlyphImage]
    pairs: list[tuple[int, str]]

    def __len__(self) -> int:
        return len(self.pairs)

    def content(self, glyph: str) -> GlyphImage:
        return self.content_images[glyph]

    def target(self, style: int, glyph: str) -> GlyphImage:
        return self.glyph(style, glyph)

    def glyph(self, style: int, glyph: str) -> GlyphImage:
        key = (style, glyph)
        if key not in self.styled:
            self.styled[key] = render_glyph(self.table, glyph, self.styles[style], self.size, self.style_ids[style])
        return self.styled[key]

    def references(self, style: int, glyph: str) -> list[GlyphImage]:
        return [self.glyph(style, r) for r in self.mapping[glyph]]

    def content_array(self, glyphs: Sequence[str]) -> np.ndarray:
        return np.stack([self.content_images[g].pixels for g in glyphs])[:, None]

    def styled_array(self, styles: Sequence[int], glyphs: Sequence[str]) -> np.ndarray:
        return np.stack([self.glyph(s, g).pixels for s, g in zip(styles, glyphs)])[:, None]


def make_dataset(
    table: DecompositionTable,
    styles: Sequence[StyleParams],
    contents: Sequence[str],
    ref_mapping: Mapping[str, Sequence[str]],
    size: int = 32,
    seed: int = 0,
    content_style: StyleParams = NEUTRAL_STYLE,
) -> Dataset:
    """Render content glyphs in the neutral style and every (style, glyph)
    needed for targets and their references."""
    missing = [c for c in contents if c not in ref_mapping]
    if missing:
        raise KeyError(f"reference mapping has no entry for {missing[:5]}")
    style_ids = [f"s{i}" for i in range(len(styles))]
    content_images = {c: render_glyph(table, c, content_style, size, CONTENT_STYLE_ID) for c in contents}
    needed = set(contents)
    for c in contents:
        needed.update(ref_mapping[c])
    styled: dict[tuple[int, str], GlyphImage] = {}
    for si, st in enumerate(styles):
        for g in sorted(needed):
            styled[(si, g)] = render_glyph(table, g, st, size, style_ids[si])
    pairs = [(si, c) for si in range(len(styles)) for c in contents]
    order = np.random.default_rng(seed).permutation(len(pairs))
    return Dataset(
        table=table,
        styles=list(styles),
        style_ids=style_ids,
        contents=list(contents),
        mapping={c: list(ref_mapping[c]) for c in contents},
        size=size,
        seed=seed,
        content_images=content_images,
        styled=styled,
        pairs=[pairs[i] for i in order],
    )


def split_items(items: Sequence, n_unseen: int, seed: int, keep_seen: Iterable = ()) -> tuple[list, list]:
    """Deterministic seen/unseen partition; ``keep_seen`` items are never held out."""
    keep = set(keep_seen)
    candidates = [x for x in items if x not in keep]
    if n_unseen > len(candidates):
        raise ValueError(f"cannot hold out {n_unseen} of {len(candidates)} candidates")
    rng = np.random.default_rng(seed)
    held = {candidates[i] for i in rng.choice(len(candidates), size=n_unseen, replace=False)}
    return [x for x in items if x not in held], [x for x in items if x in held]


def glyph_filename(glyph: str) -> str:
    if glyph.isascii() and glyph.replace("_", "").isalnum():
        return glyph
    return "u" + "_".join(f"{ord(ch):04x}" for ch in glyph)


def save_png(path, array: np.ndarray) -> None:
    from PIL import Image

    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def write_dataset(ds: Dataset, out_dir, splits: Optional[Mapping[str, str]] = None) -> Path:
    """``images/{style}/{glyph}.png``, ``masks/{style}/{glyph}.png``, ``meta.tsv``.

    ``splits`` optionally maps glyphs and style ids to ``seen``/``unseen``.
    """
    out = Path(out_dir)
    splits = dict(splits or {})
    rows = ["style_id\tcontent_id\tfile\tstyle_split\tchar_split\treferences"]
    for c in ds.contents:
        img = ds.content(c)
        rel = f"{CONTENT_STYLE_ID}/{glyph_filename(c)}.png"
        save_png(out / "images" / rel, img.pixels)
        save_png(out / "masks" / rel, img.mask)
        rows.append(f"{CONTENT_STYLE_ID}\t{c}\t{rel}\t-\t{splits.get(c, 'seen')}\t-")
    glyphs = sorted({g for (_, g) in ds.styled} | set(ds.contents))
    for si, sid in enumerate(ds.style_ids):
        for g in glyphs:
            img = ds.glyph(si, g)
            rel = f"{sid}/{glyph_filename(g)}.png"
            save_png(out / "images" / rel, img.pixels)
            save_png(out / "masks" / rel, img.mask)
            refs = ",".join(ds.mapping.get(g, [])) or "-"
            rows.append(f"{sid}\t{g}\t{rel}\t{splits.get(sid, 'seen')}\t{splits.get(g, 'seen')}\t{refs}")
    (out / "meta.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    return out


def sample_table_path() -> str:
    return os.path.join(os.path.dirname(__file__), "data", "sample_table.tsv")
