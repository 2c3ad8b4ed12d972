"""Image metrics (L1, RMSE, SSIM), attention-map extraction and a
localization score for the style-aggregation attention."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .glyphsynth import Dataset, GlyphImage, component_labels, downsample_mask, glyph_filename, save_png
from .numcore.tensor import DimensionError, Tensor, no_grad

ImageLike = Union[GlyphImage, np.ndarray, Tensor]


def _pixels(x: ImageLike) -> np.ndarray:
    """Float64 pixels with leading singleton axes (batch, channel) dropped."""
    if isinstance(x, GlyphImage):
        x = x.pixels
    elif isinstance(x, Tensor):
        x = x.data
    arr = np.asarray(x, dtype=np.float64)
    while arr.ndim > 2 and arr.shape[0] == 1:
        arr = arr[0]
    return arr


# ---------------------------------------------------------------------------
# pixel metrics


def pixel_metrics(a: ImageLike, b: ImageLike) -> tuple[float, float]:
    """``(mean |a - b|, sqrt(mean (a - b)^2))``."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise DimensionError(f"image shapes differ: {pa.shape} vs {pb.shape}")
    d = pa - pb
    return float(np.mean(np.abs(d))), float(np.sqrt(np.mean(d * d)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalized 1-D Gaussian taps."""
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    n = taps.size
    rows = sliding_window_view(img, n, axis=0) @ taps  # (H-n+1, W)
    return sliding_window_view(rows, n, axis=1) @ taps  # (H-n+1, W-n+1)


def ssim(
    a: ImageLike,
    b: ImageLike,
    window: int = 11,
    K1: float = 0.01,
    K2: float = 0.03,
    sigma: float = 1.5,
    data_range: float = 1.0,
) -> float:
    """Mean structural similarity over all fully-covered Gaussian windows."""
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise DimensionError(f"image shapes differ: {pa.shape} vs {pb.shape}")
    if pa.ndim != 2:
        pa, pb = pa.reshape(pa.shape[-2:]), pb.reshape(pb.shape[-2:])
    if min(pa.shape) < window:
        raise DimensionError(f"image {pa.shape} is smaller than the {window}x{window} window")
    taps = gaussian_window(window, sigma)
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_a = _filter_valid(pa, taps)
    mu_b = _filter_valid(pb, taps)
    var_a = _filter_valid(pa * pa, taps) - mu_a * mu_a
    var_b = _filter_valid(pb * pb, taps) - mu_b * mu_b
    cov = _filter_valid(pa * pb, taps) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


@dataclass
class MetricRow:
    style: str
    split: str
    l1: float
    rmse: float
    ssim: float
    n: int = 1


@dataclass
class MetricReport:
    """Per-(style, split) metric means plus the mean/std aggregate over rows."""

    rows: list[MetricRow] = field(default_factory=list)

    def aggregate(self) -> dict[str, tuple[float, float]]:
        out = {}
        for name in ("l1", "rmse", "ssim"):
            vals = np.array([getattr(r, name) for r in self.rows], dtype=np.float64)
            out[name] = (float(vals.mean()), float(vals.std())) if vals.size else (float("nan"), float("nan"))
        return out

    def to_tsv(self) -> str:
        lines = ["style\tsplit\tn\tl1\trmse\tssim"]
        lines += [f"{r.style}\t{r.split}\t{r.n}\t{r.l1!r}\t{r.rmse!r}\t{r.ssim!r}" for r in self.rows]
        agg = self.aggregate()
        lines.append("mean\t*\t-\t" + "\t".join(repr(agg[k][0]) for k in ("l1", "rmse", "ssim")))
        lines.append("std\t*\t-\t" + "\t".join(repr(agg[k][1]) for k in ("l1", "rmse", "ssim")))
        return "\n".join(lines) + "\n"


def metric_report(
    generated: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
    styles: Sequence[str],
    split: str,
    window: int = 11,
) -> MetricReport:
    """Average L1/RMSE/SSIM per style. SSIM is skipped (NaN) for images
    smaller than the window."""
    by_style: dict[str, list[tuple[float, float, float]]] = {}
    for g, t, s in zip(generated, targets, styles):
        l1, rmse = pixel_metrics(g, t)
        gp = _pixels(g).reshape(_pixels(g).shape[-2:])
        s_val = ssim(g, t, window) if min(gp.shape) >= window else float("nan")
        by_style.setdefault(s, []).append((l1, rmse, s_val))
    rows = []
    for s, vals in by_style.items():
        arr = np.array(vals)
        rows.append(MetricRow(s, split, float(arr[:, 0].mean()), float(arr[:, 1].mean()), float(arr[:, 2].mean()), len(vals)))
    return MetricReport(rows)


# ---------------------------------------------------------------------------
# attention maps


@dataclass(frozen=True)
class AttentionProbe:
    """A set of query positions on the ``h x w`` content grid.

    ``head`` selects one attention head; ``None`` sums over all heads.
    """

    positions: tuple[tuple[int, int], ...]
    head: Optional[int] = None
    kind: str = "granular"

    @classmethod
    def granular(cls, y: int, x: int, head: Optional[int] = None) -> "AttentionProbe":
        return cls(((y, x),), head, "granular")

    @classmethod
    def stroke(cls, start: tuple[int, int], end: tuple[int, int], head: Optional[int] = None) -> "AttentionProbe":
        """Grid points on the segment ``start``-``end`` (inclusive, deduplicated)."""
        (y0, x0), (y1, x1) = start, end
        steps = max(abs(y1 - y0), abs(x1 - x0))
        pts = []
        for t in range(steps + 1):
            f = t / steps if steps else 0.0
            p = (int(round(y0 + f * (y1 - y0))), int(round(x0 + f * (x1 - x0))))
            if p not in pts:
                pts.append(p)
        return cls(tuple(pts), head, "stroke")

    @classmethod
    def box(cls, y0: int, x0: int, y1: int, x1: int, head: Optional[int] = None) -> "AttentionProbe":
        """All points with ``y0 <= y < y1`` and ``x0 <= x < x1``."""
        pts = tuple((y, x) for y in range(y0, y1) for x in range(x0, x1))
        return cls(pts, head, "component")

    @classmethod
    def from_mask(cls, mask: np.ndarray, label: int, head: Optional[int] = None) -> "AttentionProbe":
        ys, xs = np.nonzero(np.asarray(mask) == label)
        return cls(tuple(zip(ys.tolist(), xs.tolist())), head, "component")

    def validate(self, h: int, w: int, heads: int) -> None:
        if not self.positions:
            raise ValueError("probe has no query positions")
        for y, x in self.positions:
            if not (0 <= y < h and 0 <= x < w):
                raise IndexError(f"probe position {(y, x)} outside {h}x{w}")
        if self.head is not None and not (0 <= self.head < heads):
            raise IndexError(f"head {self.head} outside 0..{heads - 1}")


def _as_heads(attention) -> np.ndarray:
    a = attention.data if isinstance(attention, Tensor) else np.asarray(attention)
    if a.ndim == 2:
        return a[None]
    if a.ndim == 3:
        return a
    raise DimensionError(f"attention must be (hw, khw) or (M, hw, khw), got {a.shape}")


def attention_rows(attention, probe: AttentionProbe, h: int, w: int) -> np.ndarray:
    """Softmaxed correspondence rows of the probe's queries, summed; shape ``(k*h*w,)``.

    ``attention`` holds the pre-softmax correspondence logits, one
    ``(hw, khw)`` matrix per head.
    """
    a = _as_heads(attention).astype(np.float64)
    m, hw, khw = a.shape
    if hw != h * w or khw % hw:
        raise DimensionError(f"attention {a.shape} does not match a {h}x{w} grid")
    probe.validate(h, w, m)
    idx = [y * w + x for y, x in probe.positions]
    heads = a if probe.head is None else a[probe.head : probe.head + 1]
    rows = heads[:, idx, :]
    rows = np.exp(rows - rows.max(axis=-1, keepdims=True))
    rows /= rows.sum(axis=-1, keepdims=True)
    return rows.sum(axis=(0, 1))


def attention_map(attention, probe: AttentionProbe, h: int, w: int) -> np.ndarray:
    """Probe rows reshaped to ``h x (k*w)``: the k reference grids side by side."""
    row = attention_rows(attention, probe, h, w)
    k = row.size // (h * w)
    return row.reshape(k, h, w).transpose(1, 0, 2).reshape(h, k * w)


def _label_row(masks: Sequence[np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(m).reshape(-1) for m in masks])


def localization_score(attention, probe: AttentionProbe, component_masks: Sequence[np.ndarray], label: int) -> float:
    """Fraction of the probe's attention mass on reference positions labelled ``label``.

    ``component_masks`` are the k reference masks at feature resolution.
    """
    masks = [np.asarray(m) for m in component_masks]
    h, w = masks[0].shape
    labels = _label_row(masks)
    if not np.any(labels == label):
        raise KeyError(f"component label {label} absent from every reference mask")
    row = attention_rows(attention, probe, h, w)
    if row.size != labels.size:
        raise DimensionError(f"{len(masks)} masks do not match attention width {row.size}")
    total = row.sum()
    return float(row[labels == label].sum() / total)


def uniform_baseline(component_masks: Sequence[np.ndarray], label: int) -> float:
    """Score of uniform attention: the component's area fraction over all references."""
    labels = _label_row(component_masks)
    return float(np.mean(labels == label))


@dataclass
class ProbeResult:
    style: int
    content: str
    component: str
    score: float
    baseline: float


def component_probes(
    G,
    data: Dataset,
    pairs: Sequence[tuple[int, str]],
    references: Callable[[int, str], Sequence[str]],
    batch_size: int = 16,
) -> list[ProbeResult]:
    """One component-level probe per (pair, component) present in both the
    content mask and at least one reference mask, at feature resolution.

    The probe's queries are the content cells carrying that component; the
    score sums over heads.
    """
    if not G.cfg.use_sam:
        raise ValueError("component probes need the attention module")
    factor = G.cfg.image_size // G.cfg.feature_size
    names = {v: k for k, v in component_labels(data.table).items()}
    results: list[ProbeResult] = []
    G.eval()
    with no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = list(pairs[i : i + batch_size])
            refs = [list(references(s, c)) for s, c in chunk]
            x = Tensor(data.content_array([c for _, c in chunk]))
            r = Tensor(np.stack([data.styled_array([s] * len(rg), rg) for (s, _), rg in zip(chunk, refs)]))
            _, att = G(x, r, return_attention=True)
            for j, ((s, c), rg) in enumerate(zip(chunk, refs)):
                cmask = downsample_mask(data.content(c).mask, factor)
                rmasks = [downsample_mask(data.glyph(s, g).mask, factor) for g in rg]
                present = set(np.unique(_label_row(rmasks)).tolist()) - {0}
                for lbl in sorted(set(np.unique(cmask).tolist()) - {0}):
                    if lbl not in present:
                        continue
                    probe = AttentionProbe.from_mask(cmask, lbl)
                    score = localization_score(att.data[j], probe, rmasks, lbl)
                    results.append(ProbeResult(s, c, names[lbl], score, uniform_baseline(rmasks, lbl)))
    G.train()
    return results


# ---------------------------------------------------------------------------
# exports


def to_uint8(map_: np.ndarray) -> np.ndarray:
    """Per-map max normalization to 8-bit grayscale."""
    arr = np.asarray(map_, dtype=np.float64)
    peak = arr.max()
    if peak <= 0:
        return np.zeros(arr.shape, dtype=np.uint8)
    return np.clip(np.rint(arr / peak * 255.0), 0, 255).astype(np.uint8)


def save_attention_map(path, map_: np.ndarray, raw: bool = True) -> None:
    """PNG for viewing plus, when ``raw``, the float map as ``.npy`` beside it."""
    path = Path(path)
    save_png(path, to_uint8(map_))
    if raw:
        np.save(path.with_suffix(".npy"), np.asarray(map_, dtype=np.float64))


def save_glyphs(out_dir, images: Iterable[tuple[str, str, np.ndarray]]) -> list[Path]:
    """Write ``(style_id, glyph, pixels)`` triples to ``{style}/{glyph}.png``."""
    out = Path(out_dir)
    paths = []
    for sid, glyph, pixels in images:
        p = out / sid / f"{glyph_filename(glyph)}.png"
        save_png(p, np.asarray(pixels).reshape(np.asarray(pixels).shape[-2:]))
        paths.append(p)
    return paths
