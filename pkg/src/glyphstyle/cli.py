"""``glyphstyle`` command line: decomposition, reference selection and
mapping, dataset synthesis, training, generation, evaluation and attention
visualization.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 training
divergence. Every subcommand writing files puts them under ``--out-dir``
together with ``manifest.tsv`` (relative path, size, sha256).
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


# ---------------------------------------------------------------------------
# shared helpers


def _existing(path: Optional[str], what: str) -> Optional[Path]:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise DataError(f"{what} not found: {path}")
    return p


def _table(args):
    from .decomp import load_table
    from .glyphsynth import sample_table_path

    path = _existing(args.table, "table") if args.table else Path(sample_table_path())
    comps = _existing(getattr(args, "components", None), "components file")
    return load_table(path, comps, getattr(args, "depth", 3))


def _glyph_list(text: Optional[str]) -> Optional[list[str]]:
    if text is None:
        return None
    p = Path(text)
    if p.is_file():
        raw = p.read_text(encoding="utf-8")
        return [t for line in raw.splitlines() for t in line.replace(",", " ").split() if not line.startswith("#")]
    return [t for t in text.replace(",", " ").split() if t]


def write_manifest(out_dir: Path, command: str) -> Path:
    rows = [f"# glyphstyle {command}", "path\tbytes\tsha256"]
    for p in sorted(q for q in out_dir.rglob("*") if q.is_file() and q.name != "manifest.tsv"):
        data = p.read_bytes()
        rows.append(f"{p.relative_to(out_dir).as_posix()}\t{len(data)}\t{hashlib.sha256(data).hexdigest()}")
    path = out_dir / "manifest.tsv"
    path.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return path


def _out(args) -> Optional[Path]:
    if args.out_dir is None:
        return None
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(args):
    from .trainer import load_state

    return load_state(_existing(args.checkpoint, "checkpoint"))


def _style_index(state, style: str) -> int:
    ids = state.exp.data.style_ids
    if style in ids:
        return ids.index(style)
    raise DataError(f"unknown style {style!r}; known: {','.join(ids)}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_decompose(args) -> int:
    from .decomp import build_component_tree, search_components

    table = _table(args)
    glyphs = _glyph_list(args.glyphs) or table.glyphs
    lines = []
    for g in glyphs:
        if g not in table:
            raise DataError(f"glyph {g!r} is not in the table")
        pairs = sorted(search_components(table, g))
        depth = build_component_tree(table, g).depth()
        lines.append(f"{g}\t{depth}\t" + ",".join(f"{c}:{ctx}" for c, ctx in pairs))
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    out = _out(args)
    if out:
        (out / "components.tsv").write_text(text, encoding="utf-8")
        write_manifest(out, "decompose")
    return EXIT_OK


def cmd_select_refs(args) -> int:
    from .refsel import select_reference_set

    table = _table(args)
    ref = select_reference_set(table, n_ref=args.n_ref, min_new=args.min_new, glyphs=_glyph_list(args.scan))
    print("[" + ",".join(ref.glyphs) + "]")
    missing = sorted(table.components - ref.covered)
    if missing:
        print(f"# uncovered components: {','.join(missing)}", file=sys.stderr)
    out = _out(args)
    if out:
        (out / "references.txt").write_text("\n".join(ref.glyphs) + "\n", encoding="utf-8")
        write_manifest(out, "select-refs")
    return EXIT_OK


def cmd_map_refs(args) -> int:
    from .refsel import build_full_mapping, format_mapping, select_reference_set

    table = _table(args)
    refs = _glyph_list(args.refs) or list(select_reference_set(table, args.n_ref, args.min_new).glyphs)
    for r in refs:
        if r not in table:
            raise DataError(f"reference {r!r} is not in the table")
    contents = _glyph_list(args.contents) or table.glyphs
    text = format_mapping(build_full_mapping(table, refs, contents, args.k))
    sys.stdout.write(text)
    out = _out(args)
    if out:
        (out / "mapping.tsv").write_text(text, encoding="utf-8")
        write_manifest(out, "map-refs")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    from .glyphsynth import default_styles, make_dataset, split_items, write_dataset
    from .refsel import build_full_mapping, select_reference_set

    table = _table(args)
    out = _out(args)
    if out is None:
        raise UsageError("synth-data needs --out-dir")
    ref = select_reference_set(table, args.n_ref, args.min_new)
    mapping = build_full_mapping(table, ref, table.glyphs, args.k)
    styles = default_styles(args.n_styles, args.seed)
    ds = make_dataset(table, styles, table.glyphs, mapping, args.size, args.seed)
    _, unseen_chars = split_items(table.glyphs, args.n_unseen_chars, args.seed, keep_seen=ref.glyphs)
    _, unseen_styles = split_items(ds.style_ids, args.n_unseen_styles, args.seed + 1)
    splits = {g: "unseen" for g in unseen_chars} | {s: "unseen" for s in unseen_styles}
    for s, g in ds.pairs:
        ds.glyph(s, g)
    for s in range(len(styles)):
        for r in ref.glyphs:
            ds.glyph(s, r)
    write_dataset(ds, out, splits)
    write_manifest(out, "synth-data")
    print(f"wrote {len(ds.styled) + len(ds.contents)} glyphs to {out}")
    return EXIT_OK


_TRAIN_SKIP = {"seed", "table"}


def _train_config(args):
    from .trainer import TrainConfig

    cfg = TrainConfig()
    if args.config:
        cfg = TrainConfig.from_text(_existing(args.config, "config").read_text(encoding="utf-8"), cfg)
    changes = {}
    for f in dataclasses.fields(TrainConfig):
        val = getattr(args, f.name, None)
        if val is not None:
            changes[f.name] = val
    return cfg.replace(**changes)


def cmd_train(args) -> int:
    from .trainer import train

    cfg = _train_config(args)
    out = _out(args)
    if out is None:
        raise UsageError("train needs --out-dir")
    result = train(cfg, out_dir=out)
    write_manifest(out, "train")
    print(
        f"trained {cfg.iterations} iterations; unseen-style/unseen-char L1 "
        f"{result.initial['l1_main']:.4f} -> {result.final['l1_main']:.4f}"
    )
    return EXIT_OK


def _generate_one(state, style: int, content: str, refs: Optional[list[str]]):
    from .numcore.tensor import Tensor, no_grad

    data = state.exp.data
    if content not in data.content_images:
        raise DataError(f"content glyph {content!r} is not in the trained vocabulary")
    refs = refs or state.exp.mapping[content]
    for r in refs:
        if r not in data.table:
            raise DataError(f"reference {r!r} is not in the table")
    state.G.eval()
    with no_grad():
        x = Tensor(data.content_array([content]))
        r = Tensor(data.styled_array([style] * len(refs), refs)[None])
        y, att = state.G(x, r, return_attention=True)
    return y.data[0, 0], (None if att is None else att.data[0]), refs


def cmd_generate(args) -> int:
    from .glyphsynth import glyph_filename, save_png

    state = _load(args)
    style = _style_index(state, args.style)
    contents = _glyph_list(args.content) or []
    if not contents:
        raise UsageError("generate needs --content")
    out = _out(args)
    if out is None:
        raise UsageError("generate needs --out-dir")
    refs = _glyph_list(args.refs)
    for c in contents:
        img, _, _ = _generate_one(state, style, c, refs)
        path = out / f"{args.style}_{glyph_filename(c)}.png"
        save_png(path, img)
        print(path)
    write_manifest(out, "generate")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evalviz import metric_report, save_glyphs
    from .trainer import eval_pairs

    state = _load(args)
    out = _out(args)
    reports = []
    for split in args.split:
        try:
            pairs = eval_pairs(state.exp, split)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        gen, tgt, sids = [], [], []
        for s, c in pairs:
            img, _, _ = _generate_one(state, s, c, None)
            gen.append(img)
            tgt.append(state.exp.data.glyph(s, c).pixels)
            sids.append(state.exp.data.style_ids[s])
        rep = metric_report(gen, tgt, sids, split, window=args.window)
        reports.append(rep.to_tsv())
        agg = rep.aggregate()
        print(f"{split}\tl1={agg['l1'][0]:.4f}\trmse={agg['rmse'][0]:.4f}\tssim={agg['ssim'][0]:.4f}")
        if out and args.save_images:
            save_glyphs(out / "images" / split, zip(sids, [c for _, c in pairs], gen))
    if out:
        (out / "metrics.tsv").write_text("".join(reports), encoding="utf-8")
        write_manifest(out, "eval")
    return EXIT_OK


def _parse_probe(text: str, head: Optional[int], cmask: np.ndarray, labels: dict[str, int]):
    from .evalviz import AttentionProbe

    kind, _, rest = text.partition(":")
    try:
        nums = [int(v) for v in rest.split(",")] if kind != "component" else []
    except ValueError:
        raise UsageError(f"bad probe {text!r}") from None
    if kind == "point" and len(nums) == 2:
        return AttentionProbe.granular(nums[0], nums[1], head), None
    if kind == "stroke" and len(nums) == 4:
        return AttentionProbe.stroke((nums[0], nums[1]), (nums[2], nums[3]), head), None
    if kind == "box" and len(nums) == 4:
        return AttentionProbe.box(*nums, head=head), None
    if kind == "component":
        if rest not in labels:
            raise DataError(f"unknown component {rest!r}")
        lbl = labels[rest]
        if not np.any(cmask == lbl):
            raise DataError(f"component {rest!r} does not appear in the content glyph")
        return AttentionProbe.from_mask(cmask, lbl, head), lbl
    raise UsageError(f"bad probe {text!r}; use point:y,x | stroke:y0,x0,y1,x1 | box:y0,x0,y1,x1 | component:NAME")


def cmd_attn_viz(args) -> int:
    from .evalviz import attention_map, localization_score, save_attention_map, uniform_baseline
    from .glyphsynth import component_labels, downsample_mask, glyph_filename, save_png

    state = _load(args)
    if not state.G.cfg.use_sam:
        raise DataError("checkpoint was trained without the attention module")
    out = _out(args)
    if out is None:
        raise UsageError("attn-viz needs --out-dir")
    style = _style_index(state, args.style)
    img, att, refs = _generate_one(state, style, args.content, _glyph_list(args.refs))
    data = state.exp.data
    fs = state.G.cfg.feature_size
    factor = state.G.cfg.image_size // fs
    cmask = downsample_mask(data.content(args.content).mask, factor)
    probe, lbl = _parse_probe(args.probe, args.head, cmask, component_labels(data.table))
    try:
        amap = attention_map(att, probe, fs, fs)
    except IndexError as exc:
        raise DataError(str(exc)) from None
    stem = f"{args.style}_{glyph_filename(args.content)}"
    save_attention_map(out / f"{stem}_attention.png", amap)
    save_png(out / f"{stem}_generated.png", img)
    strip = np.concatenate([data.glyph(style, r).pixels for r in refs], axis=1)
    save_png(out / f"{stem}_references.png", strip)
    print(f"attention mass {amap.sum():.4f} over {len(probe.positions)} queries")
    if lbl is not None:
        rmasks = [downsample_mask(data.glyph(style, r).mask, factor) for r in refs]
        if any(np.any(m == lbl) for m in rmasks):
            score = localization_score(att, probe, rmasks, lbl)
            print(f"localization {score:.4f} (uniform baseline {uniform_baseline(rmasks, lbl):.4f})")
    write_manifest(out, "attn-viz")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _DefaultsFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Append ``(default: ...)`` unless the help text already states one."""

    def _get_help_string(self, action):
        if "(default" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def build_parser() -> argparse.ArgumentParser:
    from .trainer import TrainConfig

    fmt = _DefaultsFormatter
    parser = _Parser(prog="glyphstyle", description=__doc__.split("\n\n")[0], formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0, help="random seed")
        p.add_argument("--out-dir", default=None, help="directory for outputs and manifest.tsv")
        return p

    def table_args(p):
        p.add_argument("--table", default=None, help="decomposition table (default: bundled sample table)")
        p.add_argument("--components", default=None, help="file listing conspicuous components (default: atoms)")
        p.add_argument("--depth", type=int, default=3, help="number of decomposition levels searched")

    p = add("decompose", cmd_decompose, "list conspicuous components of glyphs")
    table_args(p)
    p.add_argument("--glyphs", default=None, help="comma list or file (default: every composite)")

    p = add("select-refs", cmd_select_refs, "select the fixed reference set")
    table_args(p)
    p.add_argument("--n-ref", type=int, default=100, help="maximum reference set size")
    p.add_argument("--min-new", type=int, default=2, help="new components a glyph must contribute")
    p.add_argument("--scan", default=None, help="scan order, comma list or file (default: table order)")

    p = add("map-refs", cmd_map_refs, "map content glyphs to k reference glyphs")
    table_args(p)
    p.add_argument("--refs", default=None, help="reference set, comma list or file (default: select-refs result)")
    p.add_argument("--contents", default=None, help="content glyphs (default: every composite)")
    p.add_argument("--k", type=int, default=3, help="references per content glyph")
    p.add_argument("--n-ref", type=int, default=100, help="reference set size when --refs is absent")
    p.add_argument("--min-new", type=int, default=2, help="novelty threshold when --refs is absent")

    p = add("synth-data", cmd_synth_data, "render the procedural glyph dataset")
    table_args(p)
    p.add_argument("--n-styles", type=int, default=8, help="number of procedural styles")
    p.add_argument("--n-unseen-styles", type=int, default=2, help="styles held out of training")
    p.add_argument("--n-unseen-chars", type=int, default=8, help="characters held out of training")
    p.add_argument("--size", type=int, default=32, choices=(32, 64, 128), help="image size")
    p.add_argument("--k", type=int, default=3, help="references per content glyph")
    p.add_argument("--n-ref", type=int, default=100, help="maximum reference set size")
    p.add_argument("--min-new", type=int, default=2, help="novelty threshold")

    p = add("train", cmd_train, "train generator and discriminator")
    p.add_argument("--config", default=None, help="key = value config file; flags override it")
    base = TrainConfig()
    for f in dataclasses.fields(TrainConfig):
        if f.name == "seed":
            continue
        cur = getattr(base, f.name)
        typ = _bool if isinstance(cur, bool) else type(cur)
        p.add_argument(
            "--" + f.name.replace("_", "-"),
            dest=f.name,
            type=typ,
            default=None,
            help=f"training option (default: {cur!r})",
        )
    p.set_defaults(seed=None)
    p._option_string_actions["--seed"].default = None
    p._option_string_actions["--seed"].help = f"random seed (default: {base.seed})"

    def ck_args(p):
        p.add_argument("--checkpoint", required=True, help="checkpoint.bin written by train")

    p = add("generate", cmd_generate, "generate glyphs in a style")
    ck_args(p)
    p.add_argument("--content", required=True, help="content glyph(s), comma list")
    p.add_argument("--style", required=True, help="style id, e.g. s1")
    p.add_argument("--refs", default=None, help="reference glyphs (default: stored mapping)")

    p = add("eval", cmd_eval, "L1 / RMSE / SSIM on evaluation splits")
    ck_args(p)
    p.add_argument("--split", nargs="+", default=["ufuc"], choices=("ufuc", "ufsc", "sfuc", "train"), help="splits")
    p.add_argument("--window", type=int, default=11, help="SSIM window; images smaller than it report NaN")
    p.add_argument("--save-images", action="store_true", help="also write generated glyphs")

    p = add("attn-viz", cmd_attn_viz, "export an attention map for a query probe")
    ck_args(p)
    p.add_argument("--content", required=True, help="content glyph")
    p.add_argument("--style", required=True, help="style id")
    p.add_argument("--refs", default=None, help="reference glyphs (default: stored mapping)")
    p.add_argument(
        "--probe", default="point:0,0", help="point:y,x | stroke:y0,x0,y1,x1 | box:y0,x0,y1,x1 | component:NAME"
    )
    p.add_argument("--head", type=int, default=None, help="attention head (default: sum over heads)")
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    from .checkpoint import CheckpointError
    from .decomp import TableError, UnknownGlyphError
    from .numcore.tensor import DimensionError
    from .trainer import TrainingDivergence

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, TableError, CheckpointError, DimensionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except UnknownGlyphError as exc:
        print(f"error: unknown glyph {exc.args[0]!r}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
