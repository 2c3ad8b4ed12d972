"""Losses, the self-reconstruction branch and the alternating GAN loop."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .checkpoint import save_checkpoint
from .decomp import DecompositionTable, load_table
from .fontnet import Discriminator, Generator, ModelConfig
from .glyphsynth import Dataset, StyleParams, default_styles, make_dataset, sample_table_path, split_items
from .nnblocks import Module
from .numcore import ops
from .numcore.tensor import Tensor, no_grad, set_default_dtype
from .refsel import ReferenceSet, build_full_mapping, random_references, select_reference_set

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, iteration: int, what: str) -> None:
        super().__init__(f"non-finite {what} at iteration {iteration}")
        self.iteration = iteration


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    lambda_adv: float = 1.0
    lambda_l1: float = 0.1
    lr_g: float = 0.0002
    lr_d: float = 0.0008
    beta1: float = 0.0
    beta2: float = 0.9
    batch_size: int = 4
    iterations: int = 2000
    k: int = 3
    heads: int = 8
    seed: int = 0
    use_sam: bool = True
    use_sr: bool = True
    use_rs: bool = True
    image_size: int = 32
    width: float = 0.25
    n_styles: int = 8
    n_unseen_styles: int = 2
    n_unseen_chars: int = 8
    n_ref: int = 100
    min_new: int = 2
    split_seed: int = 0
    style_seed: int = 0
    jitter_scale: float = 0.07
    log_every: int = 50
    table: str = ""

    def __post_init__(self) -> None:
        if self.lambda_adv < 0 or self.lambda_l1 < 0:
            raise ValueError("loss weights must be >= 0")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1 or self.iterations < 0 or self.k < 1:
            raise ValueError("batch_size and k must be >= 1, iterations >= 0")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str, base: Optional["TrainConfig"] = None) -> "TrainConfig":
        """``key = value`` lines, ``#`` comments; unknown keys are an error."""
        base = base or cls()
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        changes = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            changes[key] = _coerce(getattr(base, key), value)
        return dataclasses.replace(base, **changes)


def _coerce(current, value: str):
    if isinstance(current, bool):
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


# ---------------------------------------------------------------------------
# losses


def _finite(t: Tensor, what: str) -> None:
    if not np.all(np.isfinite(t.data)):
        raise FloatingPointError(f"non-finite {what}")


def adv_loss_d(logit_real: Tensor, logit_fake: Tensor) -> Tensor:
    """Hinge loss for the discriminator: mean relu(1 - real) + mean relu(1 + fake)."""
    _finite(logit_real, "real logits")
    _finite(logit_fake, "fake logits")
    return ops.add(ops.mean(ops.relu(ops.sub(1.0, logit_real))), ops.mean(ops.relu(ops.add(1.0, logit_fake))))


def adv_loss_g(*logit_fake: Tensor) -> Tensor:
    """Negative mean fake logit, pooled over every generated branch given."""
    for t in logit_fake:
        _finite(t, "fake logits")
    flat = [ops.reshape(t, (-1,)) for t in logit_fake]
    return ops.neg(ops.mean(ops.concat(flat, axis=0) if len(flat) > 1 else flat[0]))


def l1_loss(y_main: Tensor, y_sr: Optional[Tensor], y: Tensor) -> Tensor:
    """mean|main - y| + mean|sr - y|; the second term is dropped when ``y_sr`` is None."""
    if y_main.shape != y.shape or (y_sr is not None and y_sr.shape != y.shape):
        from .numcore.tensor import DimensionError

        raise DimensionError("l1_loss operands must share a shape")
    loss = ops.l1_distance(y_main, y)
    if y_sr is not None:
        loss = ops.add(loss, ops.l1_distance(y_sr, y))
    return loss


def self_reconstruct(params: Generator, x_c: Tensor, y_c: Tensor) -> Tensor:
    """Generate with the target itself as the only reference (k = 1)."""
    refs = ops.reshape(y_c, (y_c.shape[0], 1) + y_c.shape[1:])
    return params(x_c, refs)


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, betas=(0.0, 0.9), eps: float = 1e-8) -> None:
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = p.data - step.astype(p.data.dtype, copy=False)


def grad_norm(module: Module) -> float:
    total = 0.0
    for p in module.parameters():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)


# ---------------------------------------------------------------------------
# experiment state


@dataclass
class StepReport:
    iteration: int
    loss_g_adv: float
    loss_d: float
    loss_l1_main: float
    loss_l1_sr: float
    grad_norm_g: float
    grad_norm_d: float

    FIELDS = ("iteration", "loss_g_adv", "loss_d", "loss_l1_main", "loss_l1_sr", "grad_norm_g", "grad_norm_d")

    def tsv(self) -> str:
        return "\t".join(repr(getattr(self, f)) for f in self.FIELDS)

    def is_finite(self) -> bool:
        return all(math.isfinite(getattr(self, f)) for f in self.FIELDS[1:])


@dataclass
class Batch:
    styles: np.ndarray
    glyphs: list[str]
    char_ids: np.ndarray
    x: Tensor
    y: Tensor
    refs: Tensor
    ref_glyphs: list[list[str]]


@dataclass
class Experiment:
    """Everything derived from the table and config before training starts."""

    table: DecompositionTable
    ref_set: ReferenceSet
    mapping: dict[str, list[str]]
    data: Dataset
    seen_chars: list[str]
    unseen_chars: list[str]
    seen_styles: list[int]
    unseen_styles: list[int]

    @property
    def char_index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.data.contents)}


def build_experiment(cfg: TrainConfig, table: Optional[DecompositionTable] = None) -> Experiment:
    if table is None:
        table = load_table(cfg.table or sample_table_path())
    ref_set = select_reference_set(table, n_ref=cfg.n_ref, min_new=cfg.min_new)
    contents = table.glyphs
    mapping = build_full_mapping(table, ref_set, contents, cfg.k)
    seen_chars, unseen_chars = split_items(contents, cfg.n_unseen_chars, cfg.split_seed, keep_seen=ref_set.glyphs)
    styles: list[StyleParams] = default_styles(cfg.n_styles, cfg.style_seed, cfg.jitter_scale)
    seen_styles, unseen_styles = split_items(list(range(cfg.n_styles)), cfg.n_unseen_styles, cfg.split_seed + 1)
    data = make_dataset(table, styles, contents, mapping, cfg.image_size, cfg.split_seed)
    return Experiment(table, ref_set, mapping, data, seen_chars, unseen_chars, seen_styles, unseen_styles)


def model_config(cfg: TrainConfig, exp: Experiment) -> ModelConfig:
    return ModelConfig(
        image_size=cfg.image_size,
        width=cfg.width,
        heads=cfg.heads,
        k=cfg.k,
        n_styles=len(exp.data.styles),
        n_chars=len(exp.data.contents),
        use_sam=cfg.use_sam,
    )


@dataclass
class TrainState:
    cfg: TrainConfig
    exp: Experiment
    G: Generator
    D: Discriminator
    opt_g: Adam
    opt_d: Adam
    rng: np.random.Generator
    iteration: int = 0
    reports: list[StepReport] = field(default_factory=list)

    def metadata(self) -> dict:
        return {
            "format": "glyphstyle-checkpoint",
            "iteration": self.iteration,
            "model": self.G.cfg.to_dict(),
            "train": dataclasses.asdict(self.cfg),
            "contents": self.exp.data.contents,
            "styles": [dataclasses.asdict(s) for s in self.exp.data.styles],
            "style_ids": self.exp.data.style_ids,
            "mapping": self.exp.mapping,
            "reference_set": list(self.exp.ref_set.glyphs),
            "unseen_chars": self.exp.unseen_chars,
            "unseen_styles": [self.exp.data.style_ids[i] for i in self.exp.unseen_styles],
        }


def init_state(cfg: TrainConfig, exp: Optional[Experiment] = None) -> TrainState:
    set_default_dtype(np.float32)
    exp = exp or build_experiment(cfg)
    rng = np.random.default_rng(cfg.seed)
    mcfg = model_config(cfg, exp)
    G = Generator(mcfg, rng)
    D = Discriminator(mcfg, rng)
    opt_g = Adam(G.parameters(), cfg.lr_g, (cfg.beta1, cfg.beta2))
    opt_d = Adam(D.parameters(), cfg.lr_d, (cfg.beta1, cfg.beta2))
    return TrainState(cfg, exp, G, D, opt_g, opt_d, rng)


def reference_glyphs(state: TrainState, glyph: str, rng: np.random.Generator) -> list[str]:
    cfg, exp = state.cfg, state.exp
    if cfg.use_rs:
        return exp.mapping[glyph]
    return random_references(exp.table, exp.seen_chars, glyph, cfg.k, rng)


def make_batch(state: TrainState, styles: Sequence[int], glyphs: Sequence[str], rng: np.random.Generator) -> Batch:
    data = state.exp.data
    idx = state.exp.char_index
    refs = [reference_glyphs(state, g, rng) for g in glyphs]
    x = data.content_array(glyphs)
    y = data.styled_array(styles, glyphs)
    r = np.stack([data.styled_array([s] * len(rg), rg) for s, rg in zip(styles, refs)])
    return Batch(
        styles=np.asarray(styles, dtype=np.int64),
        glyphs=list(glyphs),
        char_ids=np.asarray([idx[g] for g in glyphs], dtype=np.int64),
        x=Tensor(x),
        y=Tensor(y),
        refs=Tensor(r),
        ref_glyphs=refs,
    )


def sample_batch(state: TrainState) -> Batch:
    exp, rng = state.exp, state.rng
    n = state.cfg.batch_size
    styles = [exp.seen_styles[i] for i in rng.integers(len(exp.seen_styles), size=n)]
    glyphs = [exp.seen_chars[i] for i in rng.integers(len(exp.seen_chars), size=n)]
    return make_batch(state, styles, glyphs, rng)


# ---------------------------------------------------------------------------
# one alternating update


def training_step(state: TrainState, batch: Batch) -> StepReport:
    cfg, G, D = state.cfg, state.G, state.D
    it = state.iteration
    n = batch.x.shape[0]
    G.train()
    D.train()
    if cfg.use_sr:
        sr_refs = ops.reshape(batch.y, (n, 1) + batch.y.shape[1:])
        y_main, y_sr, _ = G.forward_branches(batch.x, batch.refs, sr_refs)
        fakes = [y_main, y_sr]
    else:
        y_main, y_sr = G(batch.x, batch.refs), None
        fakes = [y_main]
    nf = len(fakes)

    # discriminator: real batch plus detached fakes of every branch, one pass
    d_in = ops.concat([batch.y] + [f.detach() for f in fakes], axis=0)
    d_styles = np.tile(batch.styles, nf + 1)
    d_chars = np.tile(batch.char_ids, nf + 1)
    logits = D(d_in, d_styles, d_chars)
    real, fake = ops.split(logits, [n, n * nf], axis=0)
    try:
        loss_d = ops.mul(adv_loss_d(real, fake), cfg.lambda_adv)
    except FloatingPointError:
        raise TrainingDivergence(it, "discriminator logits") from None
    _guard(loss_d, it, "discriminator loss")
    D.zero_grad()
    loss_d.backward()
    gn_d = grad_norm(D)
    state.opt_d.step()
    D.zero_grad()

    # generator: adversarial term through the updated (frozen) discriminator plus L1
    D.eval()
    g_logits = D(ops.concat(fakes, axis=0), np.tile(batch.styles, nf), np.tile(batch.char_ids, nf))
    try:
        loss_adv = adv_loss_g(g_logits)
    except FloatingPointError:
        raise TrainingDivergence(it, "generator logits") from None
    l1_main = ops.l1_distance(y_main, batch.y)
    l1_total = l1_main if y_sr is None else ops.add(l1_main, ops.l1_distance(y_sr, batch.y))
    loss_g = ops.add(ops.mul(loss_adv, cfg.lambda_adv), ops.mul(l1_total, cfg.lambda_l1))
    _guard(loss_g, it, "generator loss")
    G.zero_grad()
    loss_g.backward()
    D.zero_grad()
    gn_g = grad_norm(G)
    state.opt_g.step()
    G.zero_grad()
    D.train()

    l1_sr = 0.0 if y_sr is None else float(ops.l1_distance(y_sr, batch.y).item())
    report = StepReport(
        iteration=it,
        loss_g_adv=float(loss_adv.item()),
        loss_d=float(loss_d.item()),
        loss_l1_main=float(l1_main.item()),
        loss_l1_sr=l1_sr,
        grad_norm_g=gn_g,
        grad_norm_d=gn_d,
    )
    if not report.is_finite():
        raise TrainingDivergence(it, "report value")
    state.iteration += 1
    return report


def _guard(loss: Tensor, it: int, what: str) -> None:
    if not np.all(np.isfinite(loss.data)):
        raise TrainingDivergence(it, what)


# ---------------------------------------------------------------------------
# evaluation and the outer loop


def eval_pairs(exp: Experiment, split: str = "ufuc") -> list[tuple[int, str]]:
    """``ufuc``: unseen styles x unseen chars; ``ufsc``: unseen styles x seen chars;
    ``sfuc``: seen styles x unseen chars; ``train``: seen x seen."""
    styles = {"ufuc": exp.unseen_styles, "ufsc": exp.unseen_styles, "sfuc": exp.seen_styles, "train": exp.seen_styles}
    chars = {"ufuc": exp.unseen_chars, "ufsc": exp.seen_chars, "sfuc": exp.unseen_chars, "train": exp.seen_chars}
    if split not in styles:
        raise ValueError(f"unknown split {split!r}")
    return [(s, c) for s in styles[split] for c in chars[split]]


def evaluate(state: TrainState, pairs: Sequence[tuple[int, str]], batch_size: int = 16, seed: int = 12345) -> dict:
    """Mean main-branch and self-reconstruction L1 over ``pairs`` (no grad)."""
    rng = np.random.default_rng(seed)
    G = state.G
    G.eval()
    main, sr = [], []
    with no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i : i + batch_size]
            b = make_batch(state, [s for s, _ in chunk], [c for _, c in chunk], rng)
            n = len(chunk)
            y_main = G(b.x, b.refs)
            y_sr = G(b.x, ops.reshape(b.y, (n, 1) + b.y.shape[1:]))
            main.append(np.abs(y_main.data - b.y.data).mean(axis=(1, 2, 3)))
            sr.append(np.abs(y_sr.data - b.y.data).mean(axis=(1, 2, 3)))
    G.train()
    main_arr = np.concatenate(main)
    sr_arr = np.concatenate(sr)
    return {"l1_main": float(main_arr.mean()), "l1_sr": float(sr_arr.mean()), "n": len(pairs)}


@dataclass
class TrainResult:
    state: TrainState
    reports: list[StepReport]
    initial: dict
    final: dict


LOG_HEADER = "\t".join(StepReport.FIELDS)


def train(
    cfg: TrainConfig,
    out_dir=None,
    exp: Optional[Experiment] = None,
    eval_split: str = "ufuc",
    callback: Optional[Callable[[StepReport], None]] = None,
) -> TrainResult:
    """Run ``cfg.iterations`` alternating steps.

    With ``out_dir`` set, writes ``train_log.tsv`` (one row every
    ``log_every`` steps plus the last), ``checkpoint.bin``, ``config.txt``
    and ``metrics.tsv``.
    """
    state = init_state(cfg, exp)
    pairs = eval_pairs(state.exp, eval_split)
    initial = evaluate(state, pairs)
    rows = [LOG_HEADER]
    reports = []
    for _ in range(cfg.iterations):
        rep = training_step(state, sample_batch(state))
        reports.append(rep)
        if callback is not None:
            callback(rep)
        if rep.iteration % cfg.log_every == 0 or rep.iteration == cfg.iterations - 1:
            rows.append(rep.tsv())
            log.info("iter %d  D %.4f  G_adv %.4f  L1 %.4f / %.4f", rep.iteration, rep.loss_d, rep.loss_g_adv, rep.loss_l1_main, rep.loss_l1_sr)
    final = evaluate(state, pairs)
    state.reports = reports
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
        (out / "metrics.tsv").write_text(
            "phase\tsplit\tl1_main\tl1_sr\n"
            f"initial\t{eval_split}\t{initial['l1_main']!r}\t{initial['l1_sr']!r}\n"
            f"final\t{eval_split}\t{final['l1_main']!r}\t{final['l1_sr']!r}\n",
            encoding="utf-8",
        )
        save_checkpoint(out / "checkpoint.bin", {"G": state.G, "D": state.D}, state.metadata())
    return TrainResult(state, reports, initial, final)


def load_state(path) -> TrainState:
    """Rebuild a :class:`TrainState` from ``checkpoint.bin`` (fresh optimizers).

    The experiment (splits, mapping, styles) is re-derived from the stored
    training config, which is deterministic; the stored mapping is checked
    against it.
    """
    from .checkpoint import CheckpointError, load_into, read_checkpoint

    meta, tensors = read_checkpoint(path)
    if meta.get("format") != "glyphstyle-checkpoint":
        raise CheckpointError(f"{path}: missing glyphstyle metadata")
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    cfg = TrainConfig(**{k: v for k, v in meta["train"].items() if k in fields})
    state = init_state(cfg)
    if state.exp.mapping != meta["mapping"] or state.exp.data.contents != meta["contents"]:
        raise CheckpointError(f"{path}: stored mapping disagrees with the rebuilt experiment")
    load_into({"G": state.G, "D": state.D}, tensors)
    state.iteration = int(meta["iteration"])
    return state
