import copy

import numpy as np
import pytest

from glyphstyle.checkpoint import CheckpointError, read_checkpoint, save_checkpoint
from glyphstyle.numcore import DimensionError, Tensor, no_grad, ops
from glyphstyle.trainer import (
    LOG_HEADER,
    Adam,
    StepReport,
    TrainConfig,
    TrainingDivergence,
    adv_loss_d,
    adv_loss_g,
    build_experiment,
    eval_pairs,
    evaluate,
    init_state,
    l1_loss,
    load_state,
    make_batch,
    sample_batch,
    self_reconstruct,
    train,
    training_step,
)

SHORT = TrainConfig(iterations=3, batch_size=2, log_every=1)


def t(*values):
    return Tensor(np.array(values, dtype=np.float64))


@pytest.fixture(scope="module")
def exp():
    return build_experiment(SHORT)


def fresh(exp, **changes):
    return init_state(SHORT.replace(**changes), exp)


def snapshot(module):
    return [p.data.copy() for p in module.parameters()]


def same(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# losses


@pytest.mark.parametrize(
    "real,fake,expected",
    [((2.0,), (-2.0,), 0.0), ((0.0,), (0.0,), 2.0), ((0.5,), (-1.0,), 0.5), ((0.5, 2.0), (-3.0, 0.0), 0.25 + 0.5)],
)
def test_hinge_d_spot_values(real, fake, expected):
    assert abs(adv_loss_d(t(*real), t(*fake)).item() - expected) < 1e-9


@pytest.mark.parametrize("fakes,expected", [(((0.7,),), -0.7), (((0.0,),), 0.0), (((0.3,), (-1.1,)), -(0.3 - 1.1) / 2)])
def test_hinge_g_spot_values(fakes, expected):
    assert abs(adv_loss_g(*(t(*f) for f in fakes)).item() - expected) < 1e-9


@pytest.mark.parametrize("fn", [lambda x: adv_loss_d(x, t(0.0)), lambda x: adv_loss_d(t(0.0), x), adv_loss_g])
def test_adversarial_losses_reject_non_finite(fn):
    with pytest.raises(FloatingPointError):
        fn(t(np.nan))


def test_l1_identity_and_offset(rng):
    y = Tensor(rng.uniform(0.25, 0.75, size=(2, 1, 4, 4)))
    assert l1_loss(y, y, y).item() == 0.0
    got = l1_loss(Tensor(y.data + 0.25), Tensor(y.data - 0.25), y).item()
    assert abs(got - 0.5) < 1e-12
    assert l1_loss(Tensor(y.data + 0.25), None, y).item() == pytest.approx(0.25, abs=1e-12)


def test_l1_bounded_by_two(rng):
    for _ in range(20):
        a, b, c = (Tensor(rng.random((1, 1, 4, 4))) for _ in range(3))
        assert 0 <= l1_loss(a, b, c).item() <= 2


def test_l1_shape_mismatch():
    with pytest.raises(DimensionError):
        l1_loss(Tensor(np.zeros((1, 1, 4, 4))), None, Tensor(np.zeros((1, 1, 4, 5))))


def test_adam_first_step_is_lr_times_sign():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    p.grad = np.array([0.5, -4.0, 0.0])
    Adam([p], lr=0.1, betas=(0.0, 0.9)).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9, 3.0], atol=1e-6)


# ---------------------------------------------------------------------------
# self-reconstruction and batching


def test_self_reconstruct_uses_main_generator(exp, rng):
    state = fresh(exp)
    b = sample_batch(state)
    with no_grad():
        sr = self_reconstruct(state.G, b.x, b.y)
        direct = state.G(b.x, ops.reshape(b.y, (2, 1, 1, 32, 32)))
        main, sr2, _ = state.G.forward_branches(b.x, b.refs, ops.reshape(b.y, (2, 1, 1, 32, 32)))
    assert sr.shape == b.y.shape
    np.testing.assert_array_equal(sr.data, direct.data)
    np.testing.assert_allclose(sr2.data, sr.data, atol=1e-6)


def test_batch_geometry(exp):
    b = sample_batch(fresh(exp))
    assert b.x.shape == (2, 1, 32, 32) and b.y.shape == (2, 1, 32, 32)
    assert b.refs.shape == (2, 3, 1, 32, 32)
    assert all(s in exp.seen_styles for s in b.styles)
    assert all(g in exp.seen_chars for g in b.glyphs)


def test_fixed_mapping_vs_random_references(exp):
    state = fresh(exp)
    rng = np.random.default_rng(0)
    b = make_batch(state, [0], [exp.seen_chars[0]], rng)
    assert b.ref_glyphs[0] == exp.mapping[exp.seen_chars[0]]
    rs_off = fresh(exp, use_rs=False)
    picks = {tuple(make_batch(rs_off, [0], [exp.seen_chars[0]], rng).ref_glyphs[0]) for _ in range(10)}
    assert len(picks) > 1
    assert all(g in exp.seen_chars for p in picks for g in p)


def test_splits_are_disjoint(exp):
    assert not set(exp.seen_chars) & set(exp.unseen_chars)
    assert not set(exp.seen_styles) & set(exp.unseen_styles)
    assert len(eval_pairs(exp, "ufuc")) == len(exp.unseen_styles) * len(exp.unseen_chars)
    with pytest.raises(ValueError):
        eval_pairs(exp, "bogus")


# ---------------------------------------------------------------------------
# the alternating step


def test_alternation_contract(exp):
    state = fresh(exp)
    g0, d0 = snapshot(state.G), snapshot(state.D)
    seen = {}
    d_step, g_step = state.opt_d.step, state.opt_g.step

    def wrapped_d():
        seen["g_before_d"] = same(snapshot(state.G), g0)
        d_step()
        seen["d_after"] = snapshot(state.D)
        seen["g_after_d"] = same(snapshot(state.G), g0)

    def wrapped_g():
        seen["d_before_g"] = same(snapshot(state.D), seen["d_after"])
        g_step()
        seen["d_after_g"] = same(snapshot(state.D), seen["d_after"])

    state.opt_d.step, state.opt_g.step = wrapped_d, wrapped_g
    training_step(state, sample_batch(state))
    assert seen["g_before_d"] and seen["g_after_d"]
    assert not same(seen["d_after"], d0)
    assert seen["d_before_g"] and seen["d_after_g"]
    assert not same(snapshot(state.G), g0)


def test_zero_l1_weight_makes_generator_update_ignore_targets(exp):
    a = fresh(exp, lambda_l1=0.0, use_sr=False)
    b = copy.deepcopy(a)
    for s in (a, b):
        s.opt_d.step = lambda: None  # isolate the generator update
    batch = sample_batch(a)
    other = copy.copy(batch)
    other.y = Tensor(np.random.default_rng(9).random(batch.y.shape).astype(np.float32))
    training_step(a, batch)
    training_step(b, other)
    assert same(snapshot(a.G), snapshot(b.G))


def test_nonzero_l1_weight_does_see_targets(exp):
    a = fresh(exp, use_sr=False)
    b = copy.deepcopy(a)
    for s in (a, b):
        s.opt_d.step = lambda: None
    batch = sample_batch(a)
    other = copy.copy(batch)
    other.y = Tensor(np.random.default_rng(9).random(batch.y.shape).astype(np.float32))
    training_step(a, batch)
    training_step(b, other)
    assert not same(snapshot(a.G), snapshot(b.G))


def test_step_report_sequence_deterministic(exp):
    runs = []
    for _ in range(2):
        state = fresh(exp)
        runs.append([training_step(state, sample_batch(state)).tsv() for _ in range(3)])
    assert runs[0] == runs[1]
    assert [r.split("\t")[0] for r in runs[0]] == ["0", "1", "2"]


def test_sr_off_reports_zero_sr_loss(exp):
    state = fresh(exp, use_sr=False, use_sam=False)
    rep = training_step(state, sample_batch(state))
    assert rep.loss_l1_sr == 0.0 and rep.is_finite()


def test_divergence_carries_iteration(exp):
    state = fresh(exp)
    training_step(state, sample_batch(state))
    state.G.decoder.to_image.bias.data[:] = np.nan
    with pytest.raises(TrainingDivergence) as info:
        training_step(state, sample_batch(state))
    assert info.value.iteration == 1


# ---------------------------------------------------------------------------
# config


def test_config_defaults_follow_published_settings():
    cfg = TrainConfig()
    assert (cfg.lambda_adv, cfg.lambda_l1, cfg.lr_g, cfg.lr_d) == (1.0, 0.1, 0.0002, 0.0008)
    assert (cfg.k, cfg.heads, cfg.iterations) == (3, 8, 2000)


def test_config_text_round_trip():
    cfg = TrainConfig(use_sam=False, lr_g=3e-4, table="x.tsv", width=0.5)
    assert TrainConfig.from_text(cfg.to_text()) == cfg


def test_config_text_comments_and_errors():
    cfg = TrainConfig.from_text("# desk\nuse_sr = off  # ablate\niterations = 10\n")
    assert cfg.use_sr is False and cfg.iterations == 10
    with pytest.raises(ValueError, match="unknown key"):
        TrainConfig.from_text("nope = 1\n")
    with pytest.raises(ValueError):
        TrainConfig.from_text("use_sam = maybe\n")


@pytest.mark.parametrize("kwargs", [dict(lambda_l1=-1.0), dict(lr_d=0.0), dict(batch_size=0)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# outer loop, evaluation, checkpoints


def test_train_writes_outputs(tmp_path, exp):
    res = train(SHORT, tmp_path, exp=exp)
    log = (tmp_path / "train_log.tsv").read_text().splitlines()
    assert log[0] == LOG_HEADER and len(log) == 4
    assert LOG_HEADER.split("\t") == list(StepReport.FIELDS)
    assert (tmp_path / "checkpoint.bin").exists() and (tmp_path / "config.txt").exists()
    assert res.final["n"] == len(eval_pairs(exp, "ufuc"))
    assert np.isfinite(res.initial["l1_main"]) and np.isfinite(res.final["l1_sr"])


def test_evaluate_is_deterministic(exp):
    state = fresh(exp)
    pairs = eval_pairs(exp, "ufsc")[:5]
    assert evaluate(state, pairs) == evaluate(state, pairs)


def test_checkpoint_round_trip_bit_exact(tmp_path, exp):
    res = train(SHORT, tmp_path, exp=exp)
    loaded = load_state(tmp_path / "checkpoint.bin")
    for mod in ("G", "D"):
        src, dst = getattr(res.state, mod), getattr(loaded, mod)
        for (n1, p1), (n2, p2) in zip(src.named_parameters(), dst.named_parameters()):
            assert n1 == n2 and p1.data.dtype == p2.data.dtype
            assert p1.data.tobytes() == p2.data.tobytes()
        for (_, b1), (_, b2) in zip(src.named_buffers(), dst.named_buffers()):
            assert b1.tobytes() == b2.tobytes()
    assert loaded.iteration == 3


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "bad.bin")


def test_checkpoint_save_is_byte_stable(tmp_path, exp):
    state = fresh(exp)
    save_checkpoint(tmp_path / "a.bin", {"G": state.G}, {"x": 1})
    save_checkpoint(tmp_path / "b.bin", {"G": state.G}, {"x": 1})
    assert (tmp_path / "a.bin").read_bytes() == (tmp_path / "b.bin").read_bytes()
