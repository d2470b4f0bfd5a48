import numpy as np
import pytest

from sfdadep.adapt import (
    AdaptConfig,
    DivergenceError,
    SourceConfig,
    TargetView,
    adapt_dep,
    adapt_selftrain,
    sgd_step,
    strip_labels,
    train_source,
    write_record,
)
from sfdadep.losses import retain_loss
from sfdadep.metrics import make_evaluator
from sfdadep.model import embed_batch, init_params, pooled
from sfdadep.synthbench import DomainSpec, SplitCounts, generate_dataset

H = 16


@pytest.fixture(scope="module")
def toy():
    src = generate_dataset(DomainSpec(seed=21, height=H, width=H), SplitCounts(80, 0, 0, 0), 2)
    tgt = generate_dataset(DomainSpec(seed=22, height=H, width=H, bias=(-0.05,) * 3), SplitCounts(60, 20, 4, 0), 2)
    params = init_params(0, height=H, width=H)
    params = train_source(src["train"], SourceConfig(epochs=30, pixel_epochs=3), params)
    return params, tgt


def small_config(**kw):
    base = dict(epochs=4, m=2, batch_size=16, tau=0.0, seed=3)
    base.update(kw)
    return AdaptConfig(**base)


def test_sgd_step_arithmetic():
    p = init_params(0, d=3, k=2, n_f=1, height=4, width=4, smooth=1)
    zero = [np.zeros_like(a) for a in (p.image_w, p.image_b, p.pixel_w, p.pixel_b)]
    assert sgd_step(p, zero, 0.1).heads_bytes() == p.heads_bytes()
    pattern = [np.eye(*p.image_w.shape), np.ones(2), np.eye(2, 3), np.arange(2.0)]
    q = sgd_step(p, pattern, 1.0)
    assert np.array_equal(q.image_w, -pattern[0]) and np.array_equal(q.pixel_b, -pattern[3])
    assert q.extractor_bytes() == p.extractor_bytes()
    with pytest.raises(DivergenceError):
        sgd_step(p, [np.full_like(zero[0], np.nan)] + zero[1:], 0.1)
    with pytest.raises(ValueError):
        sgd_step(p, zero, 0.0)


def test_sgd_step_descends_on_cross_entropy():
    rng = np.random.default_rng(0)
    p = init_params(0, d=4, k=3, n_f=1, height=4, width=4, smooth=1)
    x, y = rng.normal(size=(10, 4)), rng.integers(0, 3, 10)
    before = retain_loss(p, x, y)
    after = retain_loss(sgd_step(p, before, 1e-3), x, y)
    assert after.value < before.value


def test_source_training_zero_epochs_gives_uniform_model(toy):
    params, tgt = toy
    p = train_source(tgt["train"], SourceConfig(epochs=0), params)
    assert not p.image_w.any() and not p.image_b.any() and not p.pixel_w.any()


def test_source_training_is_deterministic(toy):
    params, _ = toy
    src = generate_dataset(DomainSpec(seed=21, height=H, width=H), SplitCounts(80, 0, 0, 0), 2)
    again = train_source(src["train"], SourceConfig(epochs=30, pixel_epochs=3), init_params(0, height=H, width=H))
    assert again.heads_bytes() == params.heads_bytes()


def test_adaptation_refuses_labelled_input(toy):
    params, tgt = toy
    with pytest.raises(TypeError):
        adapt_dep(params, tgt["train"], small_config())
    with pytest.raises(ValueError):
        adapt_dep(params, TargetView(np.zeros(0, np.int64), np.zeros((0, H, H, 3))), small_config())


def test_target_view_carries_no_labels(toy):
    _, tgt = toy
    view = strip_labels(tgt["train"])
    assert set(vars(view)) == {"ids", "pixels"}


def test_zero_epochs_leave_params_unchanged(toy):
    params, tgt = toy
    for fn in (adapt_dep, adapt_selftrain):
        out, rec = fn(params, strip_labels(tgt["train"]), small_config(epochs=0))
        assert out.heads_bytes() == params.heads_bytes() and rec.rows == []


def test_degenerate_dep_equals_selftrain_bit_for_bit(toy):
    params, tgt = toy
    view = strip_labels(tgt["train"])
    cfg = small_config(lam_forget=0.0, lam_loc=0.0, rho=0.0)
    _, a = adapt_dep(params, view, cfg)
    _, b = adapt_selftrain(params, view, cfg)
    assert a.same_as(b)


def test_adaptation_is_deterministic_and_keeps_extractor(toy, tmp_path):
    params, tgt = toy
    view = strip_labels(tgt["train"])
    ev = make_evaluator(tgt["val_cl"], tgt["val_pxap"])
    p1, r1 = adapt_dep(params, view, small_config(), evaluator=ev, audit_dir=tmp_path / "audit")
    p2, r2 = adapt_dep(params, view, small_config(), evaluator=ev)
    assert r1.same_as(r2)
    assert p1.extractor_bytes() == params.extractor_bytes()
    assert p1.heads_bytes() != params.heads_bytes()
    assert len(r1.rows) == 4 and all(np.isfinite(r.val_cl) and np.isfinite(r.val_pxap) for r in r1.rows)
    assert sorted(f.name for f in (tmp_path / "audit").iterdir()) == [
        "partition_epoch_0000.txt", "partition_epoch_0002.txt"
    ]
    write_record(r1, tmp_path / "run")
    header = (tmp_path / "run" / "record.csv").read_text().splitlines()[0]
    assert header == "epoch,loss_retain,loss_forget,loss_loc,loss_total,freq_class_0,freq_class_1,val_cl,val_pxap"


def test_static_mode_builds_once(toy):
    params, tgt = toy
    _, rec = adapt_dep(params, strip_labels(tgt["train"]), small_config(m=None))
    assert len(rec.partitions) == 1


def test_grid_enforcement():
    with pytest.raises(ValueError):
        AdaptConfig(lr=0.5).validate()
    assert AdaptConfig(lr=0.5).validate(strict_grid=False).lr == 0.5
    with pytest.raises(ValueError):
        AdaptConfig(rho_loc=0.0).validate()
    with pytest.raises(ValueError):
        AdaptConfig(theta_fg=0.1, theta_bg=0.2).validate()


def test_initial_frequencies_match_direct_prediction(toy):
    params, tgt = toy
    view = strip_labels(tgt["train"])
    _, rec = adapt_selftrain(params, view, small_config(epochs=1))
    logits = pooled(embed_batch(params, view.pixels)) @ params.image_w.T + params.image_b
    direct = np.bincount(logits.argmax(1), minlength=2) / len(view)
    assert np.allclose(rec.initial_class_freqs, direct)
