"""Acceptance criteria, one test per criterion, each logging a PASS/FAIL line.

The benchmark-level criteria (5 to 8) share one set of runs over seeds 0, 1, 2
of the standard debias benchmark: the source model is trained once per seed
and then adapted with each method or ablation arm.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record_criterion
from oracles import mp_normalized_entropy, sorted_forget, sorted_loc, sweep_ap
from sfdadep.adapt import AdaptConfig, adapt_dep, adapt_selftrain, strip_labels
from sfdadep.cli import EXIT_OK, main
from sfdadep.experiments import debias_benchmark, prepare, run_method, with_config
from sfdadep.model import normalized_entropy
from sfdadep.metrics import pxap
from sfdadep.partition import build_forget_set, build_loc_set, dominant_classes

import test_losses
import test_metrics
import test_partition

SEEDS = (0, 1, 2)
ROOT = Path(__file__).resolve().parents[1]


# -- 1 to 4: numerical oracles -----------------------------------------------


def test_criterion_01_gradients():
    t0 = time.perf_counter()
    worst = {}
    for name, fn in (("retain", test_losses.retain_loss), ("forget", test_losses.forget_loss)):
        worst[name] = max(test_losses._check_image_loss(fn, seed) for seed in range(100))
    errs = []
    for seed in range(100):
        p, _, _, z, mask = test_losses.random_instance(seed)
        w, b = p.pixel_w.copy(), p.pixel_b.copy()
        lv = test_losses.loc_loss(p, z, mask)
        num = test_losses.central_difference(
            lambda: test_losses.loc_loss(p.with_heads(pixel_w=w, pixel_b=b), z, mask).value, [w, b]
        )
        errs.append(test_losses.relative_error([lv.grad_pixel_w, lv.grad_pixel_b], num))
    worst["loc"] = max(errs)
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-5 and elapsed < 10
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.2f} s"
    assert record_criterion(1, ok, detail), detail


def test_criterion_02_entropy():
    u = normalized_entropy((0.5, 0.5))
    o = normalized_entropy((1.0, 0.0))
    h = normalized_entropy((0.9, 0.1))
    ref = mp_normalized_entropy((0.9, 0.1))
    ok = abs(u - 1) <= 1e-12 and abs(o) <= 1e-12 and abs(h - 0.46900) <= 1e-5 and abs(h - ref) <= 1e-12
    detail = f"H(uniform)={u!r}, H(one-hot)={o!r}, H(0.9,0.1)={h:.8f} (reference {ref:.8f})"
    assert record_criterion(2, ok, detail), detail


def test_criterion_03_selection_oracles():
    rng = np.random.default_rng(99)
    mismatches = tied = 0
    for _ in range(1000):
        s = test_partition.random_snapshot(rng)
        tied += len(np.unique(s.entropies)) < len(s.entropies)
        dom = dominant_classes(s.frequencies(), 0.05)
        rho = float(rng.choice([0.05, 0.15, 0.25, rng.random()]))
        rho_loc = float(rng.uniform(0.05, 1.0))
        ids, labels, ent = s.ids.tolist(), s.pseudo_labels.tolist(), s.entropies.tolist()
        forget = build_forget_set(s, dom, rho).tolist()
        mismatches += forget != sorted_forget(ids, labels, ent, dom, rho)
        mismatches += build_loc_set(s, rho_loc, set(forget)).tolist() != sorted_loc(ids, labels, ent, s.k, rho_loc, set(forget))
    ok = mismatches == 0 and tied > 0
    detail = f"{mismatches} mismatches over 1000 snapshots ({tied} with tied entropies)"
    assert record_criterion(3, ok, detail), detail


def test_criterion_04_pxap_oracle():
    rng = np.random.default_rng(4)
    worst, biggest, rank_worst = 0.0, 0, 0.0
    for _ in range(200):
        maps, masks = test_metrics.random_instance(rng)
        got = pxap(maps, masks)
        worst = max(worst, abs(got - sweep_ap(np.concatenate(maps), np.concatenate(masks))))
        biggest = max(biggest, sum(m.size for m in maps))
        rank_worst = max(rank_worst, abs(pxap([np.exp(3 * m) for m in maps], masks) - got))
    ok = worst <= 1e-9 and rank_worst <= 1e-12 and biggest <= 10_000
    detail = f"max |pxap - sweep| = {worst:.1e} (up to {biggest} px); monotone transform drift {rank_worst:.1e}"
    assert record_criterion(4, ok, detail), detail


# -- 5 to 8: benchmark behaviour ---------------------------------------------


@pytest.fixture(scope="module")
def bench_runs():
    """Per seed: source-only, self-training, DeP, static DeP and DeP without the loc loss."""
    t0 = time.perf_counter()
    out = []
    for seed in SEEDS:
        state = prepare(debias_benchmark(seed))
        cfg = AdaptConfig(seed=seed)
        none = run_method(state, "none")
        dom = int(np.argmax(none.initial_freqs))
        row = dict(seed=seed, dom=dom, source_cl=state.source_report.cl, none=none, state=state)
        row["selftrain"] = run_method(state, "selftrain", cfg)
        row["dep"] = run_method(state, "dep", cfg)
        row["static"] = run_method(state, "dep", with_config(cfg, m=None))
        row["noloc"] = run_method(state, "dep", with_config(cfg, lam_loc=0.0))
        out.append(row)
    return out, time.perf_counter() - t0


def _mean(runs, fn):
    return float(np.mean([fn(r) for r in runs]))


@pytest.mark.slow
def test_criterion_05_selftraining_amplifies_bias(bench_runs):
    runs, _ = bench_runs
    before = _mean(runs, lambda r: r["none"].initial_freqs[r["dom"]])
    after = _mean(runs, lambda r: r["selftrain"].final_freqs[r["dom"]])
    ok = after >= before and before >= 0.70
    cl = _mean(runs, lambda r: r["selftrain"].report.cl)
    detail = (f"dominant frequency source-only {before:.3f} -> self-training {after:.3f}, "
              f"self-training target CL {100 * cl:.1f} (mean of {len(runs)} seeds)")
    assert record_criterion(5, ok, detail), detail


@pytest.mark.slow
def test_criterion_06_dep_debiases(bench_runs):
    runs, total = bench_runs
    before = _mean(runs, lambda r: r["none"].initial_freqs[r["dom"]])
    freq = _mean(runs, lambda r: r["dep"].final_freqs[r["dom"]])
    cl_none = _mean(runs, lambda r: r["none"].report.cl)
    cl_dep = _mean(runs, lambda r: r["dep"].report.cl)
    src_cl = min(r["source_cl"] for r in runs)
    ok = 0.35 <= freq <= 0.65 and cl_dep - cl_none >= 0.05 and before >= 0.70 and total < 300
    detail = (
        f"dominant frequency {before:.3f} -> {freq:.3f}; target CL {100 * cl_none:.1f} -> {100 * cl_dep:.1f} "
        f"(+{100 * (cl_dep - cl_none):.1f} pts); min source CL {100 * src_cl:.1f}; all {len(runs)} seeds x 5 arms incl. data and source training in {total:.0f} s"
    )
    assert record_criterion(6, ok, detail), detail


@pytest.mark.slow
def test_criterion_07_localisation_loss_helps_pxap(bench_runs):
    runs, _ = bench_runs
    with_loc = _mean(runs, lambda r: r["dep"].report.pxap)
    without = _mean(runs, lambda r: r["noloc"].report.pxap)
    ok = with_loc >= without
    detail = f"mean target PxAP lam_loc=1: {100 * with_loc:.2f}, lam_loc=0: {100 * without:.2f}"
    assert record_criterion(7, ok, detail), detail


@pytest.mark.slow
def test_criterion_08_dynamic_beats_static(bench_runs):
    runs, _ = bench_runs
    dyn = _mean(runs, lambda r: r["dep"].report.cl)
    static = _mean(runs, lambda r: r["static"].report.cl)
    ok = dyn >= static
    detail = f"mean target CL m=5: {100 * dyn:.2f}, static: {100 * static:.2f}"
    assert record_criterion(8, ok, detail), detail


# -- 9 to 11 ------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_09_degeneracy(bench_runs):
    runs, _ = bench_runs
    results = []
    for r in runs:
        state = r["state"]
        view = strip_labels(state.target_data["train"])
        cfg = AdaptConfig(seed=r["seed"], lam_forget=0.0, lam_loc=0.0, rho=0.0)
        _, a = adapt_dep(state.source_params, view, cfg)
        _, b = adapt_selftrain(state.source_params, view, cfg)
        results.append(a.same_as(b))
    ok = all(results)
    detail = f"degenerate DeP vs self-training bit-identical on seeds {list(SEEDS)}: {results}"
    assert record_criterion(9, ok, detail), detail


def _cli_pipeline(out):
    steps = [
        ["gen", "--out", out],
        ["train-source", "--out", out],
        ["adapt", "--out", out, "--method", "dep"],
        ["adapt", "--out", out, "--method", "selftrain"],
        ["adapt", "--out", out, "--method", "none"],
        ["eval", "--out", out, "--params", out / "adapt" / "dep-debias" / "params.bin"],
        ["report", *(out / "adapt" / f"{m}-debias" for m in ("dep", "selftrain", "none")), "--out", out / "report"],
    ]
    return [main([str(a) for a in s]) for s in steps]


@pytest.mark.slow
def test_criterion_10_pipeline_determinism(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    codes = _cli_pipeline(a) + _cli_pipeline(b)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.suffix in (".bin", ".csv"))
    differing = [str(f) for f in files if (a / f).read_bytes() != (b / f).read_bytes()]
    # the resolved config echoes the output directory, so it is compared with that line removed
    strip = lambda p: [l for l in p.read_text().splitlines() if not l.startswith("out =")]
    same_cfg = strip(a / "config.resolved.txt") == strip(b / "config.resolved.txt")
    ok = all(c == EXIT_OK for c in codes) and not differing and same_cfg and len(files) >= 10
    detail = f"{len(files)} params/CSV files compared, {len(differing)} differ {differing[:3]}"
    assert record_criterion(10, ok, detail), detail


def test_criterion_11_non_reproduction_statement():
    text = (ROOT / "README.md").read_text(encoding="utf-8")
    ok = "not reproduced" in text and "GlaS" in text and "CAMELYON" in text
    detail = "README states that absolute real-data scores are not reproduced" if ok else "statement missing from README"
    assert record_criterion(11, ok, detail), detail
