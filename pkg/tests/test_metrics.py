import numpy as np
import pytest

from oracles import sweep_ap
from sfdadep.metrics import (
    REPORT_COLUMNS,
    MetricsReport,
    balance_report,
    cl_accuracy,
    pxap,
    reports_to_csv,
    reports_to_table,
)


def random_instance(rng):
    n = int(np.exp(rng.uniform(np.log(10), np.log(10_000))))
    levels = int(rng.choice([2, 5, 50, n]))
    scores = rng.integers(0, levels, n) / levels + (0 if rng.random() < 0.5 else rng.normal(0, 1e-3, n))
    truth = rng.random(n) < rng.uniform(0.05, 0.9)
    truth[rng.integers(n)] = True
    # split into a few "images" of unequal size
    cuts = np.sort(rng.integers(0, n, 3))
    return np.split(scores, cuts), np.split(truth.astype(np.uint8), cuts)


def test_pxap_matches_threshold_sweep_on_200_instances():
    rng = np.random.default_rng(7)
    for _ in range(200):
        maps, masks = random_instance(rng)
        assert abs(pxap(maps, masks) - sweep_ap(np.concatenate(maps), np.concatenate(masks))) <= 1e-9


@pytest.mark.parametrize("transform", [np.exp, lambda s: 3 * s - 4, lambda s: s ** 3, np.arctan])
def test_pxap_rank_invariance(transform):
    rng = np.random.default_rng(1)
    for _ in range(20):
        maps, masks = random_instance(rng)
        assert pxap([transform(m) for m in maps], masks) == pytest.approx(pxap(maps, masks), abs=1e-12)


def test_pxap_closed_forms():
    mask = np.random.default_rng(0).random((2, 8, 8)) < 0.3
    assert pxap(list(mask.astype(float)), list(mask)) == 1.0
    assert pxap([np.full((8, 8), 0.4)] * 2, list(mask)) == pytest.approx(mask.mean(), abs=1e-15)
    with pytest.raises(ValueError):
        pxap([np.ones((2, 2))], [np.zeros((2, 2))])
    with pytest.raises(ValueError):
        pxap([np.ones((2, 2))], [np.ones((3, 2))])


def test_cl_accuracy():
    assert cl_accuracy([0, 1, 1], [0, 1, 1]) == 1.0
    assert cl_accuracy([1, 0], [0, 1]) == 0.0
    assert cl_accuracy([0, 1, 1, 0], [0, 1, 1, 1]) == 0.75
    rng = np.random.default_rng(0)
    a, b = rng.integers(0, 3, 50), rng.integers(0, 3, 50)
    perm = rng.permutation(50)
    assert cl_accuracy(a[perm], b[perm]) == cl_accuracy(a, b)
    with pytest.raises(ValueError):
        cl_accuracy([], [])
    with pytest.raises(ValueError):
        cl_accuracy([0], [0, 1])


@pytest.mark.parametrize(
    "labels, freqs, imbalance",
    [([1] * 6, (0.0, 1.0), 1.0), ([0, 1] * 5, (0.5, 0.5), 0.5), ([0] * 7 + [1] * 3, (0.7, 0.3), 0.7)],
)
def test_balance_report(labels, freqs, imbalance):
    f, imb, ent = balance_report(labels, k=2, entropies=np.full(len(labels), 0.25))
    assert np.allclose(f, freqs) and imb == imbalance and ent == 0.25


def test_balance_report_rejects_empty():
    with pytest.raises(ValueError):
        balance_report([], k=2)


def _report(**kw):
    base = dict(cl=0.9, pxap=0.5, class_freqs=(0.4, 0.6), imbalance=0.6, mean_entropy=0.3, n_samples=10, domain="t")
    base.update(kw)
    return MetricsReport(**base)


def test_report_rejects_missing_fields():
    with pytest.raises(ValueError):
        _report(pxap=float("nan"))
    with pytest.raises(ValueError):
        _report(n_samples=0)


def test_report_serialisations():
    text = reports_to_table([_report(), _report(domain="other", pxap=1.0)])
    header = text.splitlines()[0].split()
    assert tuple(header) == REPORT_COLUMNS
    assert "100.0" in text
    csv_text = reports_to_csv([_report()])
    assert csv_text.splitlines()[0].split(",")[:3] == list(REPORT_COLUMNS)
    assert csv_text.endswith("\r\n")
