"""The standard debias benchmark and a small in-process pipeline around it.

The benchmark darkens every channel of the target domain a little.  A source
model trained on the un-shifted domain then calls most balanced target
images abnormal, which is the skew the adaptation methods are compared on.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .adapt import AdaptConfig, SourceConfig, adapt_dep, adapt_selftrain, strip_labels, train_source
from .metrics import evaluate, make_evaluator
from .model import embed_batch, init_params, pooled
from .partition import predict_all
from .synthbench import DomainSpec, SplitCounts, generate_dataset

METHODS = ("dep", "selftrain", "none")


@dataclass(frozen=True)
class Benchmark:
    source: DomainSpec
    target: DomainSpec
    source_counts: SplitCounts
    target_counts: SplitCounts
    k: int = 2
    model_seed: int = 0
    d: int = 16
    n_f: int = 8


def debias_benchmark(seed=0) -> Benchmark:
    return Benchmark(
        source=DomainSpec(seed=1000 + seed),
        target=DomainSpec(bias=(-0.05, -0.05, -0.05), seed=2000 + seed),
        source_counts=SplitCounts(train=400, val_cl=100, val_pxap=10, test=200),
        target_counts=SplitCounts(train=300, val_cl=50, val_pxap=10, test=200),
        model_seed=seed,
    )


@dataclass
class PipelineState:
    bench: Benchmark
    source_data: object
    target_data: object
    source_params: object
    source_report: object = None
    results: dict = field(default_factory=dict)


def prepare(bench: Benchmark, source_config: SourceConfig | None = None) -> PipelineState:
    """Generate both domains and train the source model."""
    src = generate_dataset(bench.source, bench.source_counts, bench.k)
    tgt = generate_dataset(bench.target, bench.target_counts, bench.k)
    params = init_params(bench.model_seed, d=bench.d, k=bench.k, n_f=bench.n_f,
                         channels=bench.source.channels, height=bench.source.height, width=bench.source.width)
    cfg = source_config or SourceConfig(seed=bench.model_seed)
    params = train_source(src["train"], cfg, params)
    state = PipelineState(bench, src, tgt, params)
    state.source_report = evaluate(params, src["test"], use_pixel_head=False, domain="source")
    return state


@dataclass
class MethodResult:
    method: str
    params: object
    record: object
    report: object  # target test MetricsReport
    initial_freqs: np.ndarray
    final_freqs: np.ndarray

    def dominant_frequency(self, cls):
        return float(self.final_freqs[cls])


def run_method(state: PipelineState, method: str, config: AdaptConfig | None = None) -> MethodResult:
    """Adapt the source model on the target train split and evaluate on target test.

    ``none`` is the source-only model, scored with its normalised CAMs.
    """
    config = config or AdaptConfig(seed=state.bench.model_seed)
    tgt = state.target_data
    view = strip_labels(tgt["train"])
    evaluator = make_evaluator(tgt["val_cl"], tgt["val_pxap"])
    if method == "dep":
        params, record = adapt_dep(state.source_params, view, config, evaluator=evaluator)
    elif method == "selftrain":
        params, record = adapt_selftrain(state.source_params, view, config, evaluator=evaluator)
    elif method == "none":
        params, record = state.source_params, None
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    report = evaluate(params, tgt["test"], use_pixel_head=method != "none", domain="target")
    pz = pooled(embed_batch(state.source_params, view.pixels))
    init = predict_all(state.source_params, view.ids, pz).frequencies()
    final = np.asarray(record.final_class_freqs) if record is not None else init
    res = MethodResult(method, params, record, report, init, final)
    state.results[method] = res
    return res


def source_dominant_class(state: PipelineState) -> int:
    res = state.results.get("none") or run_method(state, "none")
    return int(np.argmax(res.initial_freqs))


def with_config(config: AdaptConfig, **kw) -> AdaptConfig:
    return replace(config, **kw)
