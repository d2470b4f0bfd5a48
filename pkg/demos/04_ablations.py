"""How often to rebuild, and whether the pixel loss matters.

Two sweeps on the debias benchmark, averaged over three seeds:

* the rebuild period m in {1, 5, 10, static}, where "static" builds the
  forget/retain split once from the source model and never revisits it;
* the localisation weight, on (1.0) versus off (0).

A static split keeps forgetting images that the model has long since stopped
over-predicting, so target accuracy drops.  Expect the m sweep to show that
clearly; the localisation effect is small on this benchmark.

    python demos/04_ablations.py        # about a minute
"""
import numpy as np

from sfdadep.adapt import AdaptConfig
from sfdadep.experiments import debias_benchmark, prepare, run_method, with_config
from sfdadep.metrics import format_table

SEEDS = (0, 1, 2)
states = [prepare(debias_benchmark(s)) for s in SEEDS]


def sweep(**kw):
    res = [run_method(st, "dep", with_config(AdaptConfig(seed=s), **kw)) for s, st in zip(SEEDS, states)]
    dom = [int(np.argmax(r.initial_freqs)) for r in res]
    return (
        100 * np.mean([r.report.cl for r in res]),
        100 * np.mean([r.report.pxap for r in res]),
        np.mean([r.final_freqs[d] for r, d in zip(res, dom)]),
    )


rows = []
for m in (1, 5, 10, None):
    cl, px, f = sweep(m=m)
    rows.append(("static" if m is None else m, f"{cl:.1f}", f"{px:.1f}", f"{f:.3f}"))
print("rebuild period")
print(format_table(rows, ("m", "CL", "PxAP", "dominant freq")))

rows = []
for lam in (1.0, 0.0):
    cl, px, f = sweep(lam_loc=lam)
    rows.append((lam, f"{cl:.1f}", f"{px:.2f}", f"{f:.3f}"))
print("localisation weight")
print(format_table(rows, ("lam_loc", "CL", "PxAP", "dominant freq")))
