"""Naive self-training makes a biased model more biased.

A source model is trained on the un-shifted domain and applied to the darker
target.  It already predicts "abnormal" far more often than the balanced
target warrants.  Fitting the model to its own pseudo-labels then pushes the
dominant class further, epoch by epoch, while accuracy on the target stalls.

    python demos/02_bias_amplification.py
"""
import numpy as np

from sfdadep.adapt import AdaptConfig
from sfdadep.experiments import debias_benchmark, prepare, run_method

state = prepare(debias_benchmark(seed=0))
print(f"source test CL {100 * state.source_report.cl:.1f}")

none = run_method(state, "none")
dom = int(np.argmax(none.initial_freqs))
print(f"source-only on target: class {dom} predicted for {100 * none.initial_freqs[dom]:.1f}% of images, "
      f"CL {100 * none.report.cl:.1f}")

st = run_method(state, "selftrain", AdaptConfig(seed=0))
print("\nepoch  dominant-class frequency  val CL")
for row in st.record.rows[::5] + st.record.rows[-1:]:
    bar = "#" * int(40 * row.class_freqs[dom])
    print(f"{row.epoch:5d}  {row.class_freqs[dom]:.3f} {bar:40s}  {100 * row.val_cl:.1f}")
print(f"\nafter self-training: CL {100 * st.report.cl:.1f}")
