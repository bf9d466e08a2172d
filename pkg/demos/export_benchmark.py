"""Write a synthetic tracking sequence to disk (PPM frames plus groundtruth.txt) and track it.

Run: python3 demos/export_benchmark.py [output_dir]
"""
import sys

from prunetrack import tracking, zoo

out = sys.argv[1] if len(sys.argv) > 1 else "demo_sequence"
seq = tracking.gen_sequence(seed=7, length=20)
path = tracking.export_sequence(seq, out)
print(f"wrote {len(seq)} frames to {path}")

result = tracking.track(zoo.build_mini_alex(seed=0), seq)
metrics = tracking.compute_metrics([result])
print(f"untrained mini_alex: AO {metrics.ao:.3f}, mean center error {result.center_errors[1:].mean():.1f}px")
