"""Linear sparse propagation vs quadratic dense attention.

Doubling the location count should roughly double the sparse time and
quadruple the dense time; the log-log slopes make the complexity gap
visible directly.

Run: python3 demos/06_scaling_benchmark.py
"""

from clickseg.graph import benchmark_scaling

report = benchmark_scaling(c=32, m=5, sizes=[1024, 2048, 4096, 8192],
                           runs=5, dense_limit=4096, seed=0)
print(f"{'N':>6}  {'sparse ms':>10}  {'dense ms':>10}")
for row in report.rows:
    dense = f"{row.dense_ms:10.2f}" if row.dense_ms is not None else "   skipped"
    print(f"{row.n:6d}  {row.sparse_ms:10.3f}  {dense}")
print(f"log-log slopes: sparse {report.sparse_slope:.2f} (~1 = linear), "
      f"dense {report.dense_slope:.2f} (~2 = quadratic)")
print(f"doubling ratios: sparse {report.doubling_ratio('sparse'):.2f}, "
      f"dense {report.doubling_ratio('dense'):.2f}")
