"""
Which parts of the network matter?
==================================

Each variant removes one component and is trained on the same log with the
same seed.  R_ad is the ad revenue summed over greedy evaluation episodes.
Pass seeds on the command line (default: 0).  Seven variants take a couple
of minutes per seed on one core.
"""

import sys

from dpin.harness import TABLE_NAMES, bench_config, run_ablation

seeds = [int(s) for s in sys.argv[1:]] or [0]
rows = run_ablation(bench_config(), seeds=seeds)
print(f"{'variant':<28}{'seed':>5}{'R_ad':>10}{'R_fee':>10}{'loss':>8}")
for r in sorted(rows, key=lambda r: (r.seed, -r.R_ad)):
    print(f"{TABLE_NAMES[r.variant]:<28}{r.seed:>5}{r.R_ad:>10.2f}{r.R_fee:>10.2f}{r.loss:>8.3f}")
