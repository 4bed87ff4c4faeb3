"""Model 1 and Model 2 power metamodels under two-sided and one-sided tests.

The same datasets are analysed twice (the alternative only changes the
p-value), then the key power-metamodel quantities are printed side by side.

    python scripts/compare_sidedness.py [--seed 20261016] [--workers 4]
"""

import argparse
import math

import pandas as pd

from simmeta.config import reference_config
from simmeta.metamodel import aggregate_results, build_preset, prediction_interval
from simmeta.study import run_study

ADJ = "estimator[adjusted]"


def summarise(est):
    agg = aggregate_results(est)
    m1 = build_preset(1, "power", est, agg)
    m2 = build_preset(2, "power", est, agg)
    out = {"M2 intercept": m2.coef_of("(Intercept)"), "M1 adjusted": m1.coef_of(ADJ),
           "M1 psi_adjusted": math.sqrt(m1.psi2(ADJ)),
           "M1 residual var": m1.fit.sigma2}
    for name, r in (("M1", m1), ("M2", m2)):
        lo, hi = prediction_interval(r.coef_of(ADJ), r.se_of(ADJ) ** 2, r.psi2(ADJ))
        out[f"{name} PI width"] = hi - lo
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=20261016)
    ap.add_argument("--workers", type=int, default=4)
    args = ap.parse_args()
    cfg = reference_config()
    cols = {}
    for alt in ("two-sided", "greater"):
        est = run_study(cfg.conditions(), cfg.reps, args.seed, workers=args.workers,
                        alternative=alt)
        cols[alt] = summarise(est)
    print(pd.DataFrame(cols).to_string(float_format=lambda x: f"{x:.2f}"))


if __name__ == "__main__":
    main()
