"""Bootstrap SD against model SE at the record, dataset and condition levels.

Simulates the reference study (or reads an estimates.csv), refits the
main-effects power metamodel by OLS in every replicate, and prints the
calibration table for the estimator main effects.

    python scripts/bootstrap_calibration.py [--estimates PATH] [--B 200]
"""

import argparse
import time

from simmeta import io
from simmeta.bootstrap import LEVELS, bootstrap_metamodel, calibration_summary
from simmeta.config import reference_config
from simmeta.metamodel import MetamodelSpec
from simmeta.study import run_study


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--estimates")
    ap.add_argument("--B", type=int, default=200)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--study-seed", type=int, default=20261016)
    ap.add_argument("--workers", type=int, default=4)
    args = ap.parse_args()

    if args.estimates:
        est = io.read_csv(args.estimates)
    else:
        cfg = reference_config()
        est = run_study(cfg.conditions(), cfg.reps, args.study_seed, workers=args.workers,
                        alternative=cfg.alternative)
    spec = MetamodelSpec("power", "individual", False, "none")
    reports = []
    for level in LEVELS:
        t = time.time()
        reports.append(bootstrap_metamodel(spec, level, args.B, estimates=est, seed=args.seed,
                                           workers=args.workers))
        print(f"{level}: {time.time() - t:.1f}s, {reports[-1].n_dropped} dropped")
    table = calibration_summary(reports)
    table = table[table["coefficient"].str.startswith("estimator")]
    print(table.to_string(index=False, float_format=lambda x: f"{x:.4f}"))


if __name__ == "__main__":
    main()
