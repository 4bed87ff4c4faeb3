"""Command-line pipeline: run -> aggregate -> fit -> eb / bootstrap -> report.

Every subcommand reads earlier artifacts by path and writes into ``--out``
(default: the directory of its main input). CSV floats use 12 significant
digits; all writes are atomic.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import io
from .bootstrap import LEVELS, bootstrap_metamodel, calibration_summary
from .config import ConfigError, StudyConfig, load, reference_config, reference_config_text
from .metamodel import (CONJOINT_COLUMNS, METRICS, WEIGHTS, AggregationError, MetamodelResult,
                        MetamodelSpec, SpecError, aggregate_results, conjoint_table, eb_records,
                        fit_spec, fit_spec_at, link_scale_effects, prediction_interval,
                        preset_spec, reliability, SLOPES)
from .study import ConfigurationError, run_study

log = logging.getLogger("simmeta")

EB_COLUMNS = ["metric", "preset", "group", "condition_id", "effect", "deviation", "composed",
              "cond_sd", "reliability"]
REPORT_METRICS = ["bias", "coverage", "false_positive", "power", "sq_error", "true_se"]


class CliError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers

def _out_dir(args, default: Path) -> Path:
    out = Path(args.out) if args.out else default
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_estimates(path, force) -> tuple[pd.DataFrame, dict | None]:
    path = Path(path)
    if not path.exists():
        raise CliError(f"estimates file {path} not found")
    man = io.check_estimates(path, force=force)
    return io.read_csv(path), man


def _fit_name(preset, metric, weights, tag=None) -> str:
    name = f"fit_{preset}_{metric}"
    if weights != "none":
        name += f"_{weights}"
    if tag:
        name += f"_{tag}"
    return name


def _default_link(metric, preset) -> str:
    return "sqrt" if metric == "sq_error" and preset in (1, 2, 4) else "identity"


def fit_document(res: MetamodelResult, preset: int, estimates_sha: str | None,
                 config_sha: str | None) -> dict:
    spec = res.spec
    table = res.coef_table()
    doc = {
        "preset": preset,
        "metric": spec.metric,
        "spec": dataclasses.asdict(spec),
        "n_obs": int(len(res.y)),
        "n_conditions": int(res.data["condition_id"].nunique()),
        "coefficients": table.to_dict(orient="records"),
        "vcov": res.cov,
        "vcov_type": "CR1" if res.n_clusters else "model",
        "n_clusters": res.n_clusters,
        "estimates_sha256": estimates_sha,
        "config_sha256": config_sha,
    }
    if res.is_mixed:
        fit = res.fit
        doc.update({
            "family": fit.family,
            "link": fit.link,
            "n_groups": fit.n_groups,
            "variance_components": fit.varcomp_table().to_dict(orient="records"),
            "residual_variance": fit.sigma2,
            "theta": fit.theta,
            "deviance": fit.deviance,
            "convergence": {"converged": fit.converged, "n_evals": fit.n_evals,
                            "boundary": fit.boundary, "message": fit.message},
        })
        pis = {}
        for slope in SLOPES:
            if slope in res.columns:
                lo, hi = prediction_interval(res.coef_of(slope), res.se_of(slope) ** 2,
                                             res.psi2(slope))
                pis[slope] = {"lo": lo, "hi": hi, "width": hi - lo, "psi2": res.psi2(slope)}
        doc["prediction_intervals"] = pis
        if "condition_id" in fit.group_names:
            doc["reliability"] = reliability(res)
        if fit.link == "sqrt":
            doc["rmse_scale"] = link_scale_effects(res).to_dict(orient="records")
    else:
        doc["residual_variance"] = float(res.fit.sigma2)
    return doc


def _load_doc(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError(f"fit document {path} not found") from None


def _spec_from_doc(doc) -> MetamodelSpec:
    return MetamodelSpec(**doc["spec"])


def _result_from_doc(doc, estimates) -> MetamodelResult:
    spec = _spec_from_doc(doc)
    theta = doc.get("theta")
    return fit_spec_at(spec, np.asarray(theta, float) if theta is not None else None, estimates)


def _eb_frame(res: MetamodelResult, preset) -> pd.DataFrame:
    recs = eb_records(res)
    return pd.DataFrame([dict(metric=res.spec.metric, preset=preset, group=r.group,
                              condition_id=r.level, effect=r.effect, deviation=r.deviation,
                              composed=r.composed, cond_sd=r.cond_sd,
                              reliability=r.reliability) for r in recs], columns=EB_COLUMNS)


# ---------------------------------------------------------------------------
# subcommands

def cmd_run(args) -> int:
    if args.config == "reference":
        cfg, text = reference_config(), reference_config_text()
    else:
        text = Path(args.config).read_text()
        cfg = load(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.reps is not None:
        cfg.reps = args.reps
    workers = args.workers if args.workers is not None else cfg.workers
    out = _out_dir(args, Path(cfg.output_dir))
    conds = cfg.conditions()
    log.info("running %d conditions x %d replications", len(conds), cfg.reps)
    df = run_study(conds, cfg.reps, cfg.seed, cfg.estimators, workers=workers,
                   alternative=cfg.alternative)
    sha = io.write_csv(df, out / "estimates.csv")
    n_failed = int((df["flag"].astype(str) != "").sum())
    manifest = {
        "config_sha256": io.sha256_text(cfg.dump()),
        "config_source_sha256": io.sha256_text(text),
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "reps": cfg.reps,
        "versions": io.versions(),
        "row_counts": {"conditions": len(conds), "datasets": len(conds) * cfg.reps,
                       "records": int(len(df)), "flagged": n_failed},
        "files": {"estimates.csv": {"sha256": sha}},
        "artifacts": {},
    }
    io.write_json(manifest, out / io.MANIFEST)
    print(f"wrote {out / 'estimates.csv'} ({len(df)} records, {n_failed} flagged)")
    return 0


def cmd_aggregate(args) -> int:
    est, man = _load_estimates(args.estimates, args.force)
    out = _out_dir(args, Path(args.estimates).parent)
    agg = aggregate_results(est)
    sha = io.write_csv(agg, out / "aggregates.csv")
    if man is not None and (out / io.MANIFEST).exists():
        io.record_artifact(out / io.MANIFEST, "aggregates.csv", sha)
    print(f"wrote {out / 'aggregates.csv'} ({len(agg)} rows)")
    return 0


def cmd_fit(args) -> int:
    est, man = _load_estimates(args.estimates, args.force)
    out = _out_dir(args, Path(args.estimates).parent)
    link = args.link or _default_link(args.metric, args.preset)
    spec = preset_spec(args.preset, args.metric, weights=args.weights, link=link,
                       subset=args.subset)
    res = fit_spec(spec, est)
    doc = fit_document(res, args.preset, io.sha256_file(args.estimates),
                       man.get("config_sha256") if man else None)
    name = _fit_name(args.preset, args.metric, args.weights, args.tag)
    sha = io.write_json(doc, out / f"{name}.json")
    io.write_csv(res.coef_table(), out / f"{name}_coef.csv")
    if res.is_mixed:
        io.write_csv(res.fit.varcomp_table(), out / f"{name}_varcomp.csv")
    if (out / io.MANIFEST).exists():
        io.record_artifact(out / io.MANIFEST, f"{name}.json", sha)
    print(res.coef_table().to_string(index=False, float_format=lambda x: f"{x:.4g}"))
    if res.is_mixed and not res.fit.converged:
        print("warning: optimiser did not converge", file=sys.stderr)
    print(f"wrote {out / (name + '.json')}")
    return 0


def cmd_eb(args) -> int:
    est, _ = _load_estimates(args.estimates, args.force)
    out = _out_dir(args, Path(args.estimates).parent)
    frames = []
    for path in args.fits:
        doc = _load_doc(path)
        spec = _spec_from_doc(doc)
        if not spec.is_mixed:
            print(f"skipping {path}: not a mixed metamodel", file=sys.stderr)
            continue
        frames.append(_eb_frame(_result_from_doc(doc, est), doc["preset"]))
    if not frames:
        raise CliError("no mixed-model fit documents given")
    eb = pd.concat(frames, ignore_index=True)
    sha = io.write_csv(eb, out / "eb.csv")
    if (out / io.MANIFEST).exists():
        io.record_artifact(out / io.MANIFEST, "eb.csv", sha)
    print(f"wrote {out / 'eb.csv'} ({len(eb)} rows)")
    return 0


def cmd_bootstrap(args) -> int:
    est, _ = _load_estimates(args.estimates, args.force)
    out = _out_dir(args, Path(args.estimates).parent)
    link = args.link or _default_link(args.metric, args.preset)
    spec = preset_spec(args.preset, args.metric, weights=args.weights, link=link,
                       subset=args.subset)
    if args.refit == "ols":
        spec = dataclasses.replace(spec, random="none", cluster=None, link="identity")
    levels = list(LEVELS) if "all" in args.bootstrap_level else args.bootstrap_level
    reports = []
    for lv in levels:
        rep = bootstrap_metamodel(spec, lv, args.B, estimates=est, seed=args.seed,
                                  workers=args.workers or 1)
        log.info("%s level: %d of %d replicates dropped", lv, rep.n_dropped, rep.B)
        reports.append(rep)
    table = pd.concat([r.table() for r in reports], ignore_index=True)
    summary = calibration_summary(reports)
    table = table.merge(summary[["level", "coefficient", "flag"]], on=["level", "coefficient"])
    sha = io.write_csv(table, out / "bootstrap.csv")
    if (out / io.MANIFEST).exists():
        io.record_artifact(out / io.MANIFEST, "bootstrap.csv", sha)
    print(summary.to_string(index=False, float_format=lambda x: f"{x:.4g}"))
    return 0


def _pick_fit(docs: list[dict], metric: str) -> dict | None:
    cands = [d for d in docs if d["metric"] == metric]
    for preset in (2, 4, 3, 1):
        for d in cands:
            if d["preset"] == preset:
                return d
    return None


def summary_markdown(per_metric: dict, absent: list[str]) -> str:
    lines = ["# Metamodel summary", ""]
    for metric, info in per_metric.items():
        doc, res = info["doc"], info["result"]
        lines += [f"## {metric}", "",
                  f"Preset {doc['preset']} ({doc['spec']['level']} data, random structure "
                  f"`{doc['spec']['random']}`, link `{doc['spec']['link']}`), "
                  f"{doc['n_obs']} observations, {doc['n_conditions']} conditions.", "",
                  "| effect | estimate | SE | 95% PI | PI width | EB inner 95% |",
                  "|---|---|---|---|---|---|"]
        for slope in SLOPES:
            if slope not in res.columns:
                continue
            est, se = res.coef_of(slope), res.se_of(slope)
            pi = doc.get("prediction_intervals", {}).get(slope)
            pi_txt = f"[{pi['lo']:.4g}, {pi['hi']:.4g}]" if pi else "n/a"
            w_txt = f"{pi['width']:.4g}" if pi else "n/a"
            eb = info.get("eb_range", {}).get(slope)
            eb_txt = f"[{eb[0]:.4g}, {eb[1]:.4g}]" if eb else "n/a"
            lines.append(f"| {slope} | {est:.4g} | {se:.3g} | {pi_txt} | {w_txt} | {eb_txt} |")
        if "reliability" in doc:
            rel = ", ".join(f"{k}: {v:.3f}" for k, v in doc["reliability"].items())
            lines += ["", f"Average EB reliability: {rel}."]
        if doc.get("link") == "sqrt":
            lines += ["", "Effects are on the RMSE scale (sqrt link on squared error)."]
        lines.append("")
    if absent:
        lines += ["## Absent metrics", "", "No fit document for: " + ", ".join(absent) + ".", ""]
    return "\n".join(lines)


def cmd_report(args) -> int:
    est, _ = _load_estimates(args.estimates, args.force)
    out = _out_dir(args, Path(args.estimates).parent)
    docs = [_load_doc(p) for p in args.fits]
    wanted = args.metrics or sorted({d["metric"] for d in docs}, key=_metric_order)
    frames, per_metric, absent = [], {}, []
    for metric in wanted:
        doc = _pick_fit(docs, metric)
        if doc is None:
            absent.append(metric)
            continue
        res = _result_from_doc(doc, est)
        info = {"doc": doc, "result": res}
        if res.design.interact:
            frames.append(conjoint_table(res, composition=args.composition))
        if res.is_mixed and "condition_id" in res.fit.group_names:
            recs = eb_records(res)
            info["eb_range"] = {}
            for slope in SLOPES:
                if any(r.effect == slope for r in recs):
                    vals = np.array([r.composed for r in recs if r.effect == slope])
                    info["eb_range"][slope] = tuple(np.quantile(vals, [0.025, 0.975]))
        per_metric[metric] = info
    conj = (pd.concat(frames, ignore_index=True) if frames
            else pd.DataFrame(columns=CONJOINT_COLUMNS))
    sha = io.write_csv(conj, out / "conjoint.csv")
    io.atomic_write_text(out / "summary.md", summary_markdown(per_metric, absent))
    if (out / io.MANIFEST).exists():
        io.record_artifact(out / io.MANIFEST, "conjoint.csv", sha)
    for m in absent:
        print(f"note: no fit for metric {m!r}; listed as absent", file=sys.stderr)
    print(f"wrote {out / 'conjoint.csv'} ({len(conj)} rows) and {out / 'summary.md'}")
    return 0


def _metric_order(m):
    return REPORT_METRICS.index(m) if m in REPORT_METRICS else len(REPORT_METRICS)


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="simmeta", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, estimates=True):
        if estimates:
            sp.add_argument("estimates", help="estimates.csv written by `run`")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--force", action="store_true",
                        help="accept estimates that do not match their manifest")

    def model_flags(sp):
        sp.add_argument("--preset", type=int, choices=[1, 2, 3, 4], default=1)
        sp.add_argument("--metric", choices=sorted(METRICS), default="power")
        sp.add_argument("--weights", choices=WEIGHTS, default="none")
        sp.add_argument("--subset", help="pandas query applied before fitting, e.g. 'n == 500'")
        sp.add_argument("--link", choices=["identity", "sqrt"],
                        help="default: sqrt for sq_error mixed presets, else identity")

    sp = sub.add_parser("run", help="simulate the study and write estimates.csv")
    sp.add_argument("config", help="YAML config path, or 'reference' for the bundled study")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--reps", type=int)
    sp.add_argument("--workers", type=int)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("aggregate", help="per-cell means and Monte Carlo SEs")
    common(sp)
    sp.set_defaults(func=cmd_aggregate)

    sp = sub.add_parser("fit", help="fit a metamodel preset")
    common(sp)
    model_flags(sp)
    sp.add_argument("--tag", help="suffix for the output file names")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("eb", help="empirical Bayes estimates from fit documents")
    common(sp)
    sp.add_argument("--fits", nargs="+", required=True)
    sp.set_defaults(func=cmd_eb)

    sp = sub.add_parser("bootstrap", help="bootstrap SE calibration")
    common(sp)
    model_flags(sp)
    sp.add_argument("--bootstrap-level", nargs="+", choices=[*LEVELS, "all"], default=["all"])
    sp.add_argument("--B", type=int, default=200)
    sp.add_argument("--seed", type=int, default=1)
    sp.add_argument("--refit", choices=["preset", "ols"], default="preset",
                    help="refit the preset itself, or its OLS counterpart, per replicate")
    sp.add_argument("--workers", type=int)
    sp.set_defaults(func=cmd_bootstrap)

    sp = sub.add_parser("report", help="conjoint table and summary from fit documents")
    common(sp)
    sp.add_argument("--fits", nargs="+", required=True)
    sp.add_argument("--metrics", nargs="+", choices=sorted(METRICS))
    sp.add_argument("--composition", choices=["reference", "marginal"], default="reference")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, SpecError, AggregationError, io.ManifestError,
            CliError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
