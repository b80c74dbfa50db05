"""Operator surface: run sweeps, verify the process oracle, emit plot data.

Subcommands:

* ``run <config.json>``          execute a sweep, write JSONL + summary.json
* ``oracle --seed S --count N``  randomized no-back-flow verification runs
* ``plot-data <run_dir>``        CSV tables for histograms, scatters, curves
* ``report <run_dir>``           markdown summary table

``BACKFLOW_WORKERS`` sets the default worker count for sweeps.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import comb as comb_mod
from . import diagnostics as diag
from .divergences import KINDS
from .errors import ConfigError
from .protocol import config_from_mapping, run_sweep
from .stats import correlations


def _read_jsonl(path: Path) -> tuple[dict, list[dict]]:
    lines = path.read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty file")
    header = json.loads(lines[0])
    return header, [json.loads(line) for line in lines[1:]]


def cmd_run(config_path: str) -> int:
    try:
        mapping = json.loads(Path(config_path).read_text())
    except FileNotFoundError:
        print(f"error: config file not found: {config_path}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: config is not valid JSON: {exc}", file=sys.stderr)
        return 2
    try:
        config = config_from_mapping(mapping)
        result = run_sweep(config)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for cell in result.summary["cells"]:
        tv = cell["metrics"]["tv"]
        if tv.get("ci_low") is not None:
            detail = f"mean dTV={tv['mean']:+.6f}  CI=[{tv['ci_low']:+.6f}, {tv['ci_high']:+.6f}]"
        elif tv.get("mean") is not None:
            detail = f"mean dTV={tv['mean']:+.6f}"
        else:
            detail = "no valid repeats"
        print(
            f"{cell['regime']:>16s}  {cell['break']:>5s}  seed={cell['seed']}  "
            f"n={cell['n_repeats']:3d}  {detail}"
        )
    errors = result.summary["n_persistent_errors"]
    print(f"summary written to {result.run_dir / 'summary.json'}")
    if errors:
        print(f"error: {errors} repeats failed the NaN guard twice", file=sys.stderr)
        return 1
    return 0


def cmd_oracle(seed: int, count: int, demo_witness: bool = False, tol: float = 1e-10) -> int:
    """Randomized verification that the no-back-flow bound holds where proven."""
    rng = np.random.default_rng(seed)
    worst = -np.inf
    worst_residual = 0.0
    for maker, break_flag in ((comb_mod.random_factoring_comb, False), (comb_mod.random_break_comb, True)):
        for _ in range(count):
            comb, b_label, lambda_b = maker(rng)
            pairs = comb_mod.instrument_pairs(comb)
            report = comb_mod.verify_no_backflow(
                comb, pairs, b_label, lambda_b, break_before_second=break_flag, omc_tol=tol
            )
            if not report.applicable:
                print("FAIL: single-channel precondition violated "
                      f"(residual {report.omc_residual:.3e})")
                return 1
            worst = max(worst, report.max_delta)
            worst_residual = max(worst_residual, report.omc_residual)
    if count:
        print(f"checked {2 * count} processes "
              f"({count} factoring, {count} break+lifting), "
              f"{len(pairs)} pairs x {len(KINDS)} divergences each")
        print(f"worst channel residual: {worst_residual:.3e}")
        print(f"worst back-flow delta:  {worst:.3e} (bound {tol:.1e})")
    else:
        print("checked 0 processes")

    status = 0
    if count and worst > tol:
        print("FAIL: positive back-flow where the bound must hold")
        status = 1

    if demo_witness:
        comb, pair, b_label = comb_mod.memoryful_demo_comb()
        before = comb_mod.search_backflow_witness(comb, [pair], b_label)
        after = comb_mod.search_backflow_witness(comb, [pair], b_label, break_before_second=True)
        print("memoryful demo process (buffer routes the second step):")
        print(f"  delta before break: {before[2]:+.6f} ({before[1]}) -> positive, memory exhibited")
        print(f"  delta after break:  {after[2]:+.6e} -> within bound {tol:.1e}")
        if not (before[2] > 0 and after[2] <= tol):
            print("FAIL: demo witness did not behave as constructed")
            status = 1
    return status


def _write_csv(path: Path, fieldnames: list[str], rows: list[dict]) -> None:
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _histogram_rows(values, condition: str, bins: int = 20) -> list[dict]:
    if not values:
        return []
    edges = np.histogram_bin_edges(values, bins=bins)
    counts, _ = np.histogram(values, bins=edges)
    return [
        {
            "condition": condition,
            "bin_left": float(edges[i]),
            "bin_right": float(edges[i + 1]),
            "count": int(counts[i]),
        }
        for i in range(len(counts))
    ]


def sign_flip_rows(cells: list[dict]) -> tuple[list[dict], int]:
    """Pair no-break and break cells by (regime, seed) and flag sign flips."""
    by_key = {}
    for cell in cells:
        mean = cell["metrics"].get("tv", {}).get("mean")
        if mean is None:
            continue
        by_key.setdefault((cell["regime"], cell["seed"]), {})[cell["break"]] = mean
    rows = []
    flips = 0
    for (regime, seed) in sorted(by_key):
        pair = by_key[(regime, seed)]
        if "no" not in pair or "break" not in pair:
            continue
        flip = int(np.sign(pair["no"]) != np.sign(pair["break"]))
        flips += flip
        rows.append(
            {
                "regime": regime,
                "seed": seed,
                "delta_no": pair["no"],
                "delta_break": pair["break"],
                "sign_flip": flip,
            }
        )
    return rows, flips


def cmd_plotdata(run_dir: str) -> int:
    run = Path(run_dir)
    summary_path = run / "summary.json"
    if not summary_path.exists():
        print(f"error: missing input: {summary_path}", file=sys.stderr)
        return 2
    summary = json.loads(summary_path.read_text())
    out = run / "plots"
    out.mkdir(exist_ok=True)
    cells = summary["cells"]
    regimes_meta = summary["meta"]["regimes"]

    # Per-cell mean TV delta histograms by condition.
    hist_rows = []
    for condition in ("no", "break"):
        values = [
            c["metrics"]["tv"].get("mean")
            for c in cells
            if c["break"] == condition and c["metrics"]["tv"].get("mean") is not None
        ]
        hist_rows.extend(_histogram_rows(values, condition))
    _write_csv(out / "delta_hist.csv", ["condition", "bin_left", "bin_right", "count"], hist_rows)

    scatter_rows, flips = sign_flip_rows(cells)
    _write_csv(
        out / "break_scatter.csv",
        ["regime", "seed", "delta_no", "delta_break", "sign_flip"],
        scatter_rows,
    )
    _write_csv(
        out / "break_scatter_summary.csv",
        ["n_points", "n_sign_flips", "flip_fraction"],
        [
            {
                "n_points": len(scatter_rows),
                "n_sign_flips": flips,
                "flip_fraction": (flips / len(scatter_rows)) if scatter_rows else float("nan"),
            }
        ],
    )

    regime_rows = []
    for pool in summary["pooled"]:
        row = {"regime": pool["regime"], "break": pool["break"], "n": pool["n_repeats"]}
        for kind in KINDS:
            block = pool["metrics"].get(kind, {})
            row[f"{kind}_mean"] = block.get("mean")
            row[f"{kind}_ci_low"] = block.get("ci_low")
            row[f"{kind}_ci_high"] = block.get("ci_high")
        regime_rows.append(row)
    regime_fields = ["regime", "break", "n"]
    for kind in KINDS:
        regime_fields += [f"{kind}_mean", f"{kind}_ci_low", f"{kind}_ci_high"]
    _write_csv(out / "regime_means.csv", regime_fields, regime_rows)

    diagnostics_path = run / "diagnostics.jsonl"
    if not diagnostics_path.exists():
        print(f"error: missing input: {diagnostics_path}", file=sys.stderr)
        return 2
    _, diag_records = _read_jsonl(diagnostics_path)

    curve_rows = []
    cka_rows = []
    traj_rows = []
    slope_by_cell = {}
    for rec in diag_records:
        key = (rec["regime"], rec["break"], rec["seed"])
        for k, tv in rec.get("noncommute", []):
            curve_rows.append(
                {"regime": rec["regime"], "break": rec["break"], "seed": rec["seed"], "k": k, "tv": tv}
            )
        if rec.get("noncommute_slope") is not None:
            slope_by_cell[key] = rec["noncommute_slope"]
        if rec.get("cka_first") is not None:
            cka_rows.append(
                {
                    "regime": rec["regime"],
                    "break": rec["break"],
                    "seed": rec["seed"],
                    "cka_first": rec["cka_first"],
                    "cka_second": rec["cka_second"],
                }
            )
        for label, point in zip(rec.get("pca_labels", []), rec.get("pca_points", [])):
            traj_rows.append(
                {
                    "regime": rec["regime"],
                    "break": rec["break"],
                    "seed": rec["seed"],
                    "label": label,
                    "x": point[0],
                    "y": point[1],
                    "explained_1": rec["pca_explained"][0],
                    "explained_2": rec["pca_explained"][1],
                }
            )
    _write_csv(out / "noncommute_curves.csv", ["regime", "break", "seed", "k", "tv"], curve_rows)
    _write_csv(out / "cka_table.csv", ["regime", "break", "seed", "cka_first", "cka_second"], cka_rows)
    _write_csv(
        out / "trajectories.csv",
        ["regime", "break", "seed", "label", "x", "y", "explained_1", "explained_2"],
        traj_rows,
    )

    mean_by_cell = {
        (c["regime"], c["break"], c["seed"]): c["metrics"]["tv"].get("mean")
        for c in cells
        if c["metrics"]["tv"].get("mean") is not None
    }
    align_by_cell = {
        (c["regime"], c["break"], c["seed"]): c["alignment_mean"]
        for c in cells
        if c.get("alignment_mean") is not None
    }

    slope_rows = [
        {
            "regime": key[0],
            "break": key[1],
            "seed": key[2],
            "noncommute_slope": slope_by_cell[key],
            "mean_delta_tv": mean_by_cell[key],
        }
        for key in sorted(slope_by_cell)
        if key in mean_by_cell
    ]
    _write_csv(
        out / "delta_vs_slope.csv",
        ["regime", "break", "seed", "noncommute_slope", "mean_delta_tv"],
        slope_rows,
    )
    align_rows = [
        {
            "regime": key[0],
            "seed": key[2],
            "alignment_mean": align_by_cell[key],
            "mean_delta_tv": mean_by_cell[key],
        }
        for key in sorted(align_by_cell)
        if key in mean_by_cell and key[1] == "no"
    ]
    _write_csv(
        out / "delta_vs_alignment.csv",
        ["regime", "seed", "alignment_mean", "mean_delta_tv"],
        align_rows,
    )

    corr_rows = []
    no_break_slopes = [
        (slope_by_cell[k], mean_by_cell[k])
        for k in sorted(slope_by_cell)
        if k in mean_by_cell and k[1] == "no"
    ]
    for name, pairs in (
        ("delta_vs_slope", no_break_slopes),
        ("delta_vs_alignment", [(r["alignment_mean"], r["mean_delta_tv"]) for r in align_rows]),
    ):
        xs = [p[0] for p in pairs]
        ys = [p[1] for p in pairs]
        try:
            c = correlations(xs, ys)
        except ValueError:
            continue
        corr_rows.append(
            {
                "relation": name,
                "n": len(xs),
                "pearson_r": c.pearson_r,
                "pearson_p": c.pearson_p,
                "spearman_rho": c.spearman_rho,
                "spearman_p": c.spearman_p,
            }
        )
    _write_csv(
        out / "correlations.csv",
        ["relation", "n", "pearson_r", "pearson_p", "spearman_rho", "spearman_p"],
        corr_rows,
    )

    align_samples: list[diag.AlignmentSample] = []
    for cell in cells:
        if cell["break"] != "no":
            continue
        path = run / f"{cell['regime']}__no__seed{cell['seed']}.jsonl"
        if not path.exists():
            print(f"error: missing input: {path}", file=sys.stderr)
            return 2
        _, records = _read_jsonl(path)
        align_samples.extend(
            diag.AlignmentSample(r["momentum_alignment"], cell["regime"], cell["seed"], r["repeat_id"])
            for r in records
            if r.get("momentum_alignment") is not None and r.get("error") is None
        )
    _write_csv(
        out / "alignment_hist.csv",
        ["condition", "bin_left", "bin_right", "count"],
        _histogram_rows([s.cosine for s in align_samples], "no", bins=24),
    )

    dose_points = [
        diag.ConfigPoint(
            regime=c["regime"],
            seed=c["seed"],
            k=regimes_meta[c["regime"]]["k"],
            momentum=regimes_meta[c["regime"]]["momentum"],
            overlap=regimes_meta[c["regime"]]["overlap"],
            aug_b=regimes_meta[c["regime"]]["aug_b"],
            delta=c["metrics"]["tv"]["mean"],
        )
        for c in cells
        if c["break"] == "no" and c["metrics"]["tv"].get("mean") is not None
    ]
    try:
        dose = diag.dose_response(dose_points)
    except ValueError as exc:
        print(f"note: dose-response skipped: {exc}")
    else:
        _write_csv(
            out / "dose_response_fit.csv",
            ["n", "alpha", "beta", "gamma", "se_alpha", "se_beta", "se_gamma",
             "p_alpha", "p_beta", "p_gamma", "r_squared", "mean_lift",
             "lift_ci_low", "lift_ci_high", "paired_p"],
            [
                {
                    "n": dose.n_points,
                    "alpha": dose.fit.alpha,
                    "beta": dose.fit.beta,
                    "gamma": dose.fit.gamma,
                    "se_alpha": dose.fit.std_errors[0],
                    "se_beta": dose.fit.std_errors[1],
                    "se_gamma": dose.fit.std_errors[2],
                    "p_alpha": dose.fit.p_values[0],
                    "p_beta": dose.fit.p_values[1],
                    "p_gamma": dose.fit.p_values[2],
                    "r_squared": dose.fit.r_squared,
                    "mean_lift": dose.mean_lift,
                    "lift_ci_low": dose.lift_ci.ci_low if dose.lift_ci else "",
                    "lift_ci_high": dose.lift_ci.ci_high if dose.lift_ci else "",
                    "paired_p": dose.paired.p_value if dose.paired else "",
                }
            ],
        )
        _write_csv(
            out / "dose_response_pairs.csv",
            ["seed", "lift"],
            [{"seed": s, "lift": d} for s, d in zip(dose.pair_seeds, dose.pair_diffs)],
        )

    print(f"plot data written to {out}")
    return 0


def cmd_report(run_dir: str) -> int:
    run = Path(run_dir)
    summary_path = run / "summary.json"
    if not summary_path.exists():
        print(f"error: missing input: {summary_path}", file=sys.stderr)
        return 2
    summary = json.loads(summary_path.read_text())
    lines = ["# Back-flow sweep report", ""]
    lines.append(f"Run digest: `{summary['meta']['config_digest']}`  ")
    lines.append(f"Base stage: `{summary['meta']['base_stage']}`")
    lines.append("")
    lines.append("| regime | break | n | mean dTV | 95% CI | TOST (1e-3) | p (one-sided) |")
    lines.append("|---|---|---|---|---|---|---|")
    for pool in summary["pooled"]:
        tv = pool["metrics"]["tv"]
        if tv.get("mean") is None:
            continue
        lines.append(
            f"| {pool['regime']} | {pool['break']} | {tv['n']} "
            f"| {tv['mean']:+.6f} | [{tv['ci_low']:+.6f}, {tv['ci_high']:+.6f}] "
            f"| {tv.get('tost_verdict', '-')} | {tv.get('p_one_sided', float('nan')):.3g} |"
        )
    _, flips = sign_flip_rows(summary["cells"])
    lines.append("")
    lines.append(f"Sign flips between conditions (per regime x seed): {flips}")
    text = "\n".join(lines) + "\n"
    (run / "report.md").write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="backflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a sweep from a JSON config")
    p_run.add_argument("config", help="path to the run configuration (JSON)")

    p_oracle = sub.add_parser("oracle", help="randomized no-back-flow verification")
    p_oracle.add_argument("--seed", type=int, default=0)
    p_oracle.add_argument("--count", type=int, default=100)
    p_oracle.add_argument("--demo-witness", action="store_true",
                          help="also exhibit the hand-built memoryful process")

    p_plot = sub.add_parser("plot-data", help="emit plot-ready CSV tables")
    p_plot.add_argument("run_dir", help="directory produced by 'run'")

    p_report = sub.add_parser("report", help="markdown summary of a run")
    p_report.add_argument("run_dir", help="directory produced by 'run'")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args.config)
    if args.command == "oracle":
        return cmd_oracle(args.seed, args.count, args.demo_witness)
    if args.command == "plot-data":
        return cmd_plotdata(args.run_dir)
    if args.command == "report":
        return cmd_report(args.run_dir)
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
