"""
Command-line front end.

    dynevent simulate       --config C --out panel.csv
    dynevent estimate       --config C --data panel.csv --out fit.json
    dynevent counterfactual --config C --fit fit.json --out paths.csv [--data panel.csv]
    dynevent decompose      --config C --fit fit.json --out effects.csv [--data panel.csv]
    dynevent montecarlo     --config C --out study.csv

Exit codes: 0 ok, 2 config or data error, 3 IO error, 4 non-convergence (report written).
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, build_fit_options, build_sim_config, build_study, load_config
from .counterfactual import ModelParams, Scenario, decompose, simulate_scenario
from .estimation import TABLE_COLUMNS, fit_two_step, monte_carlo
from .fileio import (
    DataError,
    fit_to_doc,
    fmt,
    read_fit_report,
    read_panel_csv,
    t0_from_disk,
    t0_to_disk,
    write_json,
    write_latent_csv,
    write_panel_csv,
    write_table_csv,
)
from .model_core import NEVER, EventDesign, ModelError
from .simulation import default_threads, simulate_panel

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NOCONV = 0, 2, 3, 4


def sibling(out: Path, suffix: str, ext: str) -> Path:
    return out.with_name(f"{out.stem}{suffix}{ext}")


def _design(doc) -> EventDesign:
    return EventDesign(**doc["design"])


# --- commands -----------------------------------------------------------------


def cmd_simulate(args) -> int:
    doc = load_config(args.config, "simulate")
    design = _design(doc)
    cfg = build_sim_config(doc["simulate"], design, "simulate", seed=args.seed)
    panel, latent = simulate_panel(cfg, threads=args.threads)
    out = Path(args.out)
    write_panel_csv(out, panel)
    write_latent_csv(sibling(out, "_latent", ".csv"), latent, design)
    counts = panel.cohort_counts()
    cohorts = ", ".join(f"{0 if c == NEVER else c}:{n}" for c, n in sorted(counts.items()))
    print(f"N={panel.N} T={panel.T} K={panel.K}")
    print(f"cohorts (t0:count, 0 = never) {cohorts}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    if args.data is None:
        raise ConfigError("--data: required for estimate")
    doc = load_config(args.config, "estimate")
    design = _design(doc)
    opts = build_fit_options(doc.get("estimate", {}), design, seed=args.seed)
    panel = read_panel_csv(args.data, design)
    fit = fit_two_step(panel, design, opts)
    out = Path(args.out)
    trace = sibling(out, "_trace", ".csv")
    write_table_csv(trace, ["iteration", "neg_loglik_per_obs"],
                    [{"iteration": k, "neg_loglik_per_obs": v} for k, v in fit.trace])
    write_json(out, fit_to_doc(fit, design, trace_file=trace.name))
    print(f"loglik_Y={fmt(fit.loglik_Y)} loglik_X={fmt(fit.loglik_X)} converged={fit.converged}")
    if not fit.converged:
        print(f"warning: optimizer did not converge ({fit.message})", file=sys.stderr)
        return EXIT_NOCONV
    return EXIT_OK


def _scenario_inputs(args, doc, design: EventDesign):
    """Build (ModelParams, Scenario, panel or None) from the config, fit report and data."""
    report = read_fit_report(args.fit)
    fd = report["design"]
    if (fd.T, fd.K, fd.J_max) != (design.T, design.K, design.J_max):
        raise ConfigError(f"design: config has T={design.T}, K={design.K}, J_max={design.J_max}; "
                          f"fit report has T={fd.T}, K={fd.K}, J_max={fd.J_max}")
    if report["feedback"] is None:
        raise DataError(f"{args.fit}: fit report has no feedback model")
    params = ModelParams(report["theta"], report["het"], report["feedback"])
    sc = doc["scenario"]
    panel = read_panel_csv(args.data, design) if args.data is not None else None
    source = sc.get("lambda_source", "prior")
    if source == "posterior" and panel is None:
        raise ConfigError("scenario.lambda_source: 'posterior' requires --data")

    if "init_star" in sc:
        n = sc.get("n_units", panel.N if panel is not None else None)
        y0 = np.atleast_1d(np.asarray(sc["init_star"]["y0"], dtype=float))
        if n is None:
            n = y0.shape[0]
        y0 = np.broadcast_to(y0, (n,)).copy()
        x0 = np.broadcast_to(np.asarray(sc["init_star"]["x0"], dtype=float), (n, design.K)).copy()
        init = (y0, x0)
    elif panel is None:
        raise ConfigError("scenario.init_star: required when no --data is given")
    else:
        init = None
        n = panel.N
    t0 = sc["t0_star"]
    if t0 == "observed":
        if panel is None:
            raise ConfigError("scenario.t0_star: 'observed' requires --data")
        t0_star = panel.t0
    else:
        t0_star = np.broadcast_to(t0_from_disk(np.atleast_1d(np.asarray(t0, dtype=np.int64))), (n,))
    seed = sc["seed"] if args.seed is None else args.seed
    scenario = Scenario(t0_star=t0_star, n_draws=sc["n_draws"], seed=seed, lambda_source=source,
                        init_star=init)
    return params, scenario, panel


def _meta(scenario: Scenario, args, extra: dict) -> dict:
    return {"schema_version": 1, "seed": int(scenario.seed), "n_draws": int(scenario.n_draws),
            "lambda_source": scenario.lambda_source, "fit_report": Path(args.fit).name, **extra}


def cmd_counterfactual(args) -> int:
    doc = load_config(args.config, "counterfactual")
    design = _design(doc)
    params, scenario, panel = _scenario_inputs(args, doc, design)
    paths = simulate_scenario(params, scenario, design, panel, threads=args.threads)
    out = Path(args.out)
    N, D, T = paths.Y.shape
    t0 = t0_to_disk(paths.t0_star)
    header = ["unit", "draw", "t", "y"] + [f"x{k + 1}" for k in range(design.K)] + ["t0_star"]

    def rows():
        for i in range(N):
            for d in range(D):
                for t in range(T):
                    yield (i + 1, d, t + 1, paths.Y[i, d, t], *paths.X[i, d, t], t0[i])

    with open(out, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows():
            fh.write(",".join(fmt(v) for v in r) + "\n")
    write_json(sibling(out, "_meta", ".json"), _meta(scenario, args, {"n_units": N}))
    print(f"wrote {N} units x {D} draws x {T} periods")
    return EXIT_OK


def cmd_decompose(args) -> int:
    doc = load_config(args.config, "decompose")
    design = _design(doc)
    params, scenario, panel = _scenario_inputs(args, doc, design)
    res = decompose(params, scenario, design, panel, threads=args.threads)
    out = Path(args.out)
    cols = ["total", "direct", "indirect", "se_total", "se_direct", "se_indirect"]
    write_table_csv(out, ["j"] + cols, res.event_rows())
    write_table_csv(sibling(out, "_calendar", ".csv"), ["t"] + cols, res.calendar_rows())
    meta = _meta(scenario, args, {**res.metadata,
                                  "event_counts": {str(r["j"]): r["n"] for r in res.event_rows()}})
    write_json(sibling(out, "_meta", ".json"), meta)
    print(f"wrote {len(res.event_time)} event-time rows and {len(res.calendar_time)} calendar rows")
    return EXIT_OK


def cmd_montecarlo(args) -> int:
    doc = load_config(args.config, "montecarlo")
    design = _design(doc)
    study = build_study(doc["montecarlo"], design, seed=args.seed)
    out = Path(args.out)
    write_table_csv(out, list(TABLE_COLUMNS), [])

    def on_cell(rows):
        write_table_csv(out, list(TABLE_COLUMNS), rows, append=True)
        print(f"cell {rows[0]['cell']}: done", flush=True)

    monte_carlo(study, on_cell=on_cell)
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "estimate": cmd_estimate,
    "counterfactual": cmd_counterfactual,
    "decompose": cmd_decompose,
    "montecarlo": cmd_montecarlo,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynevent", description="Dynamic event-study panel models.")
    p.add_argument("command", choices=list(COMMANDS))
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--data", help="panel CSV")
    p.add_argument("--fit", help="fit report written by 'estimate'")
    p.add_argument("--out", required=True, help="output path; sibling files share its stem")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--threads", type=int, help="worker threads (default: $DYNEVENT_THREADS or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed usage
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is None:
        args.threads = default_threads()
    elif args.threads < 1:
        print("error: --threads: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("error: --seed: must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.command in ("counterfactual", "decompose") and args.fit is None:
        print(f"error: --fit: required for {args.command}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ModelError as exc:  # includes ConfigError and DataError
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
