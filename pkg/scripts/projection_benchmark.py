"""Wall-clock cost of outcome-level KRR vs treatment-level KRR plus projection.

Both routes start from raw inputs (graph, assignment, edge outcomes), so the
timings include exposure and feature construction. Use ``--n-outcome`` to
grow the outcome side while keeping 300 treatment units.

    python3 scripts/projection_benchmark.py [--n-outcome 30000] [--repeats 7] [--boot 200]
"""
import argparse
import statistics
import time

from blift.dgp import SCENARIO_GRID, DgpParams, scenario, simulate_replicate
from blift.estimators import Level, build_feature_table, fit_response_model
from blift.exposure import exposure_table
from blift.pipeline import estimate_level
from blift.projection import bootstrap_effect


def timed(fn, repeats: int):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), out


def main() -> None:
    ap = argparse.ArgumentParser(description="outcome-level vs projected treatment-level timing")
    ap.add_argument("--n-outcome", type=int, default=30_000)
    ap.add_argument("--repeats", type=int, default=7)
    ap.add_argument("--boot", type=int, default=200, help="bootstrap replicates for the interval width (0: skip)")
    ap.add_argument("--replicate", type=int, default=0)
    args = ap.parse_args()

    print("spec,n_outcome,outcome_s,projected_s,speedup,outcome_est,projected_est,abs_diff,boot_width")
    for spec in sorted(SCENARIO_GRID):
        sc = scenario(spec, n_outcome=args.n_outcome)
        exp = simulate_replicate(sc, DgpParams(), args.replicate)
        inputs = (exp.graph, exp.assignment, exp.outcomes, sc.treatment_probability)
        t_out, direct = timed(lambda: estimate_level(*inputs, "outcome", seed=exp.model_seed), args.repeats)
        t_tr, proj = timed(lambda: estimate_level(*inputs, "treatment", seed=exp.model_seed, project=True),
                           args.repeats)
        width = float("nan")
        if args.boot:
            ex = exposure_table(exp.graph, exp.assignment, sc.treatment_probability)
            table = build_feature_table(exp.graph, ex, exp.outcomes, Level.TREATMENT)
            fixed = fit_response_model(table, "krr", None, exp.model_seed).with_fixed_hyperparameters()
            boot = bootstrap_effect(exp.graph, table, "krr", fixed, B=args.boot, seed=exp.model_seed,
                                    model_seed=exp.model_seed, project=True, edge_additive=True)
            width = boot.interval[1] - boot.interval[0]
        print(f"{spec},{args.n_outcome},{t_out:.4f},{t_tr:.4f},{t_out / t_tr:.1f},"
              f"{direct.estimate:.4f},{proj.estimate:.4f},{abs(direct.estimate - proj.estimate):.4f},{width:.4f}")


if __name__ == "__main__":
    main()
