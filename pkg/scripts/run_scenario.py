"""Run one simulation scenario and print a coverage/width table.

    python3 scripts/run_scenario.py --n-k 300 --covariate-shift strong --concept-shift strong \
        --methods fed2 pooled target-only --replications 50 --out results/strong
"""
import argparse
import dataclasses
import os

import numpy as np

from musci.simulate import (
    COVARIATE_SHIFTS,
    CONCEPT_SHIFTS,
    DEFAULT_METHODS,
    ERROR_TYPES,
    PROPENSITY_RANGES,
    ScenarioConfig,
    run_scenario,
    write_outputs,
)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--n-k", type=int, default=300)
    p.add_argument("--covariate-shift", choices=sorted(COVARIATE_SHIFTS), default="homogeneous")
    p.add_argument("--error-type", choices=ERROR_TYPES, default="homoscedastic")
    p.add_argument("--concept-shift", choices=sorted(CONCEPT_SHIFTS), default="holds")
    p.add_argument("--score", choices=["asr", "local-asr", "cqr"], default="asr")
    p.add_argument("--propensity-range", choices=PROPENSITY_RANGES, default="narrow")
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--methods", nargs="+", default=list(DEFAULT_METHODS))
    p.add_argument("--replications", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", help="write the CSV outputs here")
    a = p.parse_args()

    cfg = ScenarioConfig(n_k=a.n_k, covariate_shift=a.covariate_shift, error_type=a.error_type,
                         concept_shift=a.concept_shift, score=a.score, propensity_range=a.propensity_range,
                         alpha=a.alpha, methods=tuple(a.methods), replications=a.replications, seed=a.seed)
    s = run_scenario(cfg, a.workers)
    print(f"{cfg.name}  M={cfg.replications}  failures={s.failures}")
    print(f"{'method':<12}{'CP':>8}{'sd(CP)':>9}{'wd':>8}{'sd(wd)':>9}  mean weights")
    for label, m in s.methods.items():
        ws = [r.methods[label].weights for r in s.replications if r.error is None]
        wtxt = "" if ws[0] is None else " ".join(f"{v:.3f}" for v in np.mean(ws, axis=0))
        print(f"{label:<12}{m.cp_mean:8.3f}{m.cp_sd:9.3f}{m.width_mean:8.2f}{m.width_sd:9.2f}  {wtxt}")
    if a.out:
        write_outputs([s], a.out, {"seed": cfg.seed, "config": dataclasses.asdict(cfg)})


if __name__ == "__main__":
    main()
