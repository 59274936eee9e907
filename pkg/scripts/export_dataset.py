"""Write one simulated multi-site dataset (and target covariates) as CSV for ``musci fit``.

    python3 scripts/export_dataset.py --n-k 500 --out data.csv --covariates new_x.csv
"""
import argparse

import numpy as np

from musci.dataset import write_csv
from musci.simulate import COVARIATE_SHIFTS, CONCEPT_SHIFTS, ScenarioConfig, draw_covariates, generate_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--n-k", type=int, default=500)
    p.add_argument("--covariate-shift", choices=sorted(COVARIATE_SHIFTS), default="homogeneous")
    p.add_argument("--concept-shift", choices=sorted(CONCEPT_SHIFTS), default="holds")
    p.add_argument("--error-type", choices=["homoscedastic", "heteroscedastic"], default="homoscedastic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--covariates", help="also write target covariates (x1 column) for predict")
    p.add_argument("--n-new", type=int, default=20)
    a = p.parse_args()

    cfg = ScenarioConfig(n_k=a.n_k, covariate_shift=a.covariate_shift, concept_shift=a.concept_shift,
                         error_type=a.error_type)
    rng = np.random.default_rng(a.seed)
    write_csv(generate_dataset(cfg, rng), a.out)
    if a.covariates:
        x = draw_covariates(cfg, 0, a.n_new, rng)
        with open(a.covariates, "w", encoding="utf-8") as fh:
            fh.write("x1\n" + "".join(f"{float(v)!r}\n" for v in x))


if __name__ == "__main__":
    main()
