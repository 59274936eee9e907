"""Run a grid of scenarios from a JSON config through ``musci simulate``.

The shipped ``configs/full_sweep.json`` enumerates the full 162-scenario
grid; ``--replications`` and ``--n-k`` shrink it to something that finishes
on a desktop, e.g.

    python3 scripts/run_sweep.py configs/full_sweep.json --n-k 300 --replications 20 --out results/sweep
"""
import argparse
import json
import sys
import tempfile
from pathlib import Path

from musci.cli import main as cli_main


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("config")
    p.add_argument("--out", required=True)
    p.add_argument("--replications", type=int, help="override replications for every scenario")
    p.add_argument("--n-k", type=int, nargs="+", help="override the n_k grid axis")
    p.add_argument("--workers", type=int)
    p.add_argument("--report", action="store_true", help="also write summary tables")
    a = p.parse_args()

    doc = json.loads(Path(a.config).read_text(encoding="utf-8"))
    if a.replications:
        doc.setdefault("defaults", {})["replications"] = a.replications
    if a.n_k:
        if "grid" in doc:
            doc["grid"]["n_k"] = a.n_k
        else:
            doc.setdefault("defaults", {})["n_k"] = a.n_k[0]
    with tempfile.TemporaryDirectory() as tmp:
        cfg = Path(tmp) / "sweep.json"
        cfg.write_text(json.dumps(doc), encoding="utf-8")
        argv = ["simulate", str(cfg), "--out", a.out]
        if a.workers:
            argv += ["--workers", str(a.workers)]
        code = cli_main(argv)
    if code == 0 and a.report:
        code = cli_main(["report", str(Path(a.out) / "replications.csv"), "--out", str(Path(a.out) / "report")])
    sys.exit(code)


if __name__ == "__main__":
    main()
