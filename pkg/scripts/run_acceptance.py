"""Run the acceptance suite and save its per-criterion lines.

    python3 scripts/run_acceptance.py [--out acceptance_report.txt]
"""
import argparse
import subprocess
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]


def main():
    p = argparse.ArgumentParser()
    p.add_argument("--out", default=str(ROOT / "acceptance_report.txt"))
    a = p.parse_args()
    res = subprocess.run([sys.executable, "-m", "pytest", "-q", "-s", str(ROOT / "tests" / "test_acceptance.py")],
                         cwd=ROOT, capture_output=True, text=True)
    lines = sorted({ln for ln in res.stdout.splitlines() if ln.startswith("CRITERION ")},
                   key=lambda s: int(s.split()[1].rstrip(":")))
    Path(a.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    print(f"\n{sum('PASS' in ln for ln in lines)}/{len(lines)} criteria pass; written to {a.out}")
    sys.exit(res.returncode)


if __name__ == "__main__":
    main()
