"""Walk through the artifacts of a finished ``subnetscope all`` run.

Usage: ``python demos/inspect_run.py RUN_DIR``.
"""

import csv
import json
import sys
from pathlib import Path


def main(root: Path) -> None:
    summary = json.loads((root / "report/summary.json").read_text())
    print(json.dumps({k: v for k, v in summary.items() if k not in ("wsol_error",)}, indent=2))

    print("\nper-class sparsity")
    bundles = json.loads((root / "bundles/summary.json").read_text())
    for cls, info in sorted(bundles.items(), key=lambda kv: int(kv[0])):
        print(f"  class {cls}: {info['sparsity']:.3f} (met tau: {info['met_tau']})")

    print("\nlocalization error, normal vs subnet")
    rows = list(csv.DictReader((root / "report/table1.csv").open()))
    for row in rows:
        print("  " + ", ".join(f"{k}={v}" for k, v in row.items()))

    print("\ndetection AUROC (%)")
    for row in csv.DictReader((root / "report/table2.csv").open()):
        print(f"  {row['block']:8s} {row['attack']:9s} {row['method']:20s} {row['auroc_percent']}")

    manifest = json.loads((root / "manifest.json").read_text())
    print("\nstage seconds: " + ", ".join(f"{k} {v['seconds']:.0f}" for k, v in manifest["stages"].items()))


if __name__ == "__main__":
    if len(sys.argv) != 2:
        sys.exit(__doc__)
    main(Path(sys.argv[1]))
