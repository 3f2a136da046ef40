"""Print the evaluation records and summary of a run directory."""

import sys
from pathlib import Path

from metapix.runs import RunDirectory


def show_run(path: Path) -> None:
    run = RunDirectory.open(path)
    config = run.read_config()
    print(f"Run: {run.path}  seed={config.seed} precision={config.precision}")
    for record in run.evaluations():
        separation = ""
        if record.w_corrupt_mean is not None:
            separation = f"  w_corrupt={record.w_corrupt_mean:.4f} w_clean={record.w_clean_mean:.4f}"
        print(f"step {record.step:>7} {record.phase_end:<11} gen {record.generation}: mIoU {record.miou:.4f}{separation}")
    summary = run.path / "summary.csv"
    if summary.exists():
        print(summary.read_text(encoding="utf-8"), end="")
    else:
        print("No summary.csv yet (run unfinished?)")


if __name__ == "__main__":
    if len(sys.argv) != 2:
        print("usage: python check_run.py <run-dir>")
        sys.exit(2)
    show_run(Path(sys.argv[1]))
