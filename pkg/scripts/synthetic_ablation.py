"""FCLSTM vs ECLSTM across window sizes on a synthetic run-to-failure fleet.

Writes C-MAPSS-format text files, ingests them and runs the ablation command,
so the whole CLI path is exercised without the real benchmark.

    python scripts/synthetic_ablation.py --out runs/synthetic --epochs 5
"""
import argparse
from pathlib import Path

from eclstm.cli import main
from eclstm.data import synthetic_split, write_cmapss, write_rul_truth


def parse_args():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/synthetic")
    p.add_argument("--units", type=int, default=40)
    p.add_argument("--test-units", type=int, default=20)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seeds", type=int, default=2)
    p.add_argument("--windows", default="1,5,10,15")
    p.add_argument("--max-train-examples", type=int, default=2000)
    return p.parse_args()


if __name__ == "__main__":
    args = parse_args()
    out = Path(args.out)
    raw = out / "raw"
    raw.mkdir(parents=True, exist_ok=True)
    train, test, truths = synthetic_split(args.units, args.test_units, seed=0, min_life=60, max_life=160)
    write_cmapss(raw / "train_FD001.txt", train)
    write_cmapss(raw / "test_FD001.txt", test)
    write_rul_truth(raw / "RUL_FD001.txt", truths)
    assert main(["ingest", "--format", "cmapss", "--in", str(raw), "--out", str(out / "cache"), "--force"]) == 0
    raise SystemExit(main(["ablation", "--cache", str(out / "cache"), "--windows", args.windows,
                           "--epochs", str(args.epochs), "--seeds", str(args.seeds),
                           "--max-train-examples", str(args.max_train_examples), "--out", str(out / "ablation")]))
