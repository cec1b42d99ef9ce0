"""Generate the 64x64 synthetic set and cross-validate both mixers on it.

    python3 scripts/run_synthetic_benchmark.py --out runs/benchmark --k 5
"""
import argparse
import logging
from pathlib import Path

from deformableformer.data import SyntheticParams, generate_synthetic, make_folds
from deformableformer.model import ModelConfig
from deformableformer.training import TrainConfig, compare_mixers

ROOT = Path(__file__).resolve().parent.parent


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/benchmark")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=7, help="synthetic data seed")
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--config", default=ROOT / "configs/desk.json")
    p.add_argument("--train-config", default=ROOT / "configs/desk_train.json")
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    manifest = generate_synthetic(SyntheticParams(seed=args.seed, n_per_class=args.n_per_class),
                                  out / "data")
    tcfg = TrainConfig.from_json(args.train_config)
    manifest = make_folds(manifest, args.k, tcfg.seed)
    manifest.save(out / "data" / "manifest.json")
    compare_mixers(manifest, ModelConfig.from_json(args.config), tcfg, out / "cv",
                   jobs=args.jobs)
    print((out / "cv" / "report.csv").read_text(), end="")


if __name__ == "__main__":
    main()
