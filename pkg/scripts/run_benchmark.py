"""Train and evaluate every run behind the benchmark comparisons.

Checkpoints land in the experiment cache ($MM3D_CACHE, default ~/.cache/mm3d),
so the acceptance suite afterwards only evaluates them. Runs that are already
cached are skipped.

    python scripts/run_benchmark.py [--config scripts/benchmark.json] [--only mm3d,fuse-max]
"""
import argparse
import json
import logging
import time
from pathlib import Path

import torch

from mm3d import experiments as ex
from mm3d.config import load_config

HERE = Path(__file__).resolve().parent
SWEEP_VALUES = (0.1, 1.0)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(HERE / "benchmark.json"))
    p.add_argument("--only", help="comma-separated subset of run names (standard runs, 'sweep', 'transfer')")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    cfg = load_config(args.config)
    names = args.only.split(",") if args.only else list(ex.STANDARD_RUNS) + ["sweep", "transfer"]

    for name in names:
        t = time.time()
        if name == "sweep":
            cells = ex.run_sweep(cfg, "data_fraction", SWEEP_VALUES)
            for metric, table in ex.sweep_tables(cells, "data_fraction").items():
                print(f"# {metric}\n{table}", end="")
        elif name == "transfer":
            init = ex.pretrain_2d(cfg, ex.build_benchmark(cfg))
            for label, ck in (("transferred", init), ("random", None)):
                rep = ex.inference_only(cfg, ck)["3d"]
                print(f"{label:<12} AUC {rep.auc:.4f} (SE {rep.se_auc:.4f})")
        else:
            r = ex.standard_run(cfg, name)
            for proto, rep in r.reports.items():
                print(f"{name:<20} {proto} {json.dumps(rep.summary())}")
        print(f"{name}: {time.time() - t:.0f} s", flush=True)


if __name__ == "__main__":
    main()
