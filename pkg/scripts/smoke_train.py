"""End-to-end smoke run on the synthetic fixtures.

    python3 scripts/smoke_train.py --out runs/smoke [--config configs/smoke.json]

make-fixtures -> build-dataset (planted degradation) -> train -> evaluate,
then prints the held-out comparison table.
"""

import argparse
import json
import time
from pathlib import Path

from regfree_sr.cli import main

HERE = Path(__file__).resolve().parent


def step(*argv):
    code = main([str(a) for a in argv])
    if code:
        raise SystemExit(code)


def run(out: Path, config: Path, seed: int):
    fx, ds, tr, ev = out / "fixtures", out / "dataset", out / "train", out / "eval"
    t0 = time.perf_counter()
    step("make-fixtures", "--seed", seed, "--out", fx)
    params = json.loads((fx / "fixtures.json").read_text())["lr_measured"]["params"]
    step("build-dataset", "--config", config, "--seed", seed, "--hr-dir", fx / "hr", "--params", json.dumps(params), "--out", ds)
    step("-v", "train", "--config", config, "--seed", seed, "--dataset", ds, "--out", tr)
    step("evaluate", "--config", config, "--dataset", ds, "--checkpoint", tr / "final.ckpt", "--out", ev)
    print(f"total {(time.perf_counter() - t0) / 60:.1f} min")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", type=Path, default=Path("runs/smoke"))
    p.add_argument("--config", type=Path, default=HERE.parent / "configs" / "smoke.json")
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    run(a.out, a.config, a.seed)
