"""Band-power probe on SR, LR and HR versions of normal/abnormal synthetic epochs."""
import argparse

import numpy as np

from stadm.experiments import OVERFIT_CONFIG, overfit_run, probe_comparison
from stadm.pipeline import Checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ckpt", help="trained checkpoint; default trains the overfit model first")
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--per-class", type=int, default=40)
    a = ap.parse_args()
    ckpt = Checkpoint.load(a.ckpt) if a.ckpt else overfit_run(OVERFIT_CONFIG)[0]
    results = probe_comparison(ckpt, range(a.seeds), a.per_class)
    print("seed,sr,lr,hr")
    for r in results:
        print(f"{r.seed},{r.sr:.4f},{r.lr:.4f},{r.hr:.4f}")
    means = [np.mean([getattr(r, k) for r in results]) for k in ("sr", "lr", "hr")]
    print("mean," + ",".join(f"{m:.4f}" for m in means))


if __name__ == "__main__":
    main()
