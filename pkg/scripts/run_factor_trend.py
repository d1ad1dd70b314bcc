"""Train one model per scaling factor and compare PCC/NMSE on held-out synthetic pairs."""
import argparse
import time

from stadm.experiments import TREND_CONFIG, factor_trend


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--factors", type=int, nargs="+", default=[2, 4], help="divisors of the 32 HR channels")
    ap.add_argument("--train-pairs", type=int, default=256)
    ap.add_argument("--test-pairs", type=int, default=32)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="sampling seeds")
    ap.add_argument("--max-steps", type=int, default=TREND_CONFIG.max_steps)
    a = ap.parse_args()
    start = time.perf_counter()
    points = factor_trend(a.factors, a.train_pairs, a.test_pairs, a.seeds,
                          TREND_CONFIG.replace(max_steps=a.max_steps))
    print("factor,lr_channels,pcc,nmse,final_loss")
    for p in points:
        print(f"{p.factor},{32 // p.factor},{p.mean_pcc:.4f},{p.mean_nmse:.4f},{p.final_loss:.4f}")
    print(f"# {time.perf_counter() - start:.0f} s")


if __name__ == "__main__":
    main()
