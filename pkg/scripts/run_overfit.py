"""Overfit four synthetic pairs (16 -> 32 channels) and report reconstruction metrics."""
import argparse
import time

from stadm.experiments import OVERFIT_CONFIG, mean_of, overfit_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0, help="training seed")
    ap.add_argument("--max-steps", type=int, default=OVERFIT_CONFIG.max_steps)
    ap.add_argument("--save", help="write the trained checkpoint here")
    a = ap.parse_args()
    start = time.perf_counter()
    ckpt, reports = overfit_run(OVERFIT_CONFIG.replace(seed=a.seed, max_steps=a.max_steps))
    for i, r in enumerate(reports):
        m = r.means()
        print(f"pair {i}: pcc {m['pcc']:.4f} nmse {m['nmse']:.4f} snr {m['snr_db']:.2f} dB")
    print(f"mean pcc {mean_of(reports, 'pcc'):.4f} nmse {mean_of(reports, 'nmse'):.4f} "
          f"({len(ckpt.loss_trace)} steps, {time.perf_counter() - start:.0f} s)")
    if a.save:
        ckpt.save(a.save)


if __name__ == "__main__":
    main()
