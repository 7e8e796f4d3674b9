"""Natural vs adversarial episodic training on the synthetic set.

Trains one model per (mode, seed), evaluates each on held-out episodes
under FGSM and prints seed-averaged clean/adversarial accuracy and F0.5.

    python demos/desk_experiment.py --seeds 0 --epochs 2
"""

import argparse
import time

import numpy as np

from mdat import evalkit, trainer
from mdat.episodes import generate_synthetic, quantize

MODES = {"NT": ("none", 0.0), "AT": ("none", 0.01), "AT+class": ("class", 0.01),
         "AT+fea": ("fea", 0.01), "MDAT": ("both", 0.01)}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--methods", nargs="+", default=["NT", "AT", "AT+class", "MDAT"], choices=list(MODES))
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--episodes", type=int, default=200)
    ap.add_argument("--width", type=int, default=32)
    ap.add_argument("--res", type=int, default=16)
    ap.add_argument("--eval-episodes", type=int, default=300)
    args = ap.parse_args()

    data = quantize(generate_synthetic(20, 60, args.res, seed=0))
    eps_list = evalkit.DEFAULT_EPSILONS
    rows = {}
    for name in args.methods:
        mode, eps_max = MODES[name]
        reports = []
        for seed in args.seeds:
            cfg = trainer.TrainConfig(epochs=args.epochs, episodes_per_epoch=args.episodes, mode=mode,
                                      eps_max=eps_max, widths=(args.width,) * 4, seed=seed)
            t0 = time.perf_counter()
            result = trainer.train(cfg, data)
            rep = evalkit.evaluate(result.best, data, eps_list, "fgsm", args.eval_episodes, seed=seed)
            reports.append(rep)
            print(f"{name:9s} seed {seed}  clean {rep.acc_clean:.3f}  "
                  + "  ".join(f"adv@{e} {rep.acc_adv[e]:.3f}" for e in eps_list)
                  + f"  ({time.perf_counter() - t0:.0f}s)", flush=True)
        clean = np.mean([r.acc_clean for r in reports])
        rows[name] = (clean, {e: np.mean([r.acc_adv[e] for r in reports]) for e in eps_list})

    print()
    print(f"{'method':9s} {'clean':>6s} " + " ".join(f"{'adv@' + str(e):>10s} {'F0.5':>6s}" for e in eps_list))
    for name, (clean, adv) in rows.items():
        cells = " ".join(f"{adv[e]:10.3f} {evalkit.f_beta(clean, adv[e], 0.5):6.3f}" for e in eps_list)
        print(f"{name:9s} {clean:6.3f} {cells}")


if __name__ == "__main__":
    main()
