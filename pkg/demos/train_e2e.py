"""Train the end-to-end pipeline briefly and compare it with the baselines.

Uses a short schedule so it runs in about a minute; configs/desk.ini holds the
longer recipe the acceptance suite trains with.
"""

import sys

import numpy as np

from nfris import baseline as bl
from nfris import channel as ch
from nfris import e2enet as E
from nfris.scenario import TrainConfig, desk_config


def main(arch: str = "sa-ris") -> None:
    cfg = desk_config()
    train = [ch.scenario_channels(cfg, i) for i in range(200)]
    test = [ch.scenario_channels(cfg, 50_000 + i) for i in range(10)]
    hyper = TrainConfig(epochs=8, batch_size=16)

    def log(row):
        print(f"epoch {row['epoch']:3d}  train loss {row['train_loss']:7.3f}  val SE {row['mean_SE']:6.3f}")

    res = E.train(train, arch, cfg, hyper, log=log)
    e2e = E.evaluate(res.params, test, arch, cfg, hyper.val_snr_r_db, np.random.default_rng(1))
    rnd = [bl.random_baseline(c, arch, cfg, np.random.default_rng(i), trials=20)["median"]
           for i, c in enumerate(test)]
    pgd = bl.pgd_perfect_csi(test, arch, cfg, steps=200, rng=np.random.default_rng(2)).se
    print(f"{arch}: median SE  e2e {np.median(e2e):.3f}  perfect-CSI PGD {np.median(pgd):.3f}"
          f"  random {np.median(rnd):.3f}")


if __name__ == "__main__":
    main(*sys.argv[1:])
