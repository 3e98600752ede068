"""Adaptation throughput per mode on the canonical target scene.

    python3 benchmarks/throughput.py [--modes source,pbn,full] [--profile]

Prints points per second for each mode and, with --profile, the ten most
expensive functions of the last mode.
"""
import argparse
import cProfile
import pstats
import time

from threadpoolctl import threadpool_limits

from pcltta.adaptation import run_tta
from pcltta.network import BnMode, init_network
from pcltta.report import canonical_config, make_domains


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--modes", default="source,adabn,tent,pbn,pbn_im,full")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--profile", action="store_true")
    args = ap.parse_args()

    cfg = canonical_config()
    _, target = make_domains(cfg)
    net = init_network(cfg.arch, 0)        # untrained weights cost the same
    net.set_bn_mode(BnMode.SOURCE_EVAL)
    with threadpool_limits(args.threads):
        for mode in args.modes.split(","):
            acfg = cfg.adapt_config(mode, seed=0)
            prof = cProfile.Profile() if args.profile else None
            t = time.perf_counter()
            if prof:
                prof.enable()
            res = run_tta(net, target, acfg, cfg.sampling)
            if prof:
                prof.disable()
            dt = time.perf_counter() - t
            print(f"{mode:8s} {len(target):7d} pts  {res.num_batches:4d} batches  {dt:6.2f}s  "
                  f"{len(target) / dt:9.0f} pts/s")
    if args.profile:
        pstats.Stats(prof).sort_stats("tottime").print_stats(10)


if __name__ == "__main__":
    main()
