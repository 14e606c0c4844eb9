#!/usr/bin/env python
"""Measured RMSE of a perfect model under Gaussian sample noise.

For each noise level, runs many seeds of a 200-interval event and reports the
spread of the RMSE metric. With a perfect model RMSE tracks the noise level.
"""

import argparse

import numpy as np

from gridflex.domain import ClusterSpec, EventSpec, EventStep, FlexTier, JobKind, JobSpec, JobState
from gridflex.planner import PRESETS, build_envelope, plan
from gridflex.powerperf import default_curves, predict_cluster
from gridflex.simengine import SimConfig, rmse_percent, run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, default=100)
    ap.add_argument("--noise", type=float, nargs="+", default=[0.01, 0.02, 0.03, 0.045])
    ap.add_argument("--mismatch", type=float, default=0.0, help="per-job power model error (relative std)")
    args = ap.parse_args()

    cluster, curves = ClusterSpec(), default_curves()
    jobs = [
        JobSpec("pt", JobKind.PRETRAINING, "MPT-13B", 8, FlexTier.FLEX3, "pretrain"),
        JobSpec("ft", JobKind.FINETUNING, "LLaMA-8B", 6, FlexTier.FLEX2, "finetune"),
        JobSpec("inf", JobKind.INFERENCE, "LLaMA-8B", 4, FlexTier.FLEX0, "inference"),
    ]
    full = predict_cluster([JobState.fresh(j) for j in jobs], curves, cluster).cluster_watts
    env = build_envelope(EventSpec(full, (EventStep(0.2, 900, 8400),), 900, 1800), 60.0)
    p = plan(jobs, cluster, curves, env, PRESETS["cap+pause/fair"], sla_window=6 * 3600)
    print(f"{'noise':>6} {'mean':>7} {'p5':>7} {'p95':>7}")
    for sigma in args.noise:
        vals = np.array([
            rmse_percent(run(jobs, cluster, curves, p, env,
                             SimConfig(noise_std_fraction=sigma, rng_seed=s, model_mismatch=args.mismatch)))
            for s in range(args.seeds)
        ])
        print(f"{sigma:>6.3f} {vals.mean():>7.3f} {np.percentile(vals, 5):>7.3f} {np.percentile(vals, 95):>7.3f}")


if __name__ == "__main__":
    main()
