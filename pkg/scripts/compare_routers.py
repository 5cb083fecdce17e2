"""Ablate the routing and capacity choices on one stream.

Three runs on identical data: the analytic router with per-task
adapters, a gradient-trained MLP router over the same features, and a
single shared adapter with no routing at all. Prints the per-phase
routing averages for both routers and the forgetting numbers.

Usage: python3 scripts/compare_routers.py [--config FILE]
"""

import argparse

from adaroute.config import config_from_toml, default_config
from adaroute.harness import (
    compute_bwt,
    compute_op,
    run_bp_router_baseline,
    run_continual,
    run_single_adapter_baseline,
)
from adaroute.tasks import generate_task_stream


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=None)
    args = ap.parse_args()

    config = config_from_toml(args.config) if args.config else default_config()
    stream = generate_task_stream(config.stream, config.stream_seed)

    routed = run_continual(stream, config)
    mlp_trace = run_bp_router_baseline(stream, config)
    shared = run_single_adapter_baseline(stream, config)

    print("routing accuracy per phase (average over seen tasks)")
    print("  analytic:", " ".join(f"{a:.3f}" for a in routed.trace.averages))
    print("  gradient:", " ".join(f"{a:.3f}" for a in mlp_trace.averages))
    print()
    print("final scores")
    print(
        f"  routed adapters   op {compute_op(routed.matrix):.4f}"
        f"  bwt {compute_bwt(routed.matrix):+.4f}"
    )
    print(
        f"  one shared adapter op {compute_op(shared):.4f}"
        f"  bwt {compute_bwt(shared):+.4f}"
    )


if __name__ == "__main__":
    main()
