"""Run the default eight-task stream end to end and print the report.

Usage: python3 scripts/run_default.py [--order {1,2}] [--out DIR]
"""

import argparse

from adaroute.config import default_config, with_order
from adaroute.harness import run_continual
from adaroute.reporting import full_report, result_record, write_run_outputs
from adaroute.tasks import generate_task_stream


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--order", default="1", choices=["1", "2"])
    ap.add_argument("--out", default=None, help="directory for record/csv artifacts")
    args = ap.parse_args()

    config = with_order(default_config(), args.order)
    stream = generate_task_stream(config.stream, config.stream_seed)
    result = run_continual(stream, config)
    record = result_record(result, config)
    print(full_report(record))
    if args.out:
        for path in write_run_outputs(record, args.out).values():
            print(f"wrote {path}")


if __name__ == "__main__":
    main()
