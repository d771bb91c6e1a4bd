"""``bench`` command line entry point."""
from __future__ import annotations

import sys

import click

from .driver import ENGINES, run
from .report import report_csv, report_json
from .workload import MIXES, WorkloadSpec


@click.command()
@click.option("--engine", type=click.Choice(ENGINES), default="sherman", show_default=True)
@click.option("--workload", type=click.Choice(list(MIXES)), default="write-intensive",
              show_default=True)
@click.option("--dist", type=click.Choice(["uniform", "zipf"]), default="uniform",
              show_default=True)
@click.option("--theta", type=float, default=0.99, show_default=True)
@click.option("--keys", type=int, default=10**6, show_default=True, help="bulkloaded keys")
@click.option("--ops", type=int, default=10**5, show_default=True)
@click.option("--threads", type=int, default=8, show_default=True, help="threads per CS")
@click.option("--ms", type=int, default=4, show_default=True)
@click.option("--cs", type=int, default=4, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--cache-mb", type=float, default=64, show_default=True)
@click.option("--node-bytes", type=int, default=1024, show_default=True)
@click.option("--range-size", type=int, default=100, show_default=True)
@click.option("--warmup", type=int, default=0, show_default=True)
@click.option("--update-fraction", type=float, default=2 / 3, show_default=True)
@click.option("--interleave-prob", type=float, default=0.0, show_default=True)
@click.option("--fg-original", is_flag=True, help="release FG+ locks with FAA")
@click.option("--out", type=click.Path(dir_okay=False), required=True,
              help="CSV path; a .json suffix writes JSON instead")
def main(engine, workload, dist, theta, keys, ops, threads, ms, cs, seed, cache_mb,
         node_bytes, range_size, warmup, update_fraction, interleave_prob, fg_original, out):
    """Run one workload against one engine and write the metrics report."""
    try:
        spec = WorkloadSpec(workload=workload, dist=dist, theta=theta, key_space=keys,
                            op_count=ops, threads=threads, ms=ms, cs=cs, seed=seed,
                            cache_mb=cache_mb, node_bytes=node_bytes, range_size=range_size,
                            warmup=warmup, update_fraction=update_fraction,
                            interleave_prob=interleave_prob, fg_original=fg_original)
        result = run(spec, engine)
    except ValueError as err:
        raise click.UsageError(str(err))
    rep = result.report
    if out.endswith(".json"):
        report_json(rep, out)
    else:
        report_csv(rep, out)
    click.echo(f"{engine} {workload}: {rep.op_count} ops, {rep.throughput:,.0f} ops/s simulated, "
               f"p99 {rep.latency_percentiles[99]:.2f} us" if rep.op_count else
               f"{engine} {workload}: no operations", file=sys.stderr)


if __name__ == "__main__":
    main()
