"""Run one sub-layer under all four execution modes and print a table."""
import argparse
import dataclasses
import time

from mergesim.runner import ExperimentConfig, Simulation
from mergesim.workloads import ExecMode, MODEL_PRESETS, gen_sublayer


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--model", default="mega-gpt-4b-half")
    ap.add_argument("--layer", default="L1")
    ap.add_argument("--batch", type=int, default=1)
    ap.add_argument("--gpus", type=int, default=8)
    ap.add_argument("--switches", type=int, default=4)
    ap.add_argument("--skew", type=int, default=0)
    ap.add_argument("--jitter", type=int, default=0)
    ap.add_argument("--credits", type=int, default=0)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    model = dataclasses.replace(MODEL_PRESETS[args.model], batch=args.batch)
    wl = gen_sublayer(model, args.layer, args.gpus)
    for mode in ExecMode:
        compute = dataclasses.replace(
            dataclasses.replace(ExperimentConfig().compute,
                                gpu_skew_ns=args.skew,
                                tb_jitter_ns=args.jitter),
            **({"max_outstanding_loads": args.credits} if args.credits else {}))
        cfg = ExperimentConfig(name="cmp", n_gpus=args.gpus,
                               n_switches=args.switches, mode=mode,
                               seed=args.seed, compute=compute)
        t0 = time.time()
        r = Simulation(cfg, wl).run()
        util = r.counters.mean_utilization(r.makespan_ns)
        m = r.merge
        print(f"{args.layer} b{args.batch} j{args.jitter} {mode.value:8s} "
              f"mk={r.makespan_ns:>9} util={util:.3f} "
              f"merged={r.fully_merged} byp={m['bypasses']:>6} "
              f"lru={m['lru_evictions']:>6} to={m['timeout_evictions']:>5} "
              f"peak={m['peak_entries_per_port']:>4} "
              f"parked={r.sync['tbs_parked']:>5} "
              f"maxlat={r.sync['max_load_latency_ns']:>6} "
              f"ok={r.completed} ev={r.events} ({time.time()-t0:.0f}s)",
              flush=True)


if __name__ == "__main__":
    main()
