"""Experiment driver tying the library together.

Sub-commands:

- ``infer``: run one inference under a chosen runtime and power schedule,
  write the stats row and predicted class.
- ``crashsweep``: run many seeded random power schedules (plus an optional
  exhaustive failure-at-every-boundary pass) and compare every run against
  the continuous-power oracle.
- ``compress``: sweep a compression grid, write the frontier report, and
  select the configuration maximizing estimated messages per Joule.
- ``impj``: emit the application-model table across an accuracy sweep.
- ``calibrate``: run accelerator tile calibration against a power budget.
- ``report``: merge run reports into one side-by-side CSV.

Exit codes: 0 success, 2 validation error (including an infeasible sweep
or an unusable accelerator), 3 non-termination, 4 divergence detected.
Reports are deterministic functions of the arguments and seeds and embed
the resolved configuration; no timestamps.

The environment variable ``INTERMITTENT_CONFIG_DIR`` names a directory
searched for relative config paths.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from .compress import (
    NoFeasibleConfiguration,
    grid_from_file,
    search,
    write_report_csv,
)
from .device import (
    BUFFER_PRESETS,
    ContractViolation,
    CostModel,
    Device,
    EnergyBuffer,
    PowerSchedule,
    device_from_config,
    load_device_config,
    write_trace_csv,
)
from .impj import ImpjParams, accuracy_sweep, impj_baseline, impj_ideal, impj_inference, load_presets, params_from_preset
from .model import ModelError, load_dataset, load_model, reference_infer
from .runtime import ConfigError, NonTermination, naive_infer, tiled_infer
from .sonic import sonic_infer
from .tails import UnusableAccelerator, calibrate, tails_infer

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NONTERMINATION = 3
EXIT_DIVERGENCE = 4

CONFIG_DIR_ENV = "INTERMITTENT_CONFIG_DIR"


class CliError(ValueError):
    pass


def _resolve_path(path: str) -> Path:
    p = Path(path)
    if not p.is_absolute() and not p.exists():
        base = os.environ.get(CONFIG_DIR_ENV)
        if base and (Path(base) / p).exists():
            return Path(base) / p
    return p


def _parse_schedule(spec: str, seed: int) -> PowerSchedule:
    """Schedule spec strings: "continuous", "fixed:<budget_uj>",
    "random:<low_uj>:<high_uj>" (uses --seed)."""
    if spec == "continuous":
        return PowerSchedule.continuous()
    if spec.startswith("fixed:"):
        return PowerSchedule.fixed_budget(float(spec.split(":", 1)[1]))
    if spec.startswith("random:"):
        _, lo, hi = spec.split(":")
        return PowerSchedule.seeded_random(seed, float(lo), float(hi))
    raise CliError(f"bad schedule spec {spec!r}")


def _build_device(args, *, schedule: PowerSchedule | None = None) -> Device:
    if getattr(args, "device_config", None):
        cfg = load_device_config(_resolve_path(args.device_config))
    else:
        cfg = {}
    costs = CostModel.from_dict(cfg.get("costs", {})) if cfg.get("costs") else CostModel()
    if getattr(args, "preset", None):
        buffer = EnergyBuffer.from_preset(args.preset)
    elif "buffer" in cfg:
        dev = device_from_config(cfg)
        buffer = EnergyBuffer(capacity_uj=dev.capacity_uj, preset_name=dev.preset_name)
    else:
        buffer = EnergyBuffer(capacity_uj=float(getattr(args, "capacity", 0) or float("inf")))
    if schedule is None:
        schedule = _parse_schedule(getattr(args, "schedule", "continuous"),
                                   getattr(args, "seed", 0))
    return Device(costs=costs, buffer=buffer, schedule=schedule,
                  keep_trace=bool(getattr(args, "trace", None)))


RUNTIMES = ("naive", "sonic", "tails")  # plus tiled:<k>


def _run_inference(runtime: str, net, inp, device):
    if runtime == "naive":
        return naive_infer(net, inp, device)
    if runtime == "sonic":
        return sonic_infer(net, inp, device)
    if runtime == "tails":
        return tails_infer(net, inp, device)
    if runtime.startswith("tiled:"):
        return tiled_infer(net, inp, device, tile=int(runtime.split(":", 1)[1]))
    raise CliError(f"unknown runtime {runtime!r}; use naive, tiled:<k>, sonic, or tails")


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_stats_csv(path, rows: list[dict]) -> None:
    keys = sorted({k for row in rows for k in row})
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)


def _resolved_config(args, extra: dict) -> dict:
    skip = {"func"}
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in skip}
    cfg.update(extra)
    return cfg


# -- sub-commands -------------------------------------------------------------


def cmd_infer(args) -> int:
    net = load_model(_resolve_path(args.model))
    ds = load_dataset(_resolve_path(args.dataset))
    if not 0 <= args.index < len(ds):
        raise CliError(f"sample index {args.index} out of range")
    inp = ds.sample(args.index)
    device = _build_device(args)
    stats = _run_inference(args.runtime, net, inp, device)
    report = {
        "command": "infer",
        "config": _resolved_config(args, {"costs": device.costs.to_dict()}),
        "result": {
            "predicted_class": stats.predicted_class,
            "label": int(ds.labels[args.index]),
            "scores": list(stats.scores),
            "completed": stats.completed,
        },
        "stats": stats.as_dict(),
    }
    if args.out:
        _write_json(args.out, report)
    if args.out_csv:
        _write_stats_csv(args.out_csv, [stats.as_dict()])
    if args.trace:
        write_trace_csv(device, args.trace)
    print(f"runtime={stats.runtime} predicted={stats.predicted_class} "
          f"energy_uj={stats.total_energy_uj:.2f} reboots={stats.reboots}")
    return EXIT_OK


def run_crash_sweep(net, inp, runtime: str, *, seeds: int, budget_lo: float,
                    budget_hi: float, exhaustive: bool = False,
                    exhaustive_limit: int = 4000, costs: CostModel | None = None,
                    runner_factory=None) -> dict:
    """Compare runs under many schedules against the continuous oracle.

    ``runner_factory(net, device)`` overrides runtime construction (used by
    tests to prove a broken runtime is detected). Returns a summary with
    any diverging seed/boundary identifiers.
    """
    costs = costs or CostModel()
    expect = reference_infer(net, inp).data.tolist()

    def run_one(schedule):
        device = Device(costs=costs,
                        buffer=EnergyBuffer(capacity_uj=budget_hi),
                        schedule=schedule)
        if runner_factory is not None:
            runner = runner_factory(net, device)
            runner.load_input(inp)
            return runner.run()
        return _run_inference(runtime, net, inp, device)

    divergences = []
    runs = 0
    for seed in range(seeds):
        stats = run_one(PowerSchedule.seeded_random(seed, budget_lo, budget_hi))
        runs += 1
        if list(stats.scores) != expect:
            divergences.append({"kind": "seed", "id": seed})

    boundary_count = 0
    if exhaustive:
        probe = Device(costs=costs, schedule=PowerSchedule.continuous())
        if runner_factory is not None:
            r = runner_factory(net, probe)
            r.load_input(inp)
            r.run()
        else:
            _run_inference(runtime, net, inp, probe)
        total_ops = probe.op_count
        if total_ops > exhaustive_limit:
            raise CliError(
                f"exhaustive pass needs {total_ops} runs (> {exhaustive_limit}); "
                "use a smaller fixture"
            )
        for k in range(1, total_ops + 1):
            stats = run_one(PowerSchedule.op_trace([k]))
            runs += 1
            boundary_count += 1
            if list(stats.scores) != expect:
                divergences.append({"kind": "boundary", "id": k})

    return {
        "runtime": runtime,
        "seeds": seeds,
        "boundaries": boundary_count,
        "runs": runs,
        "divergences": divergences,
        "passed": not divergences,
    }


def cmd_crashsweep(args) -> int:
    net = load_model(_resolve_path(args.model))
    ds = load_dataset(_resolve_path(args.dataset))
    inp = ds.sample(args.index)
    summary = run_crash_sweep(
        net, inp, args.runtime, seeds=args.seeds,
        budget_lo=args.budget_lo, budget_hi=args.budget_hi,
        exhaustive=args.exhaustive,
    )
    report = {
        "command": "crashsweep",
        "config": _resolved_config(args, {}),
        "summary": summary,
    }
    if args.out:
        _write_json(args.out, report)
    print(f"crashsweep runtime={args.runtime} runs={summary['runs']} "
          f"divergences={len(summary['divergences'])}")
    return EXIT_OK if summary["passed"] else EXIT_DIVERGENCE


def cmd_compress(args) -> int:
    net = load_model(_resolve_path(args.model))
    ds = load_dataset(_resolve_path(args.dataset))
    grid = grid_from_file(_resolve_path(args.sweep))
    preset = load_presets(_resolve_path(args.preset) if args.preset else None)
    params = params_from_preset(preset, system=args.system,
                                result_only=args.result_only)
    costs = CostModel()
    if args.device_config:
        cfg = load_device_config(_resolve_path(args.device_config))
        if cfg.get("costs"):
            costs = CostModel.from_dict(cfg["costs"])
    try:
        result = search(net, grid, ds, params, args.memory_bound, costs,
                        interesting_class=args.interesting_class)
    except NoFeasibleConfiguration as e:
        if args.out_csv:
            write_report_csv(e.rows, args.out_csv)
        print(f"no feasible configuration: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.out_csv:
        write_report_csv(result.rows(), args.out_csv)
    if args.out:
        _write_json(args.out, {
            "command": "compress",
            "config": _resolved_config(args, {}),
            "chosen": result.chosen.row(),
            "frontier": [c.config_id for c in result.frontier],
        })
    print(f"chosen={result.chosen.config_id} impj={result.chosen.impj:.4f} "
          f"bytes={result.chosen.param_bytes}")
    return EXIT_OK


def cmd_impj(args) -> int:
    preset = load_presets(_resolve_path(args.preset) if args.preset else None)
    accs = [round(args.acc_start + i * args.acc_step, 10)
            for i in range(int((args.acc_stop - args.acc_start) / args.acc_step) + 1)]
    rows = accuracy_sweep(preset, accs, result_only=args.result_only)
    if args.out_csv:
        with open(args.out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    base = ImpjParams(p=preset["p"], t_p=1, t_n=1,
                      e_sense_j=preset["e_sense_j"], e_comm_j=preset["e_comm_image_j"])
    fast = params_from_preset(preset, system="accelerated", result_only=True)
    naive = params_from_preset(preset, system="naive", result_only=True)
    ideal_result = ImpjParams(p=preset["p"], t_p=1, t_n=1,
                              e_sense_j=preset["e_sense_j"],
                              e_comm_j=preset["e_comm_result_j"])
    summary = {
        "baseline_full_image": impj_baseline(base),
        "ideal_over_baseline": impj_ideal(base) / impj_baseline(base),
        "result_only_accelerated_over_baseline":
            impj_inference(fast) / impj_baseline(base),
        "accelerated_over_naive": impj_inference(fast) / impj_inference(naive),
        "ideal_over_accelerated": impj_ideal(ideal_result) / impj_inference(fast),
    }
    if args.out:
        _write_json(args.out, {
            "command": "impj",
            "config": _resolved_config(args, {}),
            "summary": summary,
        })
    for k, v in summary.items():
        print(f"{k}: {v:.4f}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    schedule = _parse_schedule(args.schedule, args.seed)
    device = Device(
        buffer=EnergyBuffer(capacity_uj=args.capacity or float("inf")),
        schedule=schedule,
    )
    res = calibrate(device, initial_tile=args.initial_tile)
    report = {
        "command": "calibrate",
        "config": _resolved_config(args, {}),
        "tile": res.tile,
        "valid": res.valid,
        "attempts": list(res.attempts),
    }
    if args.out:
        _write_json(args.out, report)
    print(f"calibrated tile={res.tile} attempts={list(res.attempts)}")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    for path in args.inputs:
        payload = json.loads(Path(path).read_text())
        if "stats" in payload:
            rows.append(payload["stats"])
        elif "summary" in payload:
            rows.append({"runtime": payload["summary"].get("runtime", "?"),
                         **{k: v for k, v in payload["summary"].items()
                            if not isinstance(v, (list, dict))}})
    if not rows:
        raise CliError("no stats found in inputs")
    _write_stats_csv(args.out_csv, rows)
    print(f"wrote {len(rows)} rows to {args.out_csv}")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------


def _add_device_args(p):
    p.add_argument("--device-config", help="JSON device config file")
    p.add_argument("--preset", choices=sorted(BUFFER_PRESETS),
                   help="energy-buffer capacity preset")
    p.add_argument("--capacity", type=float, default=0.0,
                   help="buffer capacity in uJ (0 = unbounded)")
    p.add_argument("--schedule", default="continuous",
                   help="continuous | fixed:<uj> | random:<lo>:<hi>")
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="intermittent-sim",
        description="simulate DNN inference on intermittently powered devices",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("infer", help="run one inference")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--runtime", default="sonic")
    _add_device_args(p)
    p.add_argument("--out", help="report JSON path")
    p.add_argument("--out-csv", help="stats CSV path")
    p.add_argument("--trace", help="per-cycle energy trace CSV path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("crashsweep", help="failure-injection sweep vs oracle")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--runtime", default="sonic")
    p.add_argument("--seeds", type=int, default=1000)
    p.add_argument("--budget-lo", type=float, default=320.0)
    p.add_argument("--budget-hi", type=float, default=900.0)
    p.add_argument("--exhaustive", action="store_true",
                   help="also inject one failure at every op boundary")
    p.add_argument("--out", help="summary JSON path")
    p.set_defaults(func=cmd_crashsweep)

    p = sub.add_parser("compress", help="compression sweep and selection")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--sweep", required=True, help="sweep grid JSON")
    p.add_argument("--memory-bound", type=int, required=True,
                   help="parameter budget in bytes")
    p.add_argument("--interesting-class", type=int, default=0)
    p.add_argument("--preset", help="IMpJ preset JSON (default: packaged)")
    p.add_argument("--system", choices=("naive", "accelerated"), default="accelerated")
    p.add_argument("--result-only", action="store_true")
    p.add_argument("--device-config")
    p.add_argument("--out", help="summary JSON path")
    p.add_argument("--out-csv", help="frontier report CSV path")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("impj", help="application-model accuracy sweep")
    p.add_argument("--preset", help="preset JSON (default: packaged)")
    p.add_argument("--acc-start", type=float, default=0.5)
    p.add_argument("--acc-stop", type=float, default=1.0)
    p.add_argument("--acc-step", type=float, default=0.01)
    p.add_argument("--result-only", action="store_true")
    p.add_argument("--out", help="summary JSON path")
    p.add_argument("--out-csv", help="sweep table CSV path")
    p.set_defaults(func=cmd_impj)

    p = sub.add_parser("calibrate", help="accelerator tile calibration")
    p.add_argument("--capacity", type=float, default=0.0)
    p.add_argument("--schedule", default="continuous")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--initial-tile", type=int, default=256)
    p.add_argument("--out", help="result JSON path")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("report", help="merge run reports into one CSV")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_report)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except NonTermination as e:
        print(f"non-termination: {e}", file=sys.stderr)
        return EXIT_NONTERMINATION
    except UnusableAccelerator as e:
        print(f"unusable accelerator: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (CliError, ModelError, ConfigError, ContractViolation, ValueError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
