"""Command-line front end: ``simulate``, ``sweep``, ``verify`` and ``importance``.

``simulate`` writes report.json, stages.csv, breakdown.dat and PNG figures
into ``--out``. ``sweep`` writes sweep.csv (and sweep.png). ``verify`` prints
the suite table and exits 0 only when every suite passes.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

from .progressive import PQPolicy
from .pruning import PruneSchedule, make_schedule, write_importance_csv
from .simarch import (KB, STAGE_CSV_HEADER, ArchConfig, CapacityError, Precision, simulate,
                      speedup_breakdown, stage_rows)
from .topk import TopKConfig
from .workloads import PRESETS, importance_from_trace, preset, read_trace, run_model, synthetic_trace

SEED_ENV = "SPATTEN_SEED"

# config key -> (type, default)
CONFIG_KEYS = {
    "preset": (str, None),
    "token_keep_avg": (float, 1.0),
    "head_keep_avg": (float, 1.0),
    "v_keep": (float, 1.0),
    "msb": (int, 8),
    "lsb": (int, 4),
    "pq_threshold": (float, 0.1),
    "topk_parallelism": (int, 16),
    "seed": (int, 0),
    "prune": (lambda s: _parse_bool(s), True),
    "pq": (lambda s: _parse_bool(s), True),
    "input_mode": (str, "mixed"),
    "flat_fraction": (float, 0.059),
    "granularity": (str, "layer"),
}

SWEEP_HEADER = ("preset", "token_keep", "head_keep", "parallelism", "sram_kb", "msb", "lsb",
                "cycles", "latency_s", "dram_bytes", "flops", "effective_flops")


class ConfigError(ValueError):
    pass


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def load_config(path) -> dict:
    """Parse flat ``key = value`` text; ``#`` starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = (x.strip() for x in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            conv = CONFIG_KEYS[key][0]
            try:
                out[key] = conv(value)
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return out


def resolve_settings(args) -> dict:
    """Defaults < config file < SPATTEN_SEED < explicit flags."""
    settings = {k: default for k, (_, default) in CONFIG_KEYS.items()}
    if args.config:
        settings.update(load_config(args.config))
    if os.environ.get(SEED_ENV):
        try:
            settings["seed"] = int(os.environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={os.environ[SEED_ENV]!r} is not an integer") from None
    flags = {
        "preset": args.preset, "token_keep_avg": args.token_keep, "head_keep_avg": args.head_keep,
        "v_keep": args.v_keep, "pq_threshold": args.threshold, "topk_parallelism": args.parallelism,
        "seed": args.seed, "input_mode": args.input_mode, "flat_fraction": args.flat_fraction,
        "granularity": args.granularity,
    }
    settings.update({k: v for k, v in flags.items() if v is not None})
    if args.pq:
        try:
            policy = PQPolicy.parse(args.pq)
        except ValueError:
            raise ConfigError(f"--pq expects MSB+LSB such as 8+4, got {args.pq!r}") from None
        settings["msb"], settings["lsb"] = policy.msb_bits, policy.lsb_bits
    if args.no_prune:
        settings["prune"] = False
    if args.no_pq:
        settings["pq"] = False
    if settings["preset"] is None:
        raise ConfigError("missing workload: pass --preset NAME (or preset= in --config); "
                          f"choices: {', '.join(sorted(PRESETS))}")
    if settings["preset"] not in PRESETS:
        raise ConfigError(f"--preset: unknown preset {settings['preset']!r}; "
                          f"choices: {', '.join(sorted(PRESETS))}")
    for key in ("token_keep_avg", "head_keep_avg", "v_keep"):
        if not 0 < settings[key] <= 1:
            raise ConfigError(f"{key} must be in (0, 1], got {settings[key]}")
    if settings["lsb"] < 0 or settings["msb"] < 1:
        raise ConfigError("msb must be >= 1 and lsb >= 0")
    if settings["topk_parallelism"] < 1:
        raise ConfigError("topk_parallelism must be >= 1")
    if settings["input_mode"] not in ("normal", "peaked", "mixed"):
        raise ConfigError(f"input_mode must be normal, peaked or mixed, got {settings['input_mode']!r}")
    if settings["granularity"] not in ("layer", "head"):
        raise ConfigError(f"granularity must be layer or head, got {settings['granularity']!r}")
    return settings


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _write_breakdown_dat(path, steps) -> None:
    """Whitespace-separated table, ready for gnuplot ``using 1:4 with boxes``."""
    with open(path, "w") as fh:
        fh.write("# index step cycles speedup_step speedup_total dram_bytes\n")
        for i, s in enumerate(steps):
            fh.write(f"{i} {s['step']} {s['cycles']} {s['speedup_step']:.6f} "
                     f"{s['speedup_total']:.6f} {s['dram_bytes']}\n")


def cmd_simulate(args) -> int:
    st = resolve_settings(args)
    cfg = preset(st["preset"], seed=st["seed"], mode=st["input_mode"], flat_fraction=st["flat_fraction"])
    arch = ArchConfig()
    topk_cfg = TopKConfig(parallelism=st["topk_parallelism"], rng_seed=st["seed"])
    tk, hk, vk = ((st["token_keep_avg"], st["head_keep_avg"], st["v_keep"]) if st["prune"]
                  else (1.0, 1.0, 1.0))
    schedule = make_schedule(cfg.num_layers, tk, hk) if st["prune"] else PruneSchedule.keep_all(cfg.num_layers)
    pq = PQPolicy(st["pq_threshold"], st["msb"], st["lsb"], True) if st["pq"] and st["lsb"] > 0 else None
    run = run_model(cfg, schedule, pq, topk_cfg, v_keep=vk, granularity=st["granularity"],
                    static_bits=st["msb"] + st["lsb"])
    report = simulate(run.trace, arch, topk_cfg, keep_rows=True)
    rate = run.pq_stats.refetch_rate if pq else 0.0
    bd = speedup_breakdown(cfg, tk, hk, vk, pq, rate, arch, topk_cfg)
    report.breakdown = {"steps": bd["steps"], "refetch_rate": rate}

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    doc["metadata"].pop("_rows", None)
    doc["config"] = {**st, "arch": asdict(arch), "schedule": {
        "token_ratios": schedule.token_ratios, "head_ratios": schedule.head_ratios}}
    (out / "report.json").write_text(json.dumps(doc, indent=2, default=float))
    _write_csv(out / "stages.csv", STAGE_CSV_HEADER, stage_rows(report))
    _write_breakdown_dat(out / "breakdown.dat", bd["steps"])
    if not args.no_figures:
        from . import plotting
        plotting.plot_breakdown(bd["steps"], out / "breakdown.png")
        plotting.plot_stage_cycles(report.stage_cycles, out / "stages.png")
        plotting.plot_roofline(report, arch, out / "roofline.png")
    ps = report.pruning_summary
    print(f"preset={cfg.name} cycles={report.total_cycles} latency_s={report.latency_s:.6e} "
          f"dram_bytes={report.dram_bytes_total} tflops={report.effective_flops_per_s / 1e12:.3f} "
          f"bound={report.roofline['bound']}")
    print(f"token_keep_avg={ps['token_keep_avg']:.4f} head_keep_avg={ps['head_keep_avg']:.4f} "
          f"v_keep_avg={ps['v_keep_avg']:.4f} refetch_rate={rate:.4f}")
    print("breakdown " + " ".join(f"{s['step']}={s['speedup_total']:.3f}x" for s in bd["steps"]))
    print(f"wrote {out}")
    return 0


def _float_list(text: str) -> list:
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text: str) -> list:
    return [int(x) for x in text.split(",") if x.strip()]


def _bits_list(text: str) -> list:
    out = []
    for item in (x.strip() for x in text.split(",")):
        if item:
            msb, lsb = (int(v) for v in item.split("+"))
            out.append((msb, lsb))
    return out


def _sweep_job(job):
    """Build one trace and simulate it at every (P, SRAM) point."""
    (name, seed, tk, hk, vk, msb, lsb, rate, threshold), points = job
    cfg = preset(name, seed=seed)
    schedule = make_schedule(cfg.num_layers, tk, hk)
    prec = Precision(msb, lsb, lsb > 0)
    trace = synthetic_trace(cfg, schedule, prec, rate if lsb > 0 else 0.0, vk, TopKConfig(rng_seed=seed))
    rows = []
    for p, sram_kb in points:
        arch = replace(ArchConfig(), key_sram_bytes=int(sram_kb * KB), value_sram_bytes=int(sram_kb * KB))
        try:
            r = simulate(trace, arch, TopKConfig(parallelism=p, rng_seed=seed))
        except CapacityError as exc:
            print(f"skip P={p} sram={sram_kb}KB: {exc}", file=sys.stderr)
            continue
        rows.append((name, tk, hk, p, sram_kb, msb, lsb, r.total_cycles, r.latency_s,
                     r.dram_bytes_total, r.flops, r.effective_flops_per_s))
    return rows


def cmd_sweep(args) -> int:
    if args.preset is None:
        raise ConfigError("missing workload: pass --preset NAME")
    if args.preset not in PRESETS:
        raise ConfigError(f"--preset: unknown preset {args.preset!r}")
    seed = int(os.environ[SEED_ENV]) if os.environ.get(SEED_ENV) and args.seed is None else (args.seed or 0)
    try:
        axes = {
            "token_keep": _float_list(args.token_keep),
            "head_keep": _float_list(args.head_keep),
            "parallelism": _int_list(args.parallelism),
            "sram_kb": _float_list(args.sram_kb),
            "bits": _bits_list(args.bits),
        }
    except ValueError as exc:
        raise ConfigError(f"bad grid value: {exc}") from None
    jobs = {}
    for tk, hk, (msb, lsb) in itertools.product(axes["token_keep"], axes["head_keep"], axes["bits"]):
        key = (args.preset, seed, tk, hk, args.v_keep, msb, lsb, args.refetch_rate, 0.1)
        jobs[key] = list(itertools.product(axes["parallelism"], axes["sram_kb"]))
    jobs = [(k, v) for k, v in jobs.items() if v]
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as ex:
            results = list(ex.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    rows = [r for chunk in results for r in chunk]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "sweep.csv", SWEEP_HEADER, rows)
    varying = [k for k in ("parallelism", "token_keep", "head_keep", "sram_kb") if len(axes[k]) > 1]
    if rows and varying and not args.no_figures:
        from . import plotting
        dict_rows = [dict(zip(SWEEP_HEADER, r)) for r in rows]
        group = varying[1] if len(varying) > 1 else None
        plotting.plot_sweep(dict_rows, varying[0], out / "sweep.png", group_key=group)
    print(f"points={len(rows)} wrote {out / 'sweep.csv'}")
    return 0


def cmd_verify(args) -> int:
    from .verify import format_table, run_all
    only = {int(x) for x in args.only.split(",")} if args.only else None
    results = run_all(fault=args.fault, only=only, seed=args.seed)
    print(format_table(results))
    passed = sum(r.passed for r in results)
    print(f"{passed}/{len(results)} suites passed")
    return 0 if passed == len(results) else 1


def cmd_importance(args) -> int:
    probs = read_trace(args.trace)
    layers = probs.shape[0]
    schedule = make_schedule(layers, args.token_keep, 1.0)
    state, kept = importance_from_trace(probs, schedule, TopKConfig(rng_seed=args.seed or 0))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_importance_csv(out, state)
    print("kept_per_layer " + ",".join(str(k.size) for k in kept))
    print(f"wrote {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnsim", description="Sparse attention accelerator model")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="run one workload and write reports")
    s.add_argument("--config", help="key=value config file")
    s.add_argument("--preset", help=f"one of {', '.join(sorted(PRESETS))}")
    s.add_argument("--token-keep", type=float, help="average token keep fraction over all layers")
    s.add_argument("--head-keep", type=float, help="average head keep fraction over all layers")
    s.add_argument("--v-keep", type=float, help="local value keep fraction per query")
    s.add_argument("--pq", help="progressive quantization split, e.g. 8+4")
    s.add_argument("--threshold", type=float, help="max-probability threshold for LSB refetch")
    s.add_argument("--no-prune", action="store_true")
    s.add_argument("--no-pq", action="store_true")
    s.add_argument("--parallelism", type=int, help="top-k engine comparators")
    s.add_argument("--seed", type=int)
    s.add_argument("--input-mode", choices=("normal", "peaked", "mixed"))
    s.add_argument("--flat-fraction", type=float, help="share of flat query rows in mixed mode")
    s.add_argument("--granularity", choices=("layer", "head"))
    s.add_argument("--out", default="out")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_simulate)

    w = sub.add_parser("sweep", help="cross-product design-space sweep")
    w.add_argument("--preset")
    w.add_argument("--token-keep", default="1.0", help="comma list")
    w.add_argument("--head-keep", default="1.0", help="comma list")
    w.add_argument("--parallelism", default="16", help="comma list")
    w.add_argument("--sram-kb", default="196", help="comma list, K and V SRAM each")
    w.add_argument("--bits", default="12+0", help="comma list of MSB+LSB")
    w.add_argument("--v-keep", type=float, default=1.0)
    w.add_argument("--refetch-rate", type=float, default=0.059)
    w.add_argument("--seed", type=int)
    w.add_argument("--jobs", type=int, default=1)
    w.add_argument("--out", default="out")
    w.add_argument("--no-figures", action="store_true")
    w.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="run the oracle and invariant suites")
    v.add_argument("--fault", choices=("tie-flip",), help="inject a fault to check the suites bite")
    v.add_argument("--only", help="comma list of suite numbers")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify)

    m = sub.add_parser("importance", help="token importance from a probability trace file")
    m.add_argument("--trace", required=True)
    m.add_argument("--token-keep", type=float, default=1.0)
    m.add_argument("--seed", type=int)
    m.add_argument("--out", default="out/importance.csv")
    m.set_defaults(func=cmd_importance)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CapacityError) as exc:
        print(f"attnsim {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"attnsim {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
