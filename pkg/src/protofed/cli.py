"""Command line experiment runner.

Subcommands: run (one experiment, writes metrics.csv and summary.json),
gradcheck (analytic vs finite-difference gradients for the four losses),
and sweep (one run per value along a config axis, combined CSV).
Set PROTOFED_LOG=debug|info|warning|error for log verbosity.
Exit codes: 0 ok, 1 check failure, 2 config error, 3 divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__, attack, diffnet, proto, sim
from .config import (ATTACK_KINDS, FLIP_STRATEGIES, ExperimentConfig,
                     config_to_dict, parse_config)
from .errors import ConfigError, DivergenceError, ProtofedError
from .proto import ClassPrototype, PrototypeBank
from .rng import Rng, derive_seed

log = logging.getLogger("protofed.cli")

GRADCHECK_TAG = 0x47434B00  # per-instance stream base for gradcheck
GRADCHECK_TOL = 1e-6
LOSS_NAMES = ("ce", "pfl_combined", "backdoor_mix", "trigger")
SWEEP_AXES = ("attack_rate", "lambda", "p", "q", "std", "flip_strategy", "ablation")
ABLATION_ROWS = ("static_trigger", "static+PPS", "PPS+TOM")
HEADLINE_TAIL = 5  # eval rounds averaged into the headline metrics


@dataclass
class RunSummary:
    config: dict
    final: sim.RoundMetrics
    metrics_csv: str
    prototypes_jsonl: str | None
    triggers_json: str | None
    summary_json: str
    elapsed_seconds: float
    version: str
    headline: dict


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def write_metrics_csv(path: str, metrics: list) -> None:
    """Locale-independent per-round CSV; missing values are empty cells."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["round", "acc_mean", "asr_mean", "proto_drift", "per_client"])
        for m in metrics:
            per_client = [[cid, acc, asr] for cid, acc, asr in m.per_client]
            writer.writerow([
                m.round,
                _fmt(m.acc_mean),
                _fmt(m.asr_mean),
                _fmt(m.proto_drift),
                json.dumps(per_client, separators=(",", ":")),
            ])


def write_prototypes_jsonl(path: str, snapshots: list) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for round_idx, bank in snapshots:
            for p in bank.as_list():
                f.write(json.dumps(
                    {"round": round_idx, "class_id": int(p.class_id),
                     "count": int(p.count), "vector": [float(v) for v in p.vector]},
                    separators=(",", ":")) + "\n")


def write_triggers_json(path: str, triggers: dict) -> None:
    records = []
    for target in sorted(triggers):
        t = triggers[target]
        records.append({
            "target_label": int(t.target_label),
            "delta_params": [float(v) for v in t.delta_params],
            "mask_logits": [float(v) for v in t.mask_logits],
        })
    with open(path, "w", encoding="utf-8") as f:
        json.dump(records, f, separators=(",", ":"))
        f.write("\n")


def _metric_dict(m: sim.RoundMetrics) -> dict:
    return {
        "round": m.round,
        "acc_mean": m.acc_mean,
        "asr_mean": m.asr_mean,
        "proto_drift": m.proto_drift,
        "per_client": [[cid, acc, asr] for cid, acc, asr in m.per_client],
    }


def _headline(metrics: list) -> dict:
    """Mean metrics over the last few eval rounds, smoothing round noise."""
    tail = metrics[-min(HEADLINE_TAIL, len(metrics)):]
    accs = [m.acc_mean for m in tail]
    asrs = [m.asr_mean for m in tail if m.asr_mean is not None]
    return {
        "acc_mean": sum(accs) / len(accs) if accs else None,
        "asr_mean": sum(asrs) / len(asrs) if asrs else None,
        "tail_rounds": len(tail),
    }


def _load_raw_config(path: str) -> dict:
    if not os.path.exists(path):
        raise ConfigError("%s: config file not found" % path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError("%s: invalid JSON (%s)" % (path, exc)) from exc
    if not isinstance(obj, dict):
        raise ConfigError("%s: config root must be an object" % path)
    return obj


def _apply_overrides(obj: dict, seed=None, attack_kind=None, flip=None,
                     attack_rate=None, out=None) -> dict:
    if seed is not None:
        obj["seed"] = seed
    if out is not None:
        obj["out_dir"] = out
    if attack_kind is not None or flip is not None or attack_rate is not None:
        section = obj.setdefault("attack", {})
        if isinstance(section, dict):  # otherwise let validation report it
            if attack_kind is not None:
                section["kind"] = attack_kind
            if flip is not None:
                section["flip_strategy"] = flip
            if attack_rate is not None:
                section["attack_rate"] = attack_rate
    return obj


def _default_out_dir(config_path: str, cfg: ExperimentConfig) -> str:
    if cfg.out_dir:
        return cfg.out_dir
    stem = os.path.splitext(os.path.basename(config_path))[0]
    return os.path.join("runs", "%s-seed%d" % (stem, cfg.seed))


def cmd_run(config_path: str, seed=None, out=None, attack_kind=None, flip=None,
            attack_rate=None) -> RunSummary:
    """Run one experiment and persist its artifacts."""
    started = time.perf_counter()
    raw = _apply_overrides(_load_raw_config(config_path), seed=seed,
                           attack_kind=attack_kind, flip=flip,
                           attack_rate=attack_rate, out=out)
    cfg = parse_config(raw)
    out_dir = _default_out_dir(config_path, cfg)
    os.makedirs(out_dir, exist_ok=True)
    result = sim.run_experiment(cfg)
    metrics_csv = os.path.join(out_dir, "metrics.csv")
    write_metrics_csv(metrics_csv, result.metrics)
    prototypes_jsonl = None
    if cfg.dump_prototypes:
        prototypes_jsonl = os.path.join(out_dir, "prototypes.jsonl")
        write_prototypes_jsonl(prototypes_jsonl, result.bank_snapshots)
    triggers_json = None
    if result.triggers:
        triggers_json = os.path.join(out_dir, "triggers.json")
        write_triggers_json(triggers_json, result.triggers)
    final = result.metrics[-1]
    headline = _headline(result.metrics)
    summary_json = os.path.join(out_dir, "summary.json")
    elapsed = time.perf_counter() - started
    summary = RunSummary(
        config=config_to_dict(cfg),
        final=final,
        metrics_csv=metrics_csv,
        prototypes_jsonl=prototypes_jsonl,
        triggers_json=triggers_json,
        summary_json=summary_json,
        elapsed_seconds=elapsed,
        version=__version__,
        headline=headline,
    )
    with open(summary_json, "w", encoding="utf-8") as f:
        json.dump({
            "version": summary.version,
            "config": summary.config,
            "final": _metric_dict(final),
            "headline": headline,
            "metrics_csv": metrics_csv,
            "prototypes_jsonl": prototypes_jsonl,
            "triggers_json": triggers_json,
            "elapsed_seconds": elapsed,
        }, f, indent=2)
        f.write("\n")
    return summary


def _gc_model_and_batch(rng: Rng) -> tuple:
    input_dim, hidden, classes = 6, [5, 4], 5
    model = diffnet.init_model(input_dim, hidden, classes, rng)
    # zero biases can park a relu exactly on its kink (a fully clamped row
    # feeds the next layer all zeros); jitter them so the loss is smooth at
    # the evaluation point
    for b in model.biases:
        b += np.array([0.1 * rng.normal() for _ in range(b.shape[0])])
    n = 3
    x = np.array([[rng.next_double() for _ in range(input_dim)] for _ in range(n)])
    y = np.array([rng.next_below(classes) for _ in range(n)], dtype=np.int64)
    bank = PrototypeBank()
    for c in range(classes):
        vec = np.array([rng.normal() for _ in range(hidden[-1])])
        bank.put(ClassPrototype(c, vec, 1))
    return model, x, y, bank


def _gc_one_instance(name: str, rng: Rng) -> tuple:
    """Build (loss_fn, params, analytic_grads) for one named loss instance."""
    model, x, y, bank = _gc_model_and_batch(rng)
    classes = model.num_classes
    if name == "ce":
        def loss_fn():
            return diffnet.loss_ce(diffnet.forward_batch(model, x).logits, y)[0]
        trace = diffnet.forward_batch(model, x)
        _, d_logits = diffnet.loss_ce(trace.logits, y)
        grads, _ = diffnet.backward_batch(model, x, trace, d_logits)
        return loss_fn, model.weights + model.biases, grads.d_weights + grads.d_biases
    if name == "pfl_combined":
        def loss_fn():
            return proto.combined_loss_and_grads(model, x, y, bank, 1.0)[0]
        _, grads = proto.combined_loss_and_grads(model, x, y, bank, 1.0)
        return loss_fn, model.weights + model.biases, grads.d_weights + grads.d_biases
    target_map = attack.make_target_map("complement", classes)
    if name == "backdoor_mix":
        if all(target_map(int(v)) == int(v) for v in y):
            y[0] = 0  # keep at least one poisonable sample
        triggers = {}
        for t in range(classes):
            trig = attack.new_trigger(t, x.shape[1])
            trig.delta_params += np.array([rng.normal() for _ in range(x.shape[1])])
            trig.mask_logits += np.array([rng.normal() for _ in range(x.shape[1])])
            triggers[t] = trig
        selected = [i for i in range(len(y)) if target_map(int(y[i])) != int(y[i])]

        def loss_fn():
            return attack.backdoor_loss_and_grads(
                model, x, y, triggers, 0.75, target_map, selected)[0]
        _, grads = attack.backdoor_loss_and_grads(
            model, x, y, triggers, 0.75, target_map, selected)
        return loss_fn, model.weights + model.biases, grads.d_weights + grads.d_biases
    if name == "trigger":
        trig = attack.new_trigger(1, x.shape[1])
        trig.delta_params += np.array([rng.normal() for _ in range(x.shape[1])])
        trig.mask_logits += np.array([rng.normal() for _ in range(x.shape[1])])

        def loss_fn():
            return attack.trigger_loss_and_grads(
                model, trig, x, bank, 0.1, 0.01, 0.001)[0]
        _, d_delta, d_mask = attack.trigger_loss_and_grads(
            model, trig, x, bank, 0.1, 0.01, 0.001)
        return loss_fn, [trig.delta_params, trig.mask_logits], [d_delta, d_mask]
    raise ValueError("unknown loss %r" % name)


def gradcheck_report(seed: int, instances: int = 3, corrupt_loss=None) -> dict:
    """Max finite-difference relative error per loss over random instances.

    corrupt_loss is a test hook: it perturbs that loss's analytic gradient
    so the check must fail.
    """
    report = {}
    for name in LOSS_NAMES:
        worst = 0.0
        for k in range(instances):
            rng = Rng(derive_seed(seed, GRADCHECK_TAG + k))
            loss_fn, params, grads = _gc_one_instance(name, rng)
            if corrupt_loss == name:
                grads[0] = np.asarray(grads[0]).copy()
                grads[0].reshape(-1)[0] += 1e-2
            worst = max(worst, diffnet.grad_check(loss_fn, params, grads, rng))
        report[name] = worst
    return report


def cmd_gradcheck(seed: int, instances: int = 3, corrupt_loss=None) -> int:
    report = gradcheck_report(seed, instances, corrupt_loss)
    failing = [name for name, err in report.items() if not err < GRADCHECK_TOL]
    for name in LOSS_NAMES:
        status = "FAIL" if name in failing else "ok"
        print("%s: max rel err %.3e %s" % (name, report[name], status))
    if failing:
        print("gradcheck failed: %s" % ", ".join(failing))
        return 1
    print("gradcheck passed: all losses within %g" % GRADCHECK_TOL)
    return 0


def _sweep_variant(raw: dict, axis: str, value: str) -> dict:
    obj = json.loads(json.dumps(raw))  # deep copy, keep the original pristine
    if axis == "lambda":
        obj["lam"] = float(value)
    elif axis in ("p", "q", "std"):
        section = obj.setdefault("partition", {})
        section[axis] = float(value)
    elif axis == "attack_rate":
        obj.setdefault("attack", {})["attack_rate"] = float(value)
    elif axis == "flip_strategy":
        obj.setdefault("attack", {})["flip_strategy"] = value
    elif axis == "ablation":
        if value not in ABLATION_ROWS:
            raise ConfigError(
                "ablation values must be among %s, got %r" % (ABLATION_ROWS, value))
        section = obj.setdefault("attack", {})
        if value == "static_trigger":
            section.update(kind="static_trigger", use_pps=False, target_map="fixed")
        elif value == "static+PPS":
            section.update(kind="static_trigger", use_pps=True, target_map="fixed")
        else:
            section.update(kind="bapfl", target_map="complement")
    else:
        raise ConfigError("unknown sweep axis %r" % axis)
    return obj


def cmd_sweep(config_path: str, axis: str, values: list, seed=None, out=None) -> int:
    """One run per value; partial CSV plus nonzero exit on sub-run failure."""
    raw = _load_raw_config(config_path)
    if seed is not None:
        raw["seed"] = seed
    out_dir = out or os.path.join(
        "runs", "%s-sweep-%s" % (os.path.splitext(os.path.basename(config_path))[0], axis))
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    exit_code = 0
    for value in values:
        try:
            cfg = parse_config(_sweep_variant(raw, axis, value))
            result = sim.run_experiment(cfg)
            headline = _headline(result.metrics)
            rows.append((value, headline["acc_mean"], headline["asr_mean"]))
            log.info("sweep %s=%s: acc %.2f asr %s", axis, value,
                     headline["acc_mean"],
                     "n/a" if headline["asr_mean"] is None else
                     "%.2f" % headline["asr_mean"])
        except ConfigError as exc:
            print("sweep %s=%s: config error: %s" % (axis, value, exc), file=sys.stderr)
            exit_code = max(exit_code, 2)
        except DivergenceError as exc:
            print("sweep %s=%s: diverged: %s" % (axis, value, exc), file=sys.stderr)
            exit_code = max(exit_code, 3)
    sweep_csv = os.path.join(out_dir, "sweep.csv")
    with open(sweep_csv, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow([axis, "acc_mean", "asr_mean"])
        for value, acc, asr in rows:
            writer.writerow([value, _fmt(acc), _fmt(asr)])
    print(sweep_csv)
    return exit_code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protofed",
        description="Prototype-sharing federated learning simulator with "
                    "backdoor attack machinery.")
    sub = parser.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run one experiment from a JSON config")
    run_p.add_argument("--config", required=True, help="path to the JSON config")
    run_p.add_argument("--seed", type=int, help="override the config seed")
    run_p.add_argument("--out", help="output directory")
    run_p.add_argument("--attack", choices=ATTACK_KINDS, help="override attack kind")
    run_p.add_argument("--flip", choices=FLIP_STRATEGIES,
                       help="override the prototype flip strategy")
    run_p.add_argument("--attack-rate", type=float, dest="attack_rate",
                       help="override the fraction of malicious clients")
    gc_p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    gc_p.add_argument("--seed", type=int, default=0)
    gc_p.add_argument("--instances", type=int, default=3,
                      help="random instances per loss")
    sweep_p = sub.add_parser("sweep", help="run a config axis sweep")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sweep_p.add_argument("--values", required=True,
                         help="comma-separated values for the axis")
    sweep_p.add_argument("--seed", type=int)
    sweep_p.add_argument("--out")
    return parser


def entrypoint(argv=None) -> int:
    level = os.environ.get("PROTOFED_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            summary = cmd_run(args.config, seed=args.seed, out=args.out,
                              attack_kind=args.attack, flip=args.flip,
                              attack_rate=args.attack_rate)
            final = summary.final
            print("round %d: acc_mean %.2f asr_mean %s (metrics: %s)" % (
                final.round, final.acc_mean,
                "n/a" if final.asr_mean is None else "%.2f" % final.asr_mean,
                summary.metrics_csv))
            return 0
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed, args.instances)
        values = [v.strip() for v in args.values.split(",") if v.strip()]
        if not values:
            raise ConfigError("--values must list at least one value")
        return cmd_sweep(args.config, args.axis, values, seed=args.seed, out=args.out)
    except ConfigError as exc:
        print("config error: %s" % exc, file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print("diverged: %s" % exc, file=sys.stderr)
        return 3
    except ProtofedError as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(entrypoint())


if __name__ == "__main__":
    main()
