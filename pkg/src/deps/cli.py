"""Command-line entry point: ``deps <command> --config C --out DIR [--seed N]``.

Exit codes: 0 success, 1 invalid input or configuration, 2 invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .autograd import ContractError
from .evaluation import metrics_from_ranks
from .interactions import LogParseError, LogValidationError, SplitError, load_log, write_log
from .simulator import WorldError, clip_tradeoff, model_predictions, unbiasedness_check
from .training import InvariantViolation, TrainingDivergedError

EXIT_OK, EXIT_INVALID, EXIT_INVARIANT = 0, 1, 2
ABLATION_MODES = ("dual", "item_only", "user_only", "none", "frequency_dual")


class OracleFailure(RuntimeError):
    pass


def _prepare(args) -> tuple[pl.RunConfig, Path]:
    cfg = pl.RunConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    return cfg, out


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def _dataset(cfg: pl.RunConfig) -> pl.Dataset:
    return pl.prepare_dataset(cfg)


def cmd_simulate(cfg: pl.RunConfig, out: Path, args) -> int:
    world, sim = pl.simulate(cfg)
    sim.write(out / "log.tsv", out / "hidden.tsv", {"world": world.describe(), "horizon": cfg.horizon})
    _write_json(out / "world.json", world.describe())
    print(f"simulated {len(sim.log)} records ({int(sim.log.clicks.sum())} clicks) -> {out}")
    return EXIT_OK


def cmd_split(cfg: pl.RunConfig, out: Path, args) -> int:
    log = load_log(cfg.log_path) if cfg.log_path else pl.simulate(cfg)[1].log
    train, valid, test, info = pl.temporal_debiased_split(log, cfg.split_spec())
    for name, part in (("train", train), ("valid", valid), ("test", test)):
        write_log(out / f"{name}.tsv", part, {"split": name, **info})
    _write_json(out / "split.json", info)
    print(json.dumps(info))
    return EXIT_OK


def cmd_train(cfg: pl.RunConfig, out: Path, args) -> int:
    data = _dataset(cfg)
    model, _, run = pl.train(cfg, data)
    run.checkpoint = str(out / "checkpoint.bin")
    model.save(out / "checkpoint.bin", out / "manifest.json", {"mask_prob": cfg.mask_prob, "seed": cfg.seed})
    run.write(out / "training_run.jsonl")
    last = run.records[-1] if run.records else None
    print(f"trained {len(run.records)} epochs; last record: {last}")
    return EXIT_OK


def cmd_eval(cfg: pl.RunConfig, out: Path, args) -> int:
    data = _dataset(cfg)
    if args.checkpoint:
        model, _ = pl.build_model(cfg, data)
        model.load(args.checkpoint)
    else:
        model, _, run = pl.train(cfg, data)
        run.write(out / "training_run.jsonl")
    table = pl.evaluate_model(cfg, model, data)
    table.write(out / "metrics")
    print(table.to_tsv(), end="")
    return EXIT_OK


def verify_reports(cfg: pl.RunConfig, checkpoint: str | None = None) -> list:
    world, sim = pl.simulate(cfg)
    data = pl.prepare_dataset(cfg, sim.log)
    model, _ = pl.build_model(cfg, data)
    if checkpoint:
        model.load(checkpoint)
    events = np.linspace(0, len(sim.access_users) - 1, min(cfg.verify_events, len(sim.access_users))).astype(np.int64)
    r_hat = model_predictions(model, sim, events, data.full_index)
    reports = []
    for alpha in cfg.verify_alphas:
        reports.append(unbiasedness_check(world, sim, r_hat, events, 0.0, alpha, cfg.verify_replications, cfg.seed))
    for m in cfg.verify_clips:
        reports.append(unbiasedness_check(world, sim, r_hat, events, m, cfg.alpha, cfg.verify_replications, cfg.seed))
    return reports


def cmd_verify(cfg: pl.RunConfig, out: Path, args) -> int:
    reports = verify_reports(cfg, args.checkpoint)
    docs = [json.loads(r.to_json()) for r in reports]
    _write_json(out / "oracle_report.json", docs)
    failed = []
    for r in reports:
        unbiased_ok = r.clip > 0 or (abs(r.relative_bias) < 0.02 and r.ci_contains_zero)
        ok = unbiased_ok and r.bound_violations == 0 and r.max_violation_of_single_view == 0
        print(
            f"M={r.clip:<5} alpha={r.alpha:<4} rel_bias={r.relative_bias:+.5f} "
            f"ci=+-{r.ci_half_width:.5f} bound_violations={r.bound_violations} {'ok' if ok else 'FAIL'}"
        )
        if not ok:
            failed.append(r)
    if failed:
        raise OracleFailure(f"{len(failed)} oracle checks failed")
    return EXIT_OK


def _mean_table(rows, meta: dict):
    """Average per-seed tables: ranks are pooled per seed, metrics averaged across seeds."""
    tables = [r["metrics"] for r in rows]
    ks = tables[0].ks
    ndcg = {k: float(np.mean([t.ndcg[k] for t in tables])) for k in ks}
    hr = {k: float(np.mean([t.hr[k] for t in tables])) for k in ks}
    merged = metrics_from_ranks(tables[0].ranks, ks, meta)
    merged.ndcg, merged.hr = ndcg, hr
    merged.metadata["seeds"] = [r["seed"] for r in rows]
    return merged


def _parse_values(text: str | None, default: list) -> list:
    if text is None:
        return list(default)
    return [json.loads(v) for v in text.split(",") if v.strip()]


def cmd_sweep(cfg: pl.RunConfig, out: Path, args) -> int:
    key = args.key or cfg.sweep_key
    values = _parse_values(args.values, cfg.sweep_values)
    cfg = cfg.replace(sweep_key=key, sweep_values=values)
    data = _dataset(cfg)
    variants = [{key: v} for v in values]
    rows = pl.grid(cfg, data, variants)
    ndcg = pl.ndcg_matrix(rows, variants)
    lines = ["value\tndcg10_mean\tndcg10_per_seed"]
    result = {"key": key, "values": values, "seeds": list(cfg.seeds), "ndcg10": ndcg.tolist()}
    for v, row in zip(values, ndcg):
        lines.append(f"{v}\t{row.mean():.6f}\t" + ",".join(f"{x:.6f}" for x in row))
    if key == "clip":
        world, sim = pl.simulate(cfg)
        model, _ = pl.build_model(cfg, data)
        events = np.linspace(0, len(sim.access_users) - 1, min(cfg.verify_events, len(sim.access_users))).astype(np.int64)
        trade = clip_tradeoff(world, sim, model_predictions(model, sim, events, data.full_index), events, values, 2000, cfg.seed)
        result.update(bias=trade.bias, variance=trade.variance)
        lines[0] += "\tbias\tvariance"
        for k in range(len(values)):
            lines[k + 1] += f"\t{trade.bias[k]:.6g}\t{trade.variance[k]:.6g}"
    (out / "sweep.tsv").write_text("\n".join(lines) + "\n")
    _write_json(out / "sweep.json", result)
    print("\n".join(lines))
    return EXIT_OK


def cmd_ablate(cfg: pl.RunConfig, out: Path, args) -> int:
    data = _dataset(cfg)
    variants = [{"ips_mode": m} for m in ABLATION_MODES] + [{"ips_mode": "dual", "stage1": False}]
    rows = pl.grid(cfg, data, variants)
    tables_dir = out / "ablation"
    tables_dir.mkdir(exist_ok=True)
    for variant in variants:
        chosen = [r for r in rows if r["variant"] == variant]
        stage1 = variant.get("stage1", True)
        name = variant["ips_mode"] + ("" if stage1 else "_no_stage1")
        table = _mean_table(chosen, {"ips_mode": variant["ips_mode"], "stage1": stage1, "policy": cfg.policy})
        table.write(tables_dir / name)
        print(f"{name:<22} NDCG@10={table.ndcg[10] if 10 in table.ndcg else float('nan'):.4f}")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "verify": cmd_verify,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deps", description="Dual-view propensity training for sequential recommendation")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run configuration (defaults for missing keys)")
        p.add_argument("--out", default="runs/latest", help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        if name in ("eval", "verify"):
            p.add_argument("--checkpoint", help="load model parameters instead of training / fresh init")
        if name == "sweep":
            p.add_argument("--key", help="config key to sweep (default: sweep_key)")
            p.add_argument("--values", help="comma-separated values (default: sweep_values)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg, out = _prepare(args)
        return COMMANDS[args.command](cfg, out, args)
    except (pl.ConfigError, LogParseError, LogValidationError, SplitError, WorldError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (InvariantViolation, TrainingDivergedError, ContractError, OracleFailure) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
