"""Command-line entry points tying the pieces into reproducible experiments.

Exit codes: 0 success, 2 bad configuration or flags, 3 missing or malformed
data, 4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import csv
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .core import (CONFIG_KEYS, ConfigError, HyperParams, NonSimplexError,
                   NumericError, convert_config_value, format_kv, load_config)
from .data import (DataError, Dataset, SyntheticSpec, generate_synthetic,
                   load_manifest, save_manifest)
from .evaluation import (ce_histogram_by_noise, evaluate, export_embeddings,
                         per_sample_ce, predict_probs, write_report)
from .noise import NoiseError, NoiseLedger, NoiseSpec, expression_flip_map
from .trainer import AblationFlags, TrainResult, TrainRunConfig, fit, load_model


def _prepare_out_dir(path: str | Path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_snapshot(out: Path, kv: dict) -> None:
    (out / "config.snapshot").write_text(format_kv(kv))


def _load_datasets(data: str, test: str | None) -> tuple[Dataset, Dataset, Path, Path]:
    data_path = Path(data)
    if data_path.is_dir():
        train_path, test_path = data_path / "train.csv", data_path / "test.csv"
    else:
        if test is None:
            raise ConfigError("--test is required when --data is a manifest file")
        train_path, test_path = data_path, Path(test)
    train = load_manifest(train_path, split="train")
    test_ds = load_manifest(test_path, split="test", num_classes=train.num_classes)
    return train, test_ds, train_path, test_path


def _parse_noise(text: str | None, seed: int, use_expression_map: bool) -> NoiseSpec | None:
    if text is None or text == "none":
        return None
    if ":" not in text:
        raise ConfigError(f"--noise expects KIND:RATIO, got {text!r}")
    kind, ratio_text = text.split(":", 1)
    try:
        ratio = float(ratio_text)
    except ValueError:
        raise ConfigError(f"--noise ratio must be a number, got {ratio_text!r}") from None
    flip_map = None
    if use_expression_map:
        if kind != "asymmetric":
            raise ConfigError("--expression-map only applies to asymmetric noise")
        flip_map = tuple(sorted(expression_flip_map().items()))
    return NoiseSpec(kind=kind, ratio=ratio, flip_map=flip_map, seed=seed)


def _hp_from_args(args) -> HyperParams:
    base = load_config(args.config) if args.config else HyperParams()
    overrides = {key: getattr(args, key)
                 for key in CONFIG_KEYS if getattr(args, key) is not None}
    return replace(base, **overrides)


def _arch_from_args(args) -> dict:
    hidden = tuple(int(d) for d in args.hidden_dims.split(","))
    arch = {
        "hidden_dims": hidden,
        "feature_dim_u": args.feature_dim_u,
        "feature_dim_v": args.feature_dim_v,
        "proj_dim": args.proj_dim,
        "momentum": args.momentum,
        "bank_capacity": args.bank_capacity,
        "checkpoint_every": args.checkpoint_every,
    }
    if args.input_shape:
        arch["input_shape"] = tuple(int(d) for d in args.input_shape.split(","))
    return arch


def _run_training(train: Dataset, test: Dataset, noise_text: str | None,
                  use_expression_map: bool, hp: HyperParams, flags: AblationFlags,
                  arch: dict, out: Path) -> TrainResult:
    spec = _parse_noise(noise_text, hp.seed, use_expression_map)
    ledger = None
    if spec is not None:
        train, ledger = spec.apply(train)
        ledger.save_csv(out / "ledger.csv")
    cfg = TrainRunConfig(hp=hp, flags=flags, out_dir=out, **arch)
    return fit(cfg, train, test, ledger=ledger)


def cmd_gen_data(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    spec = SyntheticSpec(num_classes=args.classes, samples_per_class=args.per_class,
                         input_dim=args.input_dim, landmark_count=args.landmarks,
                         class_separation=args.separation,
                         view_noise_std=args.noise_std, seed=args.seed)
    train, test = generate_synthetic(spec)
    save_manifest(train, out / "train.csv")
    save_manifest(test, out / "test.csv")
    _write_snapshot(out, {
        "command": "gen-data", "classes": spec.num_classes,
        "per_class": spec.samples_per_class, "input_dim": spec.input_dim,
        "landmarks": spec.landmark_count, "separation": spec.class_separation,
        "noise_std": spec.view_noise_std, "seed": spec.seed,
    })
    print(f"wrote {len(train)} train and {len(test)} test samples to {out}")
    return 0


def cmd_inject_noise(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    dataset = load_manifest(args.data)
    spec = _parse_noise(args.noise, args.seed, args.expression_map)
    if spec is None:
        raise ConfigError("--noise is required for inject-noise")
    noisy, ledger = spec.apply(dataset)
    save_manifest(noisy, out / "train.csv")
    ledger.save_csv(out / "ledger.csv")
    _write_snapshot(out, {
        "command": "inject-noise", "data": args.data, "noise": args.noise,
        "expression_map": int(args.expression_map), "seed": args.seed,
    })
    print(f"flipped {len(ledger.flipped_ids())} of {len(noisy)} labels; "
          f"ledger at {out / 'ledger.csv'}")
    return 0


def cmd_train(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    train, test, train_path, test_path = _load_datasets(args.data, args.test)
    hp = _hp_from_args(args)
    flags = AblationFlags.from_tokens(args.ablation)
    result = _run_training(train, test, args.noise, args.expression_map,
                           hp, flags, _arch_from_args(args), out)
    snapshot = out / "config.snapshot"
    provenance = format_kv({"data": train_path, "test": test_path,
                            "noise": args.noise or "none"})
    snapshot.write_text(snapshot.read_text() + provenance)
    print(f"accuracy = {result.accuracy!r}")
    return 0


def cmd_evaluate(args) -> int:
    ckpt = Path(args.ckpt)
    out = _prepare_out_dir(args.out or ckpt.parent / "report-eval", args.force)
    model = load_model(ckpt)
    dataset = load_manifest(args.data, num_classes=model.cfg.num_classes)
    report = evaluate(model, dataset)
    ledger = NoiseLedger.load_csv(args.ledger) if args.ledger else None
    if ledger is not None:
        ce = per_sample_ce(predict_probs(model, dataset), dataset.labels)
        split = ce_histogram_by_noise(dataset.ids.tolist(), ce, ledger)
        report = report.with_diagnostics(ce_split=split)
    write_report(report, out)
    if args.embeddings:
        export_embeddings(model, dataset, out / "embeddings.csv", ledger)
    _write_snapshot(out, {
        "command": "evaluate", "ckpt": ckpt, "data": args.data,
        "ledger": args.ledger or "none", "embeddings": int(args.embeddings),
    })
    print(f"accuracy = {report.accuracy!r}")
    return 0


def _read_run_row(run_dir: Path) -> dict:
    summary = run_dir / "report" / "summary.txt"
    snapshot = run_dir / "config.snapshot"
    if not summary.exists() or not snapshot.exists():
        raise DataError(f"{run_dir} is not a completed run (missing report or snapshot)")
    accuracy = None
    for line in summary.read_text().splitlines():
        if line.startswith("overall_accuracy"):
            accuracy = float(line.split("=", 1)[1].strip())
    if accuracy is None:
        raise DataError(f"{summary} has no overall_accuracy line")
    fields = {"run": run_dir.name, "accuracy": accuracy, "ablation": "?", "seed": "?"}
    for line in snapshot.read_text().splitlines():
        for key in ("ablation", "seed"):
            if line.startswith(f"{key} ="):
                fields[key] = line.split("=", 1)[1].strip()
    fields["has_histogram"] = (run_dir / "report" / "ce_histogram.csv").exists()
    return fields


def cmd_report(args) -> int:
    rows = [_read_run_row(Path(run)) for run in args.runs]
    width = max(3, max(len(r["run"]) for r in rows))
    lines = [f"{'run':<{width}}  {'ablation':<12} {'seed':<6} accuracy"]
    for r in rows:
        lines.append(f"{r['run']:<{width}}  {r['ablation']:<12} {r['seed']:<6} "
                     f"{r['accuracy']:.4f}")
    for r in rows:
        if not r["has_histogram"]:
            lines.append(f"note: {r['run']} has no noise ledger; "
                         "CE histogram section skipped")
    table = "\n".join(lines)
    print(table)
    if args.out:
        out = _prepare_out_dir(args.out, args.force)
        (out / "comparison.txt").write_text(table + "\n")
        _write_snapshot(out, {"command": "report",
                              "runs": ";".join(str(r) for r in args.runs)})
    return 0


def _parse_grid(entries: list[str]) -> list[tuple[str, list]]:
    grid = []
    for entry in entries:
        if "=" not in entry:
            raise ConfigError(f"--grid expects PARAM=V1,V2,..., got {entry!r}")
        param, values_text = entry.split("=", 1)
        param = param.strip()
        values = [convert_config_value(param, v.strip())
                  for v in values_text.split(",") if v.strip()]
        if not values:
            raise ConfigError(f"--grid for {param!r} lists no values")
        grid.append((param, values))
    if not grid:
        raise ConfigError("empty grid")
    return grid


def _sweep_point(payload: dict) -> float:
    train, test, _, _ = _load_datasets(payload["data"], payload["test"])
    result = _run_training(train, test, payload["noise"], payload["expression_map"],
                           HyperParams(**payload["hp"]),
                           AblationFlags.from_tokens(payload["flags"]),
                           payload["arch"], Path(payload["out"]))
    return result.accuracy


def cmd_sweep(args) -> int:
    out = _prepare_out_dir(args.out, args.force)
    grid = _parse_grid(args.grid)
    base_hp = _hp_from_args(args)
    flags = AblationFlags.from_tokens(args.ablation)
    arch = _arch_from_args(args)

    points = []
    for param, values in grid:
        for value in values:
            hp = replace(base_hp, **{param: value})
            run_dir = out / f"{param}-{value}"
            payload = {
                "data": args.data, "test": args.test, "noise": args.noise,
                "expression_map": args.expression_map,
                "hp": {key: getattr(hp, key) for key in CONFIG_KEYS},
                "flags": flags.tokens(), "arch": arch, "out": str(run_dir),
            }
            points.append((param, value, payload))

    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            accuracies = list(pool.map(_sweep_point, [p for _, _, p in points]))
    else:
        accuracies = [_sweep_point(p) for _, _, p in points]

    with (out / "sweep.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["param", "value", "accuracy"])
        for (param, value, _), accuracy in zip(points, accuracies):
            writer.writerow([param, value, repr(accuracy)])
            print(f"{param} = {value}: accuracy = {accuracy!r}")
    _write_snapshot(out, {
        "command": "sweep", "grid": ";".join(args.grid), "data": args.data,
        "noise": args.noise or "none", "ablation": flags.tokens(),
        "jobs": args.jobs, "seed": base_hp.seed,
    })
    return 0


def _add_hp_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--config", help="hyperparameter file of key = value lines")
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--epochs", type=int, default=None)
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("--k-neighbors", type=int, default=None)
    for name in ("omega", "tau", "delta", "alpha", "beta", "lr"):
        sp.add_argument(f"--{name}", type=float, default=None)


def _add_arch_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--hidden-dims", default="128,128",
                    help="comma list of backbone layer widths")
    sp.add_argument("--feature-dim-u", type=int, default=64)
    sp.add_argument("--feature-dim-v", type=int, default=64)
    sp.add_argument("--proj-dim", type=int, default=64)
    sp.add_argument("--momentum", type=float, default=0.99)
    sp.add_argument("--bank-capacity", type=int, default=1024)
    sp.add_argument("--checkpoint-every", type=int, default=1,
                    help="epochs between checkpoints; 0 keeps only the final one")
    sp.add_argument("--input-shape", default=None,
                    help="C,H,W to run conv backbones on image-shaped inputs")


def _add_data_flags(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--data", required=True,
                    help="dataset directory (train.csv/test.csv) or train manifest")
    sp.add_argument("--test", default=None, help="test manifest when --data is a file")
    sp.add_argument("--noise", default=None, help="label noise as KIND:RATIO, "
                    "e.g. symmetric:0.3 or asymmetric:0.2")
    sp.add_argument("--expression-map", action="store_true",
                    help="use the 8-class facial-expression flip map for asymmetric noise")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noisemark",
        description="Noise-robust classification with neighborhood label "
                    "distributions and cross-view contrastive training.")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("gen-data", help="generate a synthetic two-view dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--classes", type=int, default=5)
    sp.add_argument("--per-class", type=int, default=250)
    sp.add_argument("--input-dim", type=int, default=64)
    sp.add_argument("--landmarks", type=int, default=5)
    sp.add_argument("--separation", type=float, default=4.0)
    sp.add_argument("--noise-std", type=float, default=1.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("inject-noise", help="flip labels and write a ledger")
    sp.add_argument("--data", required=True, help="train manifest")
    sp.add_argument("--noise", required=True, help="KIND:RATIO")
    sp.add_argument("--expression-map", action="store_true")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_inject_noise)

    sp = sub.add_parser("train", help="train a model and write a run directory")
    _add_data_flags(sp)
    sp.add_argument("--ablation", default="full",
                    help="baseline, full, or comma list from {ld,lm,el,pl}")
    _add_hp_flags(sp)
    _add_arch_flags(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("evaluate", help="evaluate a checkpoint on a manifest")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--data", required=True, help="manifest to evaluate on")
    sp.add_argument("--ledger", default=None, help="noise ledger for CE diagnostics")
    sp.add_argument("--embeddings", action="store_true",
                    help="also export expression-view features as CSV")
    sp.add_argument("--out", default=None)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("report", help="summarize one or more finished runs")
    sp.add_argument("runs", nargs="+", help="run directories to summarize")
    sp.add_argument("--out", default=None, help="directory for the comparison table")
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("sweep", help="grid-sweep hyperparameters, one run per value")
    _add_data_flags(sp)
    sp.add_argument("--grid", action="append", required=True,
                    metavar="PARAM=V1,V2,...",
                    help="repeatable; each entry sweeps one hyperparameter")
    sp.add_argument("--ablation", default="full")
    _add_hp_flags(sp)
    _add_arch_flags(sp)
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_sweep)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, NoiseError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except (NumericError, NonSimplexError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
