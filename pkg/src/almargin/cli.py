"""Config-driven command line: validate and run experiments, emit CSV
curve data, gain reports, diagnostics, and gnuplot-ready plot files."""
from __future__ import annotations

import argparse
import csv
import difflib
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from . import dataset as ds
from . import experiment, metrics, models, sampling

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

OUT_DIR_ENV = "ALMARGIN_OUT"


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config loading


def _check_keys(obj: dict, known: dict, context: str) -> None:
    for key in obj:
        if key not in known:
            hint = difflib.get_close_matches(key, known, n=1)
            suffix = f"; did you mean {hint[0]!r}?" if hint else ""
            raise ConfigError(f"unknown key {key!r} in {context}{suffix}")


def _require(obj: dict, key: str, context: str):
    if key not in obj:
        raise ConfigError(f"missing required key {key!r} in {context}")
    return obj[key]


_TOP_KEYS = {
    "dataset": dict,
    "seed_set_size": int,
    "holdout_size": int,
    "rounds": int,
    "batch_size": int,
    "subset_size": int,
    "schemes": list,
    "events": list,
    "trials": int,
    "base_seed": int,
    "best_of_k": int,
    "metric": str,
    "initial_model": str,
    "train": dict,
    "train_kernel": dict,
    "rff": dict,
    "out_dir": str,
    "verbosity": int,
}

_DATASET_KEYS = {"path": str, "subsample": int, "synthetic_segmentation": dict, "synthetic_binary": dict}
_SYNTH_BINARY_KEYS = {"n_examples": int, "n_features": int, "noise": float, "seed": int}
_CORPUS_KEYS = {
    "n_sentences": int,
    "domain_mix": float,
    "length_mean_a": float,
    "length_mean_b": float,
    "vocab_size": int,
    "rule_version": int,
}
_SCHEME_KEYS = {"kind": str, "scorer": str, "schedule": list, "length_penalty": float}
_PIECE_KEYS = {"t_start": int, "a": float, "b": float, "alpha": float}
_EVENT_KEYS = {"round": int, "event": str, "to": str, "reseed": bool, "fraction": float, "policy": dict}
_POLICY_KEYS = {"hard_limit": int, "retention": list}
_TRAIN_KEYS = {"learning_rate": float, "epochs": int, "l2": float, "batch_size": int}
_RFF_KEYS = {"n_features": int, "bandwidth": float}


def _parse_schedule(items: list, context: str) -> sampling.PowerSchedule:
    pieces = []
    for i, piece in enumerate(items):
        _check_keys(piece, _PIECE_KEYS, f"{context}[{i}]")
        pieces.append(
            sampling.PowerPiece(
                t_start=int(piece.get("t_start", 0)),
                a=float(_require(piece, "a", f"{context}[{i}]")),
                b=float(piece.get("b", 0.0)),
                alpha=float(piece.get("alpha", 1.0)),
            )
        )
    return sampling.PowerSchedule(pieces=tuple(pieces))


def _parse_scheme(obj: dict, index: int) -> sampling.SchemeConfig:
    context = f"schemes[{index}]"
    _check_keys(obj, _SCHEME_KEYS, context)
    kind = _require(obj, "kind", context)
    schedule = None
    if "schedule" in obj:
        schedule = _parse_schedule(obj["schedule"], f"{context}.schedule")
    return sampling.SchemeConfig(
        kind=kind,
        scorer_kind=obj.get("scorer"),
        schedule=schedule,
        length_penalty=float(obj.get("length_penalty", 0.0)),
    )


def _parse_event(obj: dict, index: int) -> experiment.Event:
    context = f"events[{index}]"
    _check_keys(obj, _EVENT_KEYS, context)
    kind = _require(obj, "event", context)
    rule = None
    policy = None
    if kind == "label_revision":
        rule = ds.RevisionRule(target_fraction=float(_require(obj, "fraction", context)))
    if kind == "expiration_policy_change":
        pol = _require(obj, "policy", context)
        _check_keys(pol, _POLICY_KEYS, f"{context}.policy")
        retention = pol.get("retention")
        policy = ds.ExpirationPolicy(
            hard_limit=pol.get("hard_limit"),
            retention=tuple(retention) if retention is not None else None,
        )
    return experiment.Event(
        round=int(_require(obj, "round", context)),
        kind=kind,
        to=obj.get("to"),
        reseed=bool(obj.get("reseed", False)),
        rule=rule,
        policy=policy,
    )


def load_config(path) -> tuple[experiment.ExperimentConfig, str, int]:
    """Parse and validate a config file; returns (config, out_dir, verbosity)."""
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed config {path}: {e}")
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "config")

    data_obj = _require(raw, "dataset", "config")
    _check_keys(data_obj, _DATASET_KEYS, "dataset")
    dataset_path = data_obj.get("path")
    corpus = None
    if "synthetic_segmentation" in data_obj:
        c = data_obj["synthetic_segmentation"]
        _check_keys(c, _CORPUS_KEYS, "dataset.synthetic_segmentation")
        corpus = ds.CorpusConfig(
            n_sentences=int(_require(c, "n_sentences", "dataset.synthetic_segmentation")),
            domain_mix=float(c.get("domain_mix", 0.5)),
            length_mean_a=float(c.get("length_mean_a", 6.0)),
            length_mean_b=float(c.get("length_mean_b", 12.0)),
            vocab_size=int(c.get("vocab_size", 49)),
            rule_version=int(c.get("rule_version", 1)),
        )
    synthetic_binary = None
    if "synthetic_binary" in data_obj:
        b = data_obj["synthetic_binary"]
        _check_keys(b, _SYNTH_BINARY_KEYS, "dataset.synthetic_binary")
        try:
            synthetic_binary = ds.SyntheticBinaryConfig(
                n_examples=int(_require(b, "n_examples", "dataset.synthetic_binary")),
                n_features=int(b.get("n_features", 54)),
                noise=float(b.get("noise", 0.1)),
                seed=int(b.get("seed", 0)),
            )
        except ds.DataError as e:
            raise ConfigError(str(e))
    if dataset_path is not None and not Path(dataset_path).exists():
        raise ConfigError(f"dataset.path does not exist: {dataset_path}")

    train_obj = raw.get("train", {})
    _check_keys(train_obj, _TRAIN_KEYS, "train")
    train_kernel_obj = raw.get("train_kernel")
    if train_kernel_obj is not None:
        _check_keys(train_kernel_obj, _TRAIN_KEYS, "train_kernel")
    rff_obj = raw.get("rff", {})
    _check_keys(rff_obj, _RFF_KEYS, "rff")

    try:
        train = models.TrainConfig(
            learning_rate=float(train_obj.get("learning_rate", 0.1)),
            epochs=int(train_obj.get("epochs", 5)),
            l2=float(train_obj.get("l2", 1e-4)),
            batch_size=int(train_obj.get("batch_size", 64)),
        )
        train_kernel = None
        if train_kernel_obj is not None:
            train_kernel = models.TrainConfig(
                learning_rate=float(train_kernel_obj.get("learning_rate", 10.0)),
                epochs=int(train_kernel_obj.get("epochs", 5)),
                l2=float(train_kernel_obj.get("l2", 1e-4)),
                batch_size=int(train_kernel_obj.get("batch_size", 64)),
            )
        config = experiment.ExperimentConfig(
            rounds=int(_require(raw, "rounds", "config")),
            batch_size=int(_require(raw, "batch_size", "config")),
            seed_set_size=int(_require(raw, "seed_set_size", "config")),
            holdout_size=int(_require(raw, "holdout_size", "config")),
            schemes=tuple(_parse_scheme(s, i) for i, s in enumerate(_require(raw, "schemes", "config"))),
            dataset_path=dataset_path,
            corpus=corpus,
            synthetic_binary=synthetic_binary,
            dataset_subsample=data_obj.get("subsample"),
            subset_size=raw.get("subset_size"),
            events=experiment.EventSchedule(
                events=tuple(_parse_event(e, i) for i, e in enumerate(raw.get("events", [])))
            ),
            trials=int(raw.get("trials", 1)),
            base_seed=int(raw.get("base_seed", 0)),
            best_of_k=int(raw.get("best_of_k", 1)),
            metric=raw.get("metric", "accuracy"),
            initial_model=raw.get(
                "initial_model", "token_tagger" if corpus is not None else "logistic"
            ),
            train=train,
            train_kernel=train_kernel,
            rff_dim=int(rff_obj.get("n_features", 512)),
            rff_bandwidth=float(rff_obj.get("bandwidth", 0.02)),
        )
    except (experiment.ExperimentError, sampling.SamplingError, ds.DataError, models.ModelError, ValueError) as e:
        raise ConfigError(str(e))
    if config.batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    out_dir = raw.get("out_dir", os.environ.get(OUT_DIR_ENV, "out"))
    return config, out_dir, int(raw.get("verbosity", 1))


# ---------------------------------------------------------------------------
# output writing


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])


def _config_hash(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def write_outputs(
    results: list[experiment.TrialResult],
    config: experiment.ExperimentConfig,
    data: experiment.ExperimentData,
    out_dir: Path,
    config_path=None,
    wall_time: float | None = None,
) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    scheme_names = [s.name for s in config.schemes]

    # per-trial curves
    rows = []
    for tr in results:
        for sr in tr.schemes:
            for i, (size, value) in enumerate(sr.curve.points):
                rows.append([sr.scheme, tr.trial_index, i - 1, size, value])
    _write_csv(out_dir / "curves.csv", ["scheme", "trial", "round", "training_size", "metric_value"], rows)

    # aggregate with CI bands
    agg_rows = []
    mean_curves: dict[str, metrics.LearningCurve] = {}
    for name in scheme_names:
        curves = [
            sr.curve for tr in results for sr in tr.schemes if sr.scheme == name
        ]
        agg = metrics.aggregate_curves(curves)
        mean_curves[name] = metrics.LearningCurve(
            points=tuple(zip(agg.sizes, agg.mean))
        )
        for i, size in enumerate(agg.sizes):
            agg_rows.append(
                [
                    name,
                    i - 1,
                    size,
                    agg.mean[i],
                    agg.ci_lo[i] if agg.ci_lo else None,
                    agg.ci_hi[i] if agg.ci_hi else None,
                ]
            )
    _write_csv(
        out_dir / "aggregate.csv",
        ["scheme", "round", "training_size", "metric_mean", "ci_lo", "ci_hi"],
        agg_rows,
    )

    # gains of every active scheme against passive
    gain_rows = []
    if "passive" in mean_curves:
        passive = mean_curves["passive"]
        for name in scheme_names:
            if name == "passive":
                continue
            report = metrics.gain_report(mean_curves[name], passive)
            for kind, part in (
                ("last_vs_max", report.last_vs_max),
                ("first_vs_final", report.first_vs_final),
            ):
                if part is None:
                    gain_rows.append([f"{name}_vs_passive", kind, None, None, None])
                else:
                    gain_rows.append(
                        [f"{name}_vs_passive", kind, part.gain, part.active_size, part.reference_size]
                    )
    _write_csv(
        out_dir / "gains.csv",
        ["scheme_pair", "gain_kind", "gain", "active_size", "reference_size"],
        gain_rows,
    )

    # selected-batch log
    batch_rows = []
    for tr in results:
        for sr in tr.schemes:
            for batch in sr.batches:
                raws = batch.raw_margins or [None] * len(batch.ids)
                pens = batch.penalized_margins or [None] * len(batch.ids)
                for bid, raw, pen in zip(batch.ids, raws, pens):
                    batch_rows.append([tr.trial_index, batch.round, sr.scheme, bid, raw, pen])
    _write_csv(
        out_dir / "batches.csv",
        ["trial", "round", "scheme", "example_id", "raw_margin", "penalized_margin"],
        batch_rows,
    )

    # batch composition (sentence track only: items carry domains/lengths)
    if data.is_sentence_track:
        by_id = {s.id: s for s in data.sentences}
        comp_rows = []
        for tr in results:
            for sr in tr.schemes:
                for batch in sr.batches:
                    comp = metrics.batch_composition([by_id[i] for i in batch.ids])
                    comp_rows.append(
                        [
                            tr.trial_index,
                            batch.round,
                            sr.scheme,
                            comp.domain_proportions.get("A", 0.0),
                            comp.domain_proportions.get("B", 0.0),
                            comp.mean_token_length.get("A"),
                            comp.mean_token_length.get("B"),
                            comp.overall_mean_length,
                        ]
                    )
        _write_csv(
            out_dir / "composition.csv",
            ["trial", "round", "scheme", "prop_a", "prop_b", "mean_len_a", "mean_len_b", "mean_len"],
            comp_rows,
        )

    # event log
    event_rows = []
    for tr in results:
        for ev in tr.events:
            event_rows.append([ev["trial"], ev["round"], ev["scheme"], ev["kind"], ev.get("detail", "")])
    _write_csv(out_dir / "events.csv", ["trial", "round", "scheme", "kind", "detail"], event_rows)

    manifest = {
        "config_hash": _config_hash(config_path) if config_path else None,
        "base_seed": config.base_seed,
        "trials": config.trials,
        "schemes": scheme_names,
        "wall_time_s": wall_time,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=1)
        f.write("\n")


# ---------------------------------------------------------------------------
# plot emission


def emit_plot_data(aggregate_csv, out_dir: Path) -> None:
    """Write gnuplot data blocks (one per scheme) and a ready-to-run script;
    mean drawn solid, CI bounds dashed (omitted when bands are absent)."""
    with open(aggregate_csv, encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or "scheme" not in reader.fieldnames:
            raise ds.DataError(f"malformed aggregate CSV: {aggregate_csv}")
        rows = list(reader)
    if not rows:
        raise ds.DataError(f"aggregate CSV has no data rows: {aggregate_csv}")

    schemes: dict[str, list[dict]] = {}
    for row in rows:
        schemes.setdefault(row["scheme"], []).append(row)
    has_bands = all(r["ci_lo"] != "" for r in rows)

    out_dir.mkdir(parents=True, exist_ok=True)
    dat_path = out_dir / "plot.dat"
    with open(dat_path, "w", encoding="utf-8", newline="\n") as f:
        for bi, (name, block) in enumerate(schemes.items()):
            f.write(f"# scheme: {name}\n")
            f.write("# round training_size metric_mean ci_lo ci_hi\n")
            for r in block:
                lo = r["ci_lo"] or "nan"
                hi = r["ci_hi"] or "nan"
                f.write(
                    f"{r['round']} {r['training_size']} {r['metric_mean']} {lo} {hi}\n"
                )
            if bi != len(schemes) - 1:
                f.write("\n\n")

    lines = [
        "set terminal pngcairo size 900,600",
        "set output 'curves.png'",
        "set xlabel 'training size'",
        "set ylabel 'metric'",
        "set key bottom right",
        "plot \\",
    ]
    plot_parts = []
    for bi, name in enumerate(schemes):
        title = name.replace("_", "\\_")
        plot_parts.append(
            f"  'plot.dat' index {bi} using 2:3 with lines lw 2 title '{title}'"
        )
        if has_bands:
            plot_parts.append(
                f"  'plot.dat' index {bi} using 2:4 with lines dt 2 lc {bi + 1} notitle"
            )
            plot_parts.append(
                f"  'plot.dat' index {bi} using 2:5 with lines dt 2 lc {bi + 1} notitle"
            )
    lines.append(", \\\n".join(plot_parts))
    with open(out_dir / "plot.gp", "w", encoding="utf-8", newline="\n") as f:
        f.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_run(args) -> int:
    try:
        config, out_dir, verbosity = load_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.out is not None:
        out_dir = args.out
    if args.trials is not None:
        config = __import__("dataclasses").replace(config, trials=args.trials)
    if args.seed is not None:
        config = __import__("dataclasses").replace(config, base_seed=args.seed)

    started = time.time()
    try:
        data = experiment.load_experiment_data(config)
    except (ds.DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    try:
        results = experiment.run_experiment(config, jobs=args.jobs, data=data)
        out_path = Path(out_dir)
        write_outputs(
            results, config, data, out_path,
            config_path=args.config, wall_time=round(time.time() - started, 3),
        )
        emit_plot_data(out_path / "aggregate.csv", out_path)
    except experiment.ExperimentError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"output error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    if verbosity > 0:
        print(f"wrote results for {config.trials} trial(s) to {out_dir}")
    return EXIT_OK


def cmd_plot(args) -> int:
    out_dir = Path(args.out if args.out is not None else os.environ.get(OUT_DIR_ENV, "out"))
    try:
        emit_plot_data(args.aggregate, out_dir)
    except (ds.DataError, OSError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote plot.dat and plot.gp to {out_dir}")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        config, out_dir, _ = load_config(args.config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"ok: {len(config.schemes)} scheme(s), {config.trials} trial(s), out_dir={out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="almargin",
        description="Active-learning experimentation harness (margin sampling under change)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config end to end")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel trial workers")
    p_run.add_argument("--trials", type=int, default=None, help="override trial count")
    p_run.add_argument("--seed", type=int, default=None, help="override base seed")
    p_run.set_defaults(func=cmd_run)

    p_plot = sub.add_parser("plot", help="emit gnuplot files from an aggregate CSV")
    p_plot.add_argument("aggregate")
    p_plot.add_argument("--out", default=None)
    p_plot.set_defaults(func=cmd_plot)

    p_val = sub.add_parser("validate", help="validate a config file")
    p_val.add_argument("config")
    p_val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
