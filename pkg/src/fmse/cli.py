"""Command-line entry point: ``fmse {synth,train,enhance,evaluate,sweep,plot}``.

Exit codes: 0 success, 2 configuration or usage error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from datetime import datetime
from pathlib import Path

import torch

from . import config as cfgmod
from .backbone import build_backbone, load_checkpoint
from .data import SpectrogramDataset, resample, scan_corpus, synth_corpus
from .errors import ConfigError, FMSEError
from .evaluation import PUBLISHED_COMBINED_TABLE, build_metric, compare_runs, evaluate
from .objectives import ObjectiveKind, PrecondConfig
from .path import PathConfig
from .sampler import Enhancer, SamplerConfig, utterance_seed
from .spectral import SAMPLE_RATE, SpectralConfig, read_wav, write_wav
from .trainer import steps_to_threshold, train

log = logging.getLogger("fmse")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(ConfigError):
    pass


# ---------------------------------------------------------------- helpers

def _train_overrides(args) -> list:
    overrides = list(args.set or [])
    flag_map = {
        "objective": "train.objective",
        "alpha_p": "train.alpha_p",
        "alpha_s": "train.alpha_s",
        "max_steps": "train.max_steps",
        "seed": "train.seed",
        "corpus": "data.root",
        "output_dir": "output_dir",
    }
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(_nest(key, value))
    return overrides


def _nest(key: str, value) -> dict:
    node: dict = {}
    cursor = node
    parts = key.split(".")
    for part in parts[:-1]:
        cursor[part] = {}
        cursor = cursor[part]
    cursor[parts[-1]] = value
    return node


def make_run_dir(cfg: cfgmod.RunConfig, name: str | None = None) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    run_dir = Path(cfg.output_dir) / (name or f"{stamp}-{cfg.digest()}")
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "resolved_config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    return run_dir


def _val_metric(cfg: cfgmod.RunConfig):
    return build_metric(cfg.val_metric)


def run_training(cfg: cfgmod.RunConfig, run_dir: Path):
    """Train one configuration into ``run_dir``; returns (state, net, val manifest)."""
    if not cfg.data.root:
        raise ConfigError("missing required config key 'data.root' (corpus path)")
    manifest = scan_corpus(cfg.data.root, cfg.data.layout)
    train_manifest = manifest.select("train")
    val_manifest = manifest.select("val")
    data = SpectrogramDataset(train_manifest, cfg.spectral, crop_frames=cfg.train.crop_frames)
    val_utts = SpectrogramDataset(val_manifest, cfg.spectral).utterances if len(val_manifest) else []
    torch.manual_seed(cfg.train.seed)
    net = build_backbone(cfg.model.spec())
    state = train(
        cfg.train, data, net, path=cfg.path, precond=cfg.precond, sampler=cfg.sampler,
        val_data=val_utts, val_metric=_val_metric(cfg),
        log_path=run_dir / "train_log.jsonl", checkpoint_dir=run_dir,
        extra_checkpoint={"model": cfg.model.spec()},
    )
    return state, net, val_manifest


def enhancer_from_checkpoint(payload: dict, steps: int | None = None, use_ema: bool = True) -> Enhancer:
    net = build_backbone(payload["model"])
    net.load_state_dict(payload["ema_params"] if use_ema else payload["params"])
    net.eval()
    sampler = SamplerConfig(**payload["sampler"])
    if steps is not None:
        sampler = dataclasses.replace(sampler, n_steps=steps)
    return Enhancer(net, ObjectiveKind(payload["objective"]), SpectralConfig(**payload["spectral"]),
                    PathConfig(**payload["path"]), PrecondConfig(**payload["precond"]), sampler,
                    dtype=next(net.parameters()).dtype)


def _tail(path: Path, n: int = 5) -> str:
    if not path.exists():
        return ""
    return "".join(path.read_text().splitlines(keepends=True)[-n:])


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    manifest = synth_corpus(args.out, args.n_utts, seed=args.seed, duration_s=args.duration, n_val=args.n_val)
    (Path(args.out) / "manifest.json").write_text(manifest.to_json())
    print(f"wrote {2 * len(manifest)} files to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = cfgmod.resolve(args.config, _train_overrides(args))
    if not cfg.data.root:
        raise ConfigError("missing required config key 'data.root' (corpus path)")
    run_dir = make_run_dir(cfg)
    try:
        state, _, _ = run_training(cfg, run_dir)
    except FMSEError as exc:
        if isinstance(exc, ConfigError):
            raise
        print(f"training failed: {exc}", file=sys.stderr)
        print(_tail(run_dir / "train_log.jsonl"), file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"run_dir": str(run_dir), "steps": state.step, "best_val": state.best_val,
                      "history": state.history}))
    return EXIT_OK


def cmd_enhance(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    enhancer = enhancer_from_checkpoint(payload, args.steps)
    src = Path(args.input)
    if src.is_dir():
        inputs = sorted(src.glob("*.wav"))
        out_paths = [Path(args.output) / p.name for p in inputs]
    else:
        inputs = [src]
        out = Path(args.output)
        out_paths = [out / src.name if out.is_dir() else out]
    if not inputs:
        raise UsageError(f"no WAV files found in {src}")
    for path, out_path in zip(inputs, out_paths):
        w = read_wav(path)
        if w.sample_rate != SAMPLE_RATE:
            if not args.resample:
                raise UsageError(f"{path}: sample rate {w.sample_rate} Hz != 16000 Hz (pass --resample)")
            w = resample(w)
        t0 = time.perf_counter()
        est = enhancer(w, seed=utterance_seed(path.stem, args.seed))
        write_wav(out_path, est)
        print(f"{path.name}\t{time.perf_counter() - t0:.3f}s\t-> {out_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    payload = load_checkpoint(args.checkpoint)
    enhancer = enhancer_from_checkpoint(payload, args.steps)
    manifest = scan_corpus(args.corpus, args.layout).select(args.split)
    report = evaluate(manifest, enhancer, args.metrics, seed=args.seed, label=args.label or Path(args.checkpoint).stem)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "report.txt").write_text(report.to_text())
    print(report.to_text())
    return EXIT_OK


def parse_alpha_grid(text: str) -> list[tuple[float, float]]:
    cells = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            ap, as_ = item.split(":")
            cells.append((float(ap), float(as_)))
        except ValueError:
            raise UsageError(f"bad alpha cell {item!r}; expected alpha_p:alpha_s") from None
    return cells


def default_threshold(histories: dict[str, list]) -> float | None:
    """Midpoint between the largest first value and the smallest best value across runs."""
    curves = [h for h in histories.values() if h]
    if not curves:
        return None
    first = max(h[0][1] for h in curves)
    best = min(max(v for _, v in h) for h in curves)
    return 0.5 * (first + best)


def cmd_sweep(args) -> int:
    objectives = [o.strip() for o in (args.objectives or "").split(",") if o.strip()]
    if not objectives:
        raise UsageError("empty objective list")
    for o in objectives:
        try:
            ObjectiveKind(o)
        except ValueError:
            raise UsageError(f"unknown objective {o!r}") from None
    base = cfgmod.resolve(args.config, list(args.set or []))
    if args.published_grid:
        cells = {o: [(PUBLISHED_COMBINED_TABLE[o]["alpha_p"], PUBLISHED_COMBINED_TABLE[o]["alpha_s"])]
                 for o in objectives}
    else:
        grid = parse_alpha_grid(args.alphas)
        if not grid:
            raise UsageError("empty alpha grid")
        cells = {o: grid for o in objectives}
    sweep_dir = Path(base.output_dir) / f"sweep-{datetime.now():%Y%m%d-%H%M%S}-{base.digest()}"
    sweep_dir.mkdir(parents=True, exist_ok=True)
    reports, histories, failures = [], {}, {}
    for objective in objectives:
        for ap, as_ in cells[objective]:
            label = f"{objective} ap={ap:g} as={as_:g}"
            cfg = cfgmod.replace_section(base, "train", objective=objective, alpha_p=ap, alpha_s=as_)
            cfg = dataclasses.replace(cfg, output_dir=str(sweep_dir))
            run_dir = make_run_dir(cfg, name=label.replace(" ", "_").replace("=", ""))
            try:
                state, _, val_manifest = run_training(cfg, run_dir)
                histories[label] = state.history
                payload = load_checkpoint(run_dir / "last.pt")
                report = evaluate(val_manifest, enhancer_from_checkpoint(payload), cfg.metrics,
                                  seed=cfg.train.seed, label=label)
                (run_dir / "report.json").write_text(report.to_json())
                reports.append(report)
            except ConfigError:
                raise
            except Exception as exc:  # noqa: BLE001 - record and keep sweeping
                failures[label] = repr(exc)
                print(f"[sweep] {label} failed: {exc}", file=sys.stderr)
    summary = {"failures": failures, "steps_to_threshold": {}}
    threshold = args.threshold if args.threshold is not None else default_threshold(histories)
    summary["threshold"] = threshold
    if threshold is not None:
        for label, hist in histories.items():
            summary["steps_to_threshold"][label] = steps_to_threshold(hist, threshold) if hist else None
    if reports:
        table = compare_runs(reports)
        (sweep_dir / "comparison.json").write_text(table.to_json())
        (sweep_dir / "comparison.txt").write_text(table.to_text())
        print(table.to_text())
    (sweep_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))
    return EXIT_OK if reports else EXIT_RUNTIME


def read_validation_events(paths) -> tuple[list[tuple[str, int, float]], int]:
    """(run, step, val_metric) rows from JSON-lines logs, plus the count of skipped lines."""
    rows, skipped = [], 0
    for path in paths:
        path = Path(path)
        run = path.parent.name if path.name == "train_log.jsonl" else path.stem
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if "val_metric" in rec:
                    rows.append((run, int(rec["step"]), float(rec["val_metric"])))
            except (ValueError, KeyError, TypeError):
                skipped += 1
                log.warning("%s:%d: malformed log line skipped", path, lineno)
    return rows, skipped


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows, skipped = read_validation_events(args.logs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "step", "val_metric"])
        writer.writerows(rows)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for run in dict.fromkeys(r for r, _, _ in rows):
        pts = [(s, v) for r, s, v in rows if r == run]
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=run)
    ax.set_xlabel("training step")
    ax.set_ylabel(args.ylabel)
    ax.grid(alpha=0.3)
    if rows:
        ax.legend()
    fig.tight_layout()
    for suffix in (".png", ".svg"):
        fig.savefig(out.with_suffix(suffix))
    plt.close(fig)
    print(f"{len(rows)} validation events, {skipped} malformed lines skipped -> {out.with_suffix('.png')}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fmse", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic paired corpus")
    s.add_argument("out")
    s.add_argument("--n-utts", type=int, default=60)
    s.add_argument("--n-val", type=int, default=10)
    s.add_argument("--duration", type=float, default=2.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    def config_args(q):
        q.add_argument("--config", default=None, help=f"YAML/JSON config (default ${cfgmod.CONFIG_ENV})")
        q.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, e.g. train.max_steps=100")

    t = sub.add_parser("train", help="train one model")
    config_args(t)
    t.add_argument("--objective", choices=[k.value for k in ObjectiveKind])
    t.add_argument("--alpha-p", type=float)
    t.add_argument("--alpha-s", type=float)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--corpus")
    t.add_argument("--output-dir")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance a WAV file or a directory of WAVs")
    e.add_argument("checkpoint")
    e.add_argument("input")
    e.add_argument("output")
    e.add_argument("--steps", type=int, default=5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--resample", action="store_true", help="resample non-16 kHz input")
    e.set_defaults(func=cmd_enhance)

    v = sub.add_parser("evaluate", help="score a checkpoint on a corpus split")
    v.add_argument("checkpoint")
    v.add_argument("corpus")
    v.add_argument("--layout", default="voicebank")
    v.add_argument("--split", default="val")
    v.add_argument("--metrics", nargs="+", default=["SI-SDR"])
    v.add_argument("--steps", type=int, default=5)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--label")
    v.add_argument("--out", default="eval")
    v.set_defaults(func=cmd_evaluate)

    w = sub.add_parser("sweep", help="train and compare objectives over an alpha grid")
    config_args(w)
    w.add_argument("--objectives", default="velocity,x1,x1-edm")
    w.add_argument("--alphas", default="0:0", help="comma-separated alpha_p:alpha_s cells")
    w.add_argument("--published-grid", action="store_true", help="use the published per-objective alphas")
    w.add_argument("--threshold", type=float)
    w.set_defaults(func=cmd_sweep)

    g = sub.add_parser("plot", help="plot validation curves from training logs")
    g.add_argument("logs", nargs="+")
    g.add_argument("--out", default="curves.png")
    g.add_argument("--ylabel", default="validation metric")
    g.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
