"""Metric evaluation over a manifest, with mean +/- 95% CI reporting.

SI-SDR is built in.  PESQ and ESTOI use the ``pesq`` and ``pystoi`` packages
when installed; DNSMOS, WER or anything else can be wired in as a command
adapter that prints a score on stdout.  The tables report "SI-SDR"; the
built-in metric is the scale-invariant SDR without mean removal.
"""

from __future__ import annotations

import inspect
import json
import math
import re
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .data import CorpusManifest, load_pair
from .errors import ConfigError, InvalidInputError
from .losses import si_sdr
from .sampler import utterance_seed
from .spectral import SAMPLE_RATE, Waveform, write_wav

Z_95 = 1.96
LOWER_IS_BETTER = {"WER"}


@dataclass
class MetricEvaluator:
    name: str
    fn: Callable[[Waveform, Waveform], float]
    higher_is_better: bool = True

    def __call__(self, estimate: Waveform, reference: Waveform) -> float:
        value = float(self.fn(estimate, reference))
        if not math.isfinite(value):
            raise FloatingPointError(f"{self.name} returned {value}")
        return value


def si_sdr_evaluator() -> MetricEvaluator:
    return MetricEvaluator(
        "SI-SDR", lambda est, ref: si_sdr(est.samples.to(torch.float64), ref.samples.to(torch.float64))
    )


def pesq_evaluator(mode: str = "wb") -> MetricEvaluator:
    try:
        from pesq import pesq
    except ImportError as exc:
        raise ConfigError("the PESQ metric needs the 'pesq' package") from exc
    return MetricEvaluator(
        "PESQ", lambda est, ref: pesq(SAMPLE_RATE, ref.samples.numpy(), est.samples.numpy(), mode)
    )


def estoi_evaluator() -> MetricEvaluator:
    try:
        from pystoi import stoi
    except ImportError as exc:
        raise ConfigError("the ESTOI metric needs the 'pystoi' package") from exc
    return MetricEvaluator(
        "ESTOI", lambda est, ref: stoi(ref.samples.numpy(), est.samples.numpy(), SAMPLE_RATE, extended=True)
    )


_FLOAT = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


def command_evaluator(name: str, command: Sequence[str], higher_is_better: bool | None = None,
                      timeout: float = 600.0) -> MetricEvaluator:
    """Metric computed by an external program.

    ``command`` is an argv list whose items may contain ``{estimate}`` and
    ``{reference}``; both are replaced by paths of 16 kHz float WAV files.
    The last number printed on stdout is the score.
    """
    if higher_is_better is None:
        higher_is_better = name not in LOWER_IS_BETTER

    def run(est: Waveform, ref: Waveform) -> float:
        with tempfile.TemporaryDirectory() as tmp:
            est_path, ref_path = Path(tmp) / "estimate.wav", Path(tmp) / "reference.wav"
            write_wav(est_path, est)
            write_wav(ref_path, ref)
            argv = [a.format(estimate=est_path, reference=ref_path) for a in command]
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=timeout, check=True)
        numbers = _FLOAT.findall(proc.stdout)
        if not numbers:
            raise ValueError(f"{name}: no number in command output {proc.stdout!r}")
        return float(numbers[-1])

    return MetricEvaluator(name, run, higher_is_better)


BUILTIN_METRICS = {"SI-SDR": si_sdr_evaluator, "PESQ": pesq_evaluator, "ESTOI": estoi_evaluator}


def build_metric(spec) -> MetricEvaluator:
    """Metric from a name (``"SI-SDR"``, ``"PESQ"``, ``"ESTOI"``) or a command adapter mapping."""
    if isinstance(spec, MetricEvaluator):
        return spec
    if isinstance(spec, str):
        if spec not in BUILTIN_METRICS:
            raise ConfigError(f"unknown metric {spec!r}; command adapters need a 'command' entry")
        return BUILTIN_METRICS[spec]()
    spec = dict(spec)
    unknown = set(spec) - {"name", "command", "higher_is_better", "timeout"}
    if unknown:
        raise ConfigError(f"unknown metric adapter keys: {sorted(unknown)}")
    if "command" not in spec:
        return build_metric(spec["name"])
    return command_evaluator(spec["name"], spec["command"], spec.get("higher_is_better"),
                             spec.get("timeout", 600.0))


@dataclass(frozen=True)
class Aggregate:
    mean: float
    ci95: float
    count: int | None

    def format(self, digits: int = 2) -> str:
        return f"{self.mean:.{digits}f}±{self.ci95:.{digits}f}"


def aggregate(values: Sequence[float]) -> Aggregate:
    """Mean and normal-approximation 95% half-width ``1.96 * std / sqrt(n)``.

    ``std`` is the standard deviation of the values (``ddof=0``).
    """
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InvalidInputError("cannot aggregate zero values")
    return Aggregate(float(arr.mean()), float(Z_95 * arr.std() / math.sqrt(arr.size)), int(arr.size))


@dataclass
class MetricsReport:
    metrics: list[str]
    per_utterance: dict[str, dict[str, float]] = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)
    label: str = ""

    @property
    def aggregate(self) -> dict[str, Aggregate]:
        out = {}
        for name in self.metrics:
            values = [row[name] for row in self.per_utterance.values() if name in row]
            if values:
                out[name] = aggregate(values)
        return out

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "metrics": list(self.metrics),
            "per_utterance": self.per_utterance,
            "failures": self.failures,
            "aggregate": {k: vars(v) for k, v in self.aggregate.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        doc = json.loads(text)
        return cls(metrics=doc["metrics"], per_utterance=doc["per_utterance"],
                   failures=doc.get("failures", []), label=doc.get("label", ""))

    def to_text(self) -> str:
        agg = self.aggregate
        width = max([len(m) for m in self.metrics] + [6])
        lines = [f"{'metric':<{width}}  {'mean±ci95':>16}  {'n':>5}"]
        for name in self.metrics:
            if name in agg:
                a = agg[name]
                lines.append(f"{name:<{width}}  {a.format(3):>16}  {a.count:>5}")
            else:
                lines.append(f"{name:<{width}}  {'n/a':>16}  {0:>5}")
        if self.failures:
            lines.append(f"{len(self.failures)} failed evaluations")
        return "\n".join(lines)


def _accepts_seed(fn) -> bool:
    try:
        return "seed" in inspect.signature(fn).parameters
    except (TypeError, ValueError):
        return False


def evaluate(manifest: CorpusManifest, enhancer: Callable[..., Waveform],
             metrics: Sequence, seed: int = 0, label: str = "") -> MetricsReport:
    """Enhance every noisy utterance and score it against its clean reference.

    Enhancers accepting a ``seed`` keyword get ``utterance_seed(uid, seed)``.
    A failing metric or enhancement is recorded in ``failures`` and the run
    continues.
    """
    if len(manifest) == 0:
        raise InvalidInputError("manifest is empty")
    evaluators = [build_metric(m) for m in metrics]
    report = MetricsReport(metrics=[e.name for e in evaluators], label=label)
    seeded = _accepts_seed(enhancer)
    for entry in manifest:
        uid = entry.utterance_id
        clean, noisy = load_pair(entry)
        try:
            est = enhancer(noisy, seed=utterance_seed(uid, seed)) if seeded else enhancer(noisy)
        except Exception as exc:  # noqa: BLE001
            report.failures.append({"utterance_id": uid, "metric": "enhance", "error": repr(exc)})
            continue
        row = {}
        for ev in evaluators:
            try:
                row[ev.name] = ev(est, clean)
            except Exception as exc:  # noqa: BLE001
                report.failures.append({"utterance_id": uid, "metric": ev.name, "error": repr(exc)})
        report.per_utterance[uid] = row
    return report


@dataclass
class Comparison:
    labels: list[str]
    metrics: list[str]
    rows: dict[str, dict[str, Aggregate]]
    best: dict[str, list[str]]

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "metrics": self.metrics,
            "rows": {lab: {m: vars(a) for m, a in row.items()} for lab, row in self.rows.items()},
            "best": self.best,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self, digits: int = 2) -> str:
        cells = {
            lab: {m: ("*" if lab in self.best[m] else " ") + self.rows[lab][m].format(digits)
                  for m in self.metrics}
            for lab in self.labels
        }
        lw = max(len(x) for x in self.labels + ["run"])
        widths = {m: max([len(m)] + [len(cells[lab][m]) for lab in self.labels]) for m in self.metrics}
        lines = ["  ".join([f"{'run':<{lw}}"] + [f"{m:>{widths[m]}}" for m in self.metrics])]
        for lab in self.labels:
            lines.append("  ".join([f"{lab:<{lw}}"] + [f"{cells[lab][m]:>{widths[m]}}" for m in self.metrics]))
        lines.append("* best per metric")
        return "\n".join(lines)


def compare_runs(reports: Sequence, labels: Sequence[str] | None = None) -> Comparison:
    """Side-by-side table of aggregates with the best entry per metric marked.

    ``reports`` holds :class:`MetricsReport` objects or plain mappings of
    metric name to :class:`Aggregate` (e.g. published reference rows).
    """
    if not reports:
        raise InvalidInputError("nothing to compare")
    rows, names = {}, []
    for i, rep in enumerate(reports):
        if isinstance(rep, MetricsReport):
            label, agg = rep.label, rep.aggregate
        else:
            label, agg = "", dict(rep)
        if labels is not None:
            label = labels[i]
        label = label or f"run{i}"
        if label in rows:
            label = f"{label}#{i}"
        rows[label] = agg
        names.append(label)
    metric_sets = [set(r) for r in rows.values()]
    if any(s != metric_sets[0] for s in metric_sets):
        diff = {lab: sorted(set(r) ^ metric_sets[0]) for lab, r in rows.items() if set(r) != metric_sets[0]}
        raise InvalidInputError(f"reports cover different metrics: {diff}")
    first = reports[0]
    order = [m for m in (first.metrics if isinstance(first, MetricsReport) else list(first)) if m in metric_sets[0]]
    best = {}
    for m in order:
        vals = {lab: rows[lab][m].mean for lab in names}
        target = min(vals.values()) if m in LOWER_IS_BETTER else max(vals.values())
        best[m] = [lab for lab in names if vals[lab] == target]
    return Comparison(labels=names, metrics=order, rows=rows, best=best)


# Published full-scale results (VoiceBank-DEMAND, N = 5), kept for side-by-side
# formatting only; desk-scale runs are not expected to approach them.
PUBLISHED_OBJECTIVE_TABLE: Mapping[str, Mapping[str, tuple[float, float]]] = {
    "velocity": {"PESQ": (3.04, 0.04), "ESTOI": (0.87, 0.00), "SI-SDR": (19.10, 0.22), "SIG": (3.49, 0.01),
                 "BAK": (4.05, 0.01), "OVRL": (3.21, 0.01), "WER": (0.025, 0.01)},
    "x1": {"PESQ": (2.93, 0.04), "ESTOI": (0.86, 0.00), "SI-SDR": (18.71, 0.22), "SIG": (3.46, 0.01),
           "BAK": (4.04, 0.01), "OVRL": (3.18, 0.01), "WER": (0.030, 0.00)},
    "x1-edm": {"PESQ": (3.08, 0.04), "ESTOI": (0.87, 0.00), "SI-SDR": (18.83, 0.22), "SIG": (3.49, 0.01),
               "BAK": (4.04, 0.01), "OVRL": (3.20, 0.01), "WER": (0.024, 0.00)},
}

# Combined-loss runs: (alpha_p, alpha_s) per objective and the resulting scores.
PUBLISHED_COMBINED_TABLE: Mapping[str, dict] = {
    "velocity": {"alpha_p": 5e-2, "alpha_s": 5e-3,
                 "scores": {"PESQ": (3.30, 0.04), "ESTOI": (0.87, 0.00), "SI-SDR": (18.56, 0.22),
                            "SIG": (3.50, 0.01), "BAK": (4.08, 0.01), "OVRL": (3.23, 0.01),
                            "WER": (0.026, 0.01)}},
    "x1": {"alpha_p": 1e-3, "alpha_s": 1e-4,
           "scores": {"PESQ": (3.26, 0.04), "ESTOI": (0.87, 0.00), "SI-SDR": (18.98, 0.22),
                      "SIG": (3.50, 0.01), "BAK": (4.07, 0.01), "OVRL": (3.23, 0.01), "WER": (0.027, 0.01)}},
    "x1-edm": {"alpha_p": 1e-6, "alpha_s": 1e-7,
               "scores": {"PESQ": (3.34, 0.04), "ESTOI": (0.87, 0.00), "SI-SDR": (18.57, 0.22),
                          "SIG": (3.50, 0.01), "BAK": (4.08, 0.01), "OVRL": (3.23, 0.01),
                          "WER": (0.027, 0.01)}},
}

# PESQ-only runs (alpha_s = 0).
PUBLISHED_PESQ_ONLY_ALPHAS = {"velocity": 5e-2, "x1": 1e-3, "x1-edm": 1e-6}
PUBLISHED_PESQ_ONLY_TABLE: Mapping[str, dict] = {
    "velocity": {"alpha_p": 5e-2, "alpha_s": 0.0,
                 "scores": {"PESQ": (3.67, 0.03), "ESTOI": (0.83, 0.00), "SI-SDR": (5.19, 0.19),
                            "SIG": (3.31, 0.01), "BAK": (4.06, 0.01), "OVRL": (3.06, 0.01),
                            "WER": (0.053, 0.01)}},
    "x1": {"alpha_p": 1e-3, "alpha_s": 0.0,
           "scores": {"PESQ": (3.64, 0.03), "ESTOI": (0.84, 0.00), "SI-SDR": (6.71, 0.19),
                      "SIG": (3.37, 0.01), "BAK": (4.08, 0.01), "OVRL": (3.12, 0.01), "WER": (0.037, 0.01)}},
    "x1-edm": {"alpha_p": 1e-6, "alpha_s": 0.0,
               "scores": {"PESQ": (3.70, 0.03), "ESTOI": (0.84, 0.00), "SI-SDR": (5.33, 0.17),
                          "SIG": (3.32, 0.01), "BAK": (4.06, 0.01), "OVRL": (3.07, 0.01),
                          "WER": (0.040, 0.01)}},
}

# Generative baselines against the recommended configuration; N is the
# number of reverse steps.
PUBLISHED_BASELINE_TABLE: Mapping[str, dict] = {
    "SGMSE+": {"N": 30, "alpha_p": 0.0, "alpha_s": 0.0,
               "scores": {"PESQ": (2.91, 0.04), "ESTOI": (0.87, 0.00), "SI-SDR": (17.28, 0.22),
                          "SIG": (3.49, 0.01), "BAK": (3.98, 0.01), "OVRL": (3.17, 0.01), "WER": (0.040, 0.01)}},
    "StoRM": {"N": 50, "alpha_p": 0.0, "alpha_s": 0.0,
              "scores": {"PESQ": (2.87, 0.04), "ESTOI": (0.87, 0.00), "SI-SDR": (18.48, 0.22),
                         "SIG": (3.49, 0.01), "BAK": (4.03, 0.01), "OVRL": (3.20, 0.01), "WER": (0.037, 0.01)}},
    "SBVE": {"N": 30, "alpha_p": 0.0, "alpha_s": 0.0,
             "scores": {"PESQ": (2.91, 0.04), "ESTOI": (0.87, 0.00), "SI-SDR": (19.43, 0.22),
                        "SIG": (3.49, 0.01), "BAK": (4.06, 0.01), "OVRL": (3.22, 0.01), "WER": (0.026, 0.01)}},
    "FM x1-edm": {"N": 5, "alpha_p": 0.0, "alpha_s": 0.0, "scores": PUBLISHED_OBJECTIVE_TABLE["x1-edm"]},
    "SBVE + PESQ": {"N": 30, "alpha_p": 5e-4, "alpha_s": 0.0,
                    "scores": {"PESQ": (3.56, 0.04), "ESTOI": (0.86, 0.00), "SI-SDR": (13.20, 0.19),
                               "SIG": (3.46, 0.01), "BAK": (4.09, 0.01), "OVRL": (3.21, 0.01),
                               "WER": (0.028, 0.01)}},
    "FM x1-edm + PESQ + SI-SDR": {"N": 5, "alpha_p": 1e-6, "alpha_s": 1e-7,
                                  "scores": PUBLISHED_COMBINED_TABLE["x1-edm"]["scores"]},
}


def published_rows(table: Mapping = PUBLISHED_OBJECTIVE_TABLE) -> dict[str, dict[str, Aggregate]]:
    rows = {}
    for label, entry in table.items():
        scores = entry.get("scores", entry)
        rows[label] = {m: Aggregate(mean, ci, None) for m, (mean, ci) in scores.items()}
    return rows
