"""Screening metrics: sensitivity/specificity on the binary task, their
average (the composite score), F1, and cross-fold aggregation.

'abnormal' is the positive class throughout.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .errors import InvalidInput

POSITIVE_LABEL = "abnormal"


@dataclass(frozen=True)
class Confusion:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(y_true: list[str], y_pred: list[str]) -> Confusion:
    """Count the 2x2 table over binary labels; abnormal is positive."""
    if len(y_true) != len(y_pred):
        raise InvalidInput(f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted")
    tp = tn = fp = fn = 0
    for t, p in zip(y_true, y_pred):
        for lab in (t, p):
            if lab not in ("normal", "abnormal"):
                raise InvalidInput(f"unexpected label {lab!r}, want 'normal' or 'abnormal'")
        if t == POSITIVE_LABEL:
            if p == POSITIVE_LABEL:
                tp += 1
            else:
                fn += 1
        else:
            if p == POSITIVE_LABEL:
                fp += 1
            else:
                tn += 1
    return Confusion(tp=tp, tn=tn, fp=fp, fn=fn)


@dataclass(frozen=True)
class FoldMetrics:
    sensitivity: float  # percent
    specificity: float  # percent
    score: float        # percent, (Se + Sp) / 2
    f1: float           # 0..1
    degenerate: bool    # some rate had an empty denominator and was set to 0
    counts: Confusion | None = None


def compute_metrics(conf: Confusion) -> FoldMetrics:
    """Se/Sp/Score in percent and F1 in [0, 1] from a confusion table.

    A rate whose denominator is zero (no positives present, no negatives
    present, or no positives either present or predicted for F1) is reported
    as 0.0 and the result is flagged degenerate rather than raising; an
    entirely empty table is an error.
    """
    if conf.total == 0:
        raise InvalidInput("confusion table is all zeros")
    if min(conf.tp, conf.tn, conf.fp, conf.fn) < 0:
        raise InvalidInput("confusion counts must be non-negative")
    degenerate = False
    if conf.tp + conf.fn > 0:
        se = 100.0 * conf.tp / (conf.tp + conf.fn)
    else:
        se, degenerate = 0.0, True
    if conf.tn + conf.fp > 0:
        sp = 100.0 * conf.tn / (conf.tn + conf.fp)
    else:
        sp, degenerate = 0.0, True
    if 2 * conf.tp + conf.fp + conf.fn > 0:
        f1 = 2.0 * conf.tp / (2 * conf.tp + conf.fp + conf.fn)
    else:
        f1, degenerate = 0.0, True
    return FoldMetrics(sensitivity=se, specificity=sp, score=(se + sp) / 2.0,
                       f1=f1, degenerate=degenerate, counts=conf)


def macro_f1(conf: Confusion) -> float:
    """Unweighted mean of the two per-class F1 scores (alternate convention)."""
    f1_abnormal = compute_metrics(conf).f1
    flipped = Confusion(tp=conf.tn, tn=conf.tp, fp=conf.fn, fn=conf.fp)
    return (f1_abnormal + compute_metrics(flipped).f1) / 2.0


@dataclass(frozen=True)
class Aggregate:
    mean: float
    sd: float  # sample standard deviation (n-1); 0.0 for a single fold
    n: int


def aggregate(values: list[float]) -> Aggregate:
    """Mean and sample standard deviation across folds."""
    if not values:
        raise InvalidInput("cannot aggregate zero folds")
    n = len(values)
    mean = sum(values) / n
    if n == 1:
        return Aggregate(mean=mean, sd=0.0, n=1)
    var = sum((v - mean) ** 2 for v in values) / (n - 1)
    return Aggregate(mean=mean, sd=var ** 0.5, n=n)


@dataclass
class MetricsReport:
    """Per-setup fold metrics plus aggregates, renderable as JSON or text."""

    setups: dict[int, list[FoldMetrics]] = field(default_factory=dict)
    setup_names: dict[int, str] = field(default_factory=dict)
    config_echo: dict = field(default_factory=dict)

    def add(self, setup: int, name: str, folds: list[FoldMetrics]) -> None:
        self.setups[setup] = list(folds)
        self.setup_names[setup] = name

    def aggregates(self, setup: int) -> dict[str, Aggregate]:
        folds = self.setups[setup]
        return {
            "sensitivity": aggregate([f.sensitivity for f in folds]),
            "specificity": aggregate([f.specificity for f in folds]),
            "score": aggregate([f.score for f in folds]),
            "f1": aggregate([f.f1 for f in folds]),
        }

    def to_json(self) -> str:
        setups = {}
        for setup in sorted(self.setups):
            aggs = self.aggregates(setup)
            folds = []
            for f in self.setups[setup]:
                entry = {"sensitivity": f.sensitivity, "specificity": f.specificity,
                         "score": f.score, "f1": f.f1, "degenerate": f.degenerate}
                if f.counts is not None:
                    entry["counts"] = {"tp": f.counts.tp, "tn": f.counts.tn,
                                       "fp": f.counts.fp, "fn": f.counts.fn}
                folds.append(entry)
            setups[str(setup)] = {
                "name": self.setup_names.get(setup, ""),
                "folds": folds,
                "aggregate": {k: {"mean": a.mean, "sd": a.sd, "n": a.n}
                              for k, a in aggs.items()},
            }
        return json.dumps({"config_echo": self.config_echo, "setups": setups}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        data = json.loads(text)
        report = cls(config_echo=data.get("config_echo", {}))
        for key, block in data.get("setups", {}).items():
            folds = []
            for f in block["folds"]:
                counts = None
                if "counts" in f:
                    counts = Confusion(tp=f["counts"]["tp"], tn=f["counts"]["tn"],
                                       fp=f["counts"]["fp"], fn=f["counts"]["fn"])
                folds.append(FoldMetrics(
                    sensitivity=f["sensitivity"], specificity=f["specificity"],
                    score=f["score"], f1=f["f1"], degenerate=f["degenerate"],
                    counts=counts))
            report.add(int(key), block.get("name", ""), folds)
        return report

    def render_text(self) -> str:
        """Results table: one row per setup, mean +- sd columns."""
        header = (f"{'Setup':<42} {'Se (%)':>16} {'Sp (%)':>16} "
                  f"{'Score (%)':>16} {'F1':>13}")
        lines = [header, "-" * len(header)]
        for setup in sorted(self.setups):
            aggs = self.aggregates(setup)
            name = f"{setup}. {self.setup_names.get(setup, '')}"

            def cell(key: str, digits: int = 2) -> str:
                a = aggs[key]
                if a.n == 1:
                    return f"{a.mean:.{digits}f}"
                return f"{a.mean:.{digits}f} +- {a.sd:.{digits}f}"

            lines.append(f"{name:<42} {cell('sensitivity'):>16} {cell('specificity'):>16} "
                         f"{cell('score'):>16} {cell('f1', 3):>13}")
        flagged = [s for s, folds in sorted(self.setups.items()) if any(f.degenerate for f in folds)]
        if flagged:
            lines.append(f"note: degenerate folds (zero-denominator rates) in setups {flagged}")
        return "\n".join(lines)
