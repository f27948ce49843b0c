"""Recourse quality metrics and fold aggregation."""

from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from pcrecourse.circuit import Circuit
from pcrecourse.constraints import ConstraintSet, actionable_rows, causal_rows
from pcrecourse.data import one_hot_batch
from pcrecourse.neural import MlpModel, predict_proba

PRE = "pre"
POST = "post"


@dataclass(frozen=True)
class RecourseRecord:
    """One denied factual with its decoded and refined counterfactuals."""

    index: int
    factual: np.ndarray
    pre: np.ndarray
    post: np.ndarray
    time_generate: float = 0.0
    time_refine: float = 0.0

    def __post_init__(self):
        if self.time_generate < 0 or self.time_refine < 0:
            raise ValueError("Timings must be nonnegative")

    def candidate(self, stage: str = POST) -> np.ndarray:
        return self.post if stage == POST else self.pre

    def seconds(self, stage: str = POST) -> float:
        return self.time_generate + (self.time_refine if stage == POST else 0.0)


@dataclass(frozen=True)
class Summary:
    mean: float
    std: float

    def __str__(self) -> str:
        return f"{self.mean:.2f} ± {self.std:.2f}"


@dataclass(frozen=True)
class MetricsReport:
    """Metrics of one fold and stage; percentages lie in [0, 100]."""

    n: int
    validity: float
    actionability: float
    causality: Optional[float]
    nll: Summary
    similarity: Summary
    sparsity: Summary
    median_time: float
    mean_yhat: float
    alt_yhat: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "MetricsReport":
        data = dict(data)
        for key in ("nll", "similarity", "sparsity"):
            data[key] = Summary(**data[key])
        return cls(**data)


def summarize(values: Sequence[float]) -> Summary:
    """Mean and sample standard deviation (0 for a single value)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("Cannot summarize an empty sequence")
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    return Summary(float(values.mean()), std)


def metric_validity(
    records: Sequence[RecourseRecord], classifier: MlpModel, tau: float, cards: Sequence[int], stage: str = POST
) -> float:
    """Percentage of denied factuals whose counterfactual is accepted."""
    factuals, candidates = _stack(records, stage)
    denied = _scores(classifier, factuals, cards) < tau
    if not denied.any():
        raise ValueError("No denied factuals to evaluate")
    accepted = _scores(classifier, candidates, cards) >= tau
    return float(100.0 * accepted[denied].mean())


def metric_actionability_causality(
    records: Sequence[RecourseRecord], cs: ConstraintSet, stage: str = POST
) -> Tuple[float, Optional[float]]:
    """Actionability and causality percentages; causality is None without causal rules."""
    factuals, candidates = _stack(records, stage)
    action = float(100.0 * actionable_rows(candidates, factuals, cs).mean())
    if not cs.rules:
        return action, None
    return action, float(100.0 * causal_rows(candidates, factuals, cs).mean())


def metric_plausibility(records: Sequence[RecourseRecord], p_plus: Circuit, stage: str = POST) -> Summary:
    """Negative log-likelihood under ``p+`` in nats."""
    _, candidates = _stack(records, stage)
    nll = -np.atleast_1d(p_plus.log_likelihood(candidates))
    if not np.isfinite(nll).all():
        raise ValueError("A counterfactual has zero probability under p+")
    return summarize(nll)


def mad_weights(train_codes: np.ndarray, floor: float = 1.0) -> np.ndarray:
    """Median absolute deviation of every coded feature, floored."""
    codes = np.asarray(train_codes, dtype=float)
    mad = np.median(np.abs(codes - np.median(codes, axis=0)), axis=0)
    return np.maximum(mad, floor)


def similarity_distance(
    candidates: np.ndarray, factuals: np.ndarray, mad: np.ndarray, ordered: Optional[Sequence[bool]] = None
) -> np.ndarray:
    """MAD-weighted l1 distance on codes; unordered features count a change as 1."""
    c = np.atleast_2d(candidates).astype(float)
    x = np.atleast_2d(factuals).astype(float)
    diff = np.abs(c - x)
    if ordered is not None:
        unordered = ~np.asarray(ordered, dtype=bool)
        diff[:, unordered] = (diff[:, unordered] > 0).astype(float)
    return (diff / mad[None, :]).sum(axis=1)


def metric_similarity(
    records: Sequence[RecourseRecord],
    mad: np.ndarray,
    ordered: Optional[Sequence[bool]] = None,
    stage: str = POST,
) -> Summary:
    factuals, candidates = _stack(records, stage)
    return summarize(similarity_distance(candidates, factuals, mad, ordered))


def metric_sparsity_time(
    records: Sequence[RecourseRecord], mutable: Sequence[int], stage: str = POST
) -> Tuple[Summary, float]:
    """Changed mutable features per record and median seconds per recourse."""
    factuals, candidates = _stack(records, stage)
    idx = list(mutable)
    changes = (candidates[:, idx] != factuals[:, idx]).sum(axis=1)
    times = [r.seconds(stage) for r in records]
    return summarize(changes), float(np.median(times))


def cross_model_yhat(
    records: Sequence[RecourseRecord], alt_classifier: MlpModel, cards: Sequence[int], stage: str = POST
) -> float:
    """Mean score of the counterfactuals under an independently trained classifier."""
    _, candidates = _stack(records, stage)
    return float(_scores(alt_classifier, candidates, cards).mean())


def evaluate_records(
    records: Sequence[RecourseRecord],
    classifier: MlpModel,
    tau: float,
    p_plus: Circuit,
    cs: ConstraintSet,
    mad: np.ndarray,
    stage: str = POST,
    alt_classifier: Optional[MlpModel] = None,
) -> MetricsReport:
    """Every metric for one fold at one stage (before or after local search)."""
    if not records:
        raise ValueError("No records to evaluate")
    cards = cs.cardinalities
    action, causal = metric_actionability_causality(records, cs, stage)
    sparsity, median_time = metric_sparsity_time(records, cs.mutable, stage)
    return MetricsReport(
        n=len(records),
        validity=metric_validity(records, classifier, tau, cards, stage),
        actionability=action,
        causality=causal,
        nll=metric_plausibility(records, p_plus, stage),
        similarity=metric_similarity(records, mad, cs.ordered, stage),
        sparsity=sparsity,
        median_time=median_time,
        mean_yhat=cross_model_yhat(records, classifier, cards, stage),
        alt_yhat=cross_model_yhat(records, alt_classifier, cards, stage) if alt_classifier else None,
    )


def aggregate(reports: Sequence[MetricsReport]) -> Dict[str, Any]:
    """Mean and sample std across folds of every scalar metric."""
    if not reports:
        raise ValueError("No fold reports to aggregate")
    columns: Dict[str, List[float]] = {}
    for report in reports:
        for name, value in _scalars(report).items():
            if value is not None:
                columns.setdefault(name, []).append(value)
    out: Dict[str, Any] = {"folds": len(reports)}
    for name, values in columns.items():
        summary = summarize(values)
        out[name] = {"mean": summary.mean, "std": summary.std}
    if all(r.causality is None for r in reports):
        out["causality"] = None
    return out


def _scalars(report: MetricsReport) -> Dict[str, Optional[float]]:
    return {
        "n": float(report.n),
        "validity": report.validity,
        "actionability": report.actionability,
        "causality": report.causality,
        "nll": report.nll.mean,
        "similarity": report.similarity.mean,
        "sparsity": report.sparsity.mean,
        "median_time": report.median_time,
        "mean_yhat": report.mean_yhat,
        "alt_yhat": report.alt_yhat,
    }


def _stack(records: Sequence[RecourseRecord], stage: str) -> Tuple[np.ndarray, np.ndarray]:
    if not records:
        raise ValueError("No records to evaluate")
    if stage not in (PRE, POST):
        raise ValueError(f"Unknown stage: {stage}")
    factuals = np.stack([r.factual for r in records])
    candidates = np.stack([r.candidate(stage) for r in records])
    return factuals, candidates


def _scores(classifier: MlpModel, codes: np.ndarray, cards: Sequence[int]) -> np.ndarray:
    return predict_proba(classifier, one_hot_batch(codes, cards))
