"""Local search that repairs, validates and sparsifies decoded counterfactuals."""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from pcrecourse.circuit import Circuit
from pcrecourse.constraints import ConstraintSet, feasible_rows, mutable_hamming
from pcrecourse.data import one_hot_batch
from pcrecourse.neural import MlpModel, predict_proba
from pcrecourse.utils.logger import logger


@dataclass(frozen=True)
class Candidate:
    assignment: np.ndarray
    score: float
    hamming: int
    loglik: float = 0.0

    def key(self) -> Tuple[float, int, float]:
        """Smaller is better among valid candidates."""
        return (-self.score, self.hamming, -self.loglik)


@dataclass(frozen=True)
class RefineConfig:
    tau: float = 0.5
    delta_max: Optional[float] = None

    def __post_init__(self):
        if self.delta_max is not None and self.delta_max < 0:
            raise ValueError("delta_max must be nonnegative")


def repair_causality(c: np.ndarray, x_f: np.ndarray, effects: Dict[int, Sequence[int]]) -> np.ndarray:
    """Clamp effects back to the factual wherever their cause was not raised."""
    c = np.array(c, copy=True)
    for cause, group in effects.items():
        if c[cause] <= x_f[cause]:
            for effect in group:
                if c[effect] > x_f[effect]:
                    c[effect] = x_f[effect]
    return c


class _Scorer:
    """Batched classifier scores and ``p+`` log-likelihoods for candidates."""

    def __init__(self, classifier: MlpModel, cards: Sequence[int], p_plus: Optional[Circuit]):
        self.classifier = classifier
        self.cards = cards
        self.p_plus = p_plus

    def scores(self, candidates: np.ndarray) -> np.ndarray:
        return predict_proba(self.classifier, one_hot_batch(candidates, self.cards))

    def logliks(self, candidates: np.ndarray) -> np.ndarray:
        if self.p_plus is None:
            return np.zeros(len(candidates))
        return np.atleast_1d(self.p_plus.log_likelihood(candidates))


def sparsify(
    c: np.ndarray,
    x_f: np.ndarray,
    cs: ConstraintSet,
    classifier: MlpModel,
    tau: float,
    cfg: Optional[RefineConfig] = None,
    p_plus: Optional[Circuit] = None,
    budget: Optional[float] = None,
) -> np.ndarray:
    """Revert changed mutable features one at a time while the candidate stays valid.

    Args:
        c: Valid, feasible candidate
        x_f: Factual
        cs: Constraints
        classifier: Frozen classifier
        tau: Decision threshold
        cfg: Optional plausibility guard settings
        p_plus: Accepted-class circuit, needed by the guard
        budget: Hamming budget; defaults to the candidate's own distance

    Returns:
        The sparsified candidate
    """
    cfg = cfg or RefineConfig(tau=tau)
    scorer = _Scorer(classifier, cs.cardinalities, p_plus)
    c = np.asarray(c).copy()
    x_f = np.asarray(x_f)
    budget = mutable_hamming(c, x_f, cs.mutable) if budget is None else budget
    if scorer.scores(c[None])[0] < tau:
        raise ValueError("sparsify needs a candidate the classifier accepts")
    if not feasible_rows(c[None], x_f, cs)[0] or mutable_hamming(c, x_f, cs.mutable) > budget:
        raise ValueError("sparsify needs a feasible candidate within budget")
    guard = cfg.delta_max is not None and p_plus is not None
    reference = scorer.logliks(c[None])[0] if guard else 0.0
    effects = cs.effects

    while True:
        changed = [j for j in cs.mutable if c[j] != x_f[j]]
        order = sorted(changed, key=lambda j: (_distance(cs, j, c, x_f), j))
        accepted = False
        for j in order:
            trial = c.copy()
            trial[j] = x_f[j]
            trial = repair_causality(trial, x_f, effects)
            if mutable_hamming(trial, x_f, cs.mutable) > budget or not feasible_rows(trial[None], x_f, cs)[0]:
                continue
            if scorer.scores(trial[None])[0] < tau:
                continue
            if guard:
                loglik = scorer.logliks(trial[None])[0]
                if loglik < reference - cfg.delta_max:
                    continue
                reference = loglik
            c = trial
            accepted = True
            break
        if not accepted:
            return c


def refine(
    c0: np.ndarray,
    x_f: np.ndarray,
    cs: ConstraintSet,
    classifier: MlpModel,
    tau: float,
    p_plus: Optional[Circuit] = None,
    cfg: Optional[RefineConfig] = None,
) -> np.ndarray:
    """Two-phase local search around a decoded candidate.

    The Hamming budget is the decoded candidate's own distance. Invalid
    candidates are improved by single-feature moves; the winner (or the
    current candidate, when it is already valid) is then sparsified.
    """
    cfg = cfg or RefineConfig(tau=tau)
    scorer = _Scorer(classifier, cs.cardinalities, p_plus)
    x_f = np.asarray(x_f)
    budget = int(mutable_hamming(c0, x_f, cs.mutable))
    effects = cs.effects

    c = np.asarray(c0).copy()
    immutable = sorted(cs.immutable)
    c[immutable] = x_f[immutable]
    c = repair_causality(c, x_f, effects)
    if mutable_hamming(c, x_f, cs.mutable) > budget or not feasible_rows(c[None], x_f, cs)[0]:
        c = x_f.copy()

    y = scorer.scores(c[None])[0]
    if y >= tau:
        return sparsify(c, x_f, cs, classifier, tau, cfg, p_plus, budget)

    moves = _single_moves(c, x_f, cs, effects)
    if len(moves):
        ok = feasible_rows(moves, x_f, cs) & (mutable_hamming(moves, x_f, cs.mutable) <= budget)
        moves = moves[ok]
    if not len(moves):
        return c

    scores = scorer.scores(moves)
    logliks = scorer.logliks(moves)
    hams = mutable_hamming(moves, x_f, cs.mutable)
    best_valid: Optional[Candidate] = None
    fallback = Candidate(c, float(y), int(mutable_hamming(c, x_f, cs.mutable)), float(scorer.logliks(c[None])[0]))
    for move, score, ham, loglik in zip(moves, scores, hams, logliks):
        cand = Candidate(move, float(score), int(ham), float(loglik))
        if score >= tau:
            if best_valid is None or cand.key() < best_valid.key():
                best_valid = cand
        elif (cand.score, cand.loglik) > (fallback.score, fallback.loglik):
            fallback = cand
    if best_valid is None:
        logger.debug(f"No valid single-feature move; keeping fallback with score {fallback.score:.3f}")
        return fallback.assignment
    return sparsify(best_valid.assignment, x_f, cs, classifier, tau, cfg, p_plus, budget)


def _single_moves(
    c: np.ndarray, x_f: np.ndarray, cs: ConstraintSet, effects: Dict[int, Sequence[int]]
) -> np.ndarray:
    moves: List[np.ndarray] = []
    for j in cs.mutable:
        for v in range(cs.cardinalities[j]):
            if v == c[j]:
                continue
            trial = c.copy()
            trial[j] = v
            moves.append(repair_causality(trial, x_f, effects))
    return np.array(moves) if moves else np.zeros((0, len(c)), dtype=c.dtype)


def _distance(cs: ConstraintSet, j: int, c: np.ndarray, x_f: np.ndarray) -> int:
    return abs(int(c[j]) - int(x_f[j])) if cs.is_ordered(j) else 1
