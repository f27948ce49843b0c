"""Hard recourse constraints: logit masks for decoding and discrete feasibility checks.

Three kinds of constraint are supported. Immutable features never change.
Monotone features may only move to higher codes. A causal rule ``cause ->
effect`` forbids raising the effect unless the cause is raised too.
"""

from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import softmax
from typing_extensions import Self

from pcrecourse.components import defaults
from pcrecourse.data import Discretizer, Schema

NEG = -1e9


@dataclass(frozen=True)
class ConstraintSet:
    """Immutable, monotone and causal constraints over coded features."""

    cardinalities: Tuple[int, ...]
    immutable: FrozenSet[int] = frozenset()
    monotone: FrozenSet[int] = frozenset()
    rules: Tuple[Tuple[int, int], ...] = ()  # (cause, effect)
    budget: float = defaults.LOSS_WEIGHTS["budget"]
    ordered: Optional[Tuple[bool, ...]] = None  # None means every feature is ordinal
    reserved: Tuple[Tuple[int, int], ...] = ()  # (feature, unknown-value code)

    def __post_init__(self):
        d = len(self.cardinalities)
        if self.ordered is not None and len(self.ordered) != d:
            raise ValueError("Need one ordered flag per feature")
        for j, code in self.reserved:
            if not (0 <= j < d and 0 <= code < self.cardinalities[j]):
                raise ValueError(f"Invalid reserved code {code} for feature {j}")
        for j in self.immutable | self.monotone:
            if not 0 <= j < d:
                raise ValueError(f"Constraint references unknown feature {j}")
        for cause, effect in self.rules:
            if not (0 <= cause < d and 0 <= effect < d) or cause == effect:
                raise ValueError(f"Invalid causal rule {cause} -> {effect}")
        if self.budget < 0:
            raise ValueError("Budget must be nonnegative")

    @classmethod
    def from_schema(
        cls,
        schema: Schema,
        discretizer: Discretizer,
        budget: float = defaults.LOSS_WEIGHTS["budget"],
    ) -> Self:
        """Resolve named schema constraints to feature indices.

        Raises ``ValueError`` if a monotone or causal feature has no order.
        """
        names = discretizer.names
        if names != schema.names:
            raise ValueError("Discretizer features do not match the schema")
        for j, name in enumerate(names):
            if schema.needs_order(name) and not discretizer.ordered[j]:
                raise ValueError(f"Feature '{name}' takes part in a constraint but is unordered")
        return cls(
            cardinalities=discretizer.cardinalities,
            immutable=frozenset(j for j, f in enumerate(schema.features) if f.immutable),
            monotone=frozenset(j for j, f in enumerate(schema.features) if f.monotone),
            rules=tuple((schema.index(r.cause), schema.index(r.effect)) for r in schema.causal_rules),
            budget=budget,
            ordered=discretizer.ordered,
            reserved=discretizer.reserved,
        )

    @property
    def num_features(self) -> int:
        return len(self.cardinalities)

    def is_ordered(self, j: int) -> bool:
        return True if self.ordered is None else bool(self.ordered[j])

    @property
    def mutable(self) -> Tuple[int, ...]:
        return tuple(j for j in range(self.num_features) if j not in self.immutable)

    @property
    def effects(self) -> Dict[int, Tuple[int, ...]]:
        """Causal rules grouped as ``cause -> effects``, causes in index order."""
        grouped: Dict[int, List[int]] = {}
        for cause, effect in sorted(self.rules):
            grouped.setdefault(cause, []).append(effect)
        return {cause: tuple(effects) for cause, effects in grouped.items()}

    @property
    def clamped(self) -> Tuple[int, ...]:
        """Mutable effects whose cause is immutable; these may never increase."""
        return tuple(
            sorted({e for c, e in self.rules if c in self.immutable and e not in self.immutable})
        )

    def joint_groups(self) -> List[Tuple[int, ...]]:
        """Connected groups of mutable features linked by causal rules."""
        mutable = set(self.mutable)
        parent = {j: j for j in mutable}

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        linked = set()
        for cause, effect in self.rules:
            if cause in mutable and effect in mutable:
                parent[find(cause)] = find(effect)
                linked.update((cause, effect))
        groups: Dict[int, List[int]] = {}
        for j in sorted(linked):
            groups.setdefault(find(j), []).append(j)
        return sorted((tuple(g) for g in groups.values()), key=lambda g: g[0])


def apply_monotone_mask(logits_j: np.ndarray, factual_j) -> np.ndarray:
    """Mask categories below the factual; works on ``(C,)`` or batched ``(N, C)`` logits."""
    logits = np.array(logits_j, dtype=float)
    factual = np.asarray(factual_j)
    _check_codes(factual, logits.shape[-1])
    below = np.arange(logits.shape[-1]) < factual[..., None]
    logits[below] = NEG
    return logits


def apply_causal_clamp(logits_e: np.ndarray, factual_e) -> np.ndarray:
    """Mask effect categories above the factual."""
    logits = np.array(logits_e, dtype=float)
    factual = np.asarray(factual_e)
    _check_codes(factual, logits.shape[-1])
    above = np.arange(logits.shape[-1]) > factual[..., None]
    logits[above] = NEG
    return logits


@dataclass(frozen=True)
class JointResult:
    """Joint softmax over a causal pair, ``joint[a_c, a_e]``."""

    joint: np.ndarray
    q_cause: np.ndarray
    q_effect: np.ndarray
    argmax: Tuple[int, int]
    mask: np.ndarray


def apply_causal_joint(
    logits_e: np.ndarray, logits_c: np.ndarray, factual_e: int, factual_c: int
) -> JointResult:
    """Masked joint softmax over ``(cause, effect)`` for a single causal pair.

    Args:
        logits_e: Effect logits, already monotone-masked where applicable
        logits_c: Cause logits, already monotone-masked where applicable
        factual_e: Factual effect code
        factual_c: Factual cause code

    Returns:
        Joint distribution, its marginals and the legal joint argmax
    """
    component = JointComponent((0, 1), (len(logits_c), len(logits_e)), ((0, 1),))
    allowed = [np.asarray(logits_c) > NEG / 2, np.asarray(logits_e) > NEG / 2]
    probs, marginals, mask = component.forward(
        [np.asarray(logits_c, dtype=float)[None], np.asarray(logits_e, dtype=float)[None]],
        np.array([[factual_c, factual_e]]),
        [a[None] for a in allowed],
    )
    decoded = component.decode(probs, mask)[0]
    shape = (len(logits_c), len(logits_e))
    return JointResult(
        joint=probs[0].reshape(shape),
        q_cause=marginals[0][0],
        q_effect=marginals[1][0],
        argmax=(int(decoded[0]), int(decoded[1])),
        mask=mask[0].reshape(shape),
    )


class JointComponent:
    """Joint softmax over the cartesian product of causally linked features.

    Assignments are enumerated in row-major order of ``features``. A rule
    ``(cause_pos, effect_pos)`` makes an assignment illegal when the effect
    rises above its factual while the cause does not.
    """

    def __init__(self, features: Sequence[int], cards: Sequence[int], rules: Sequence[Tuple[int, int]]):
        self.features = tuple(features)
        self.cards = tuple(int(c) for c in cards)
        self.rules = tuple(rules)
        grids = np.indices(self.cards).reshape(len(self.cards), -1).T
        self.assignments = grids
        self.indicators = [
            (grids[:, i][:, None] == np.arange(c)[None, :]).astype(float)
            for i, c in enumerate(self.cards)
        ]

    @classmethod
    def for_group(cls, cs: ConstraintSet, group: Sequence[int]) -> Self:
        pos = {j: i for i, j in enumerate(group)}
        rules = [(pos[c], pos[e]) for c, e in cs.rules if c in pos and e in pos]
        return cls(group, [cs.cardinalities[j] for j in group], rules)

    @property
    def size(self) -> int:
        return self.assignments.shape[0]

    def legal(self, factual: np.ndarray, allowed: Sequence[np.ndarray]) -> np.ndarray:
        """``(N, S)`` mask of assignments passing every rule and per-feature mask."""
        mask = np.ones((factual.shape[0], self.size), dtype=bool)
        for i, allow in enumerate(allowed):
            mask &= allow[:, self.assignments[:, i]]
        for c, e in self.rules:
            ok_effect = self.assignments[None, :, e] <= factual[:, e][:, None]
            raised_cause = self.assignments[None, :, c] > factual[:, c][:, None]
            mask &= ok_effect | raised_cause
        return mask

    def forward(
        self, logits: Sequence[np.ndarray], factual: np.ndarray, allowed: Sequence[np.ndarray]
    ) -> Tuple[np.ndarray, List[np.ndarray], np.ndarray]:
        """Joint probabilities ``(N, S)``, per-feature marginals and the legal mask."""
        mask = self.legal(factual, allowed)
        if not mask.any(axis=1).all():
            raise AssertionError("Joint mask removed every assignment")
        joint_logits = sum(l @ ind.T for l, ind in zip(logits, self.indicators))
        probs = softmax(np.where(mask, joint_logits, NEG), axis=1)
        marginals = [probs @ ind for ind in self.indicators]
        return probs, marginals, mask

    def backward(
        self, probs: np.ndarray, mask: np.ndarray, marginal_grads: Sequence[np.ndarray]
    ) -> List[np.ndarray]:
        """Gradients of the per-feature logits from gradients of the marginals."""
        g = sum(dq @ ind.T for dq, ind in zip(marginal_grads, self.indicators))
        dl = probs * (g - (probs * g).sum(axis=1, keepdims=True))
        dl = np.where(mask, dl, 0.0)
        return [dl @ ind for ind in self.indicators]

    def decode(self, probs: np.ndarray, mask: np.ndarray) -> np.ndarray:
        """Legal joint argmax per row; ties go to the first assignment."""
        best = np.argmax(np.where(mask, probs, -1.0), axis=1)
        return self.assignments[best]


def feasible(candidate: np.ndarray, factual: np.ndarray, cs: ConstraintSet) -> bool:
    """Immutables kept, monotone features not lowered, every causal rule holds."""
    return bool(feasible_rows(candidate, factual, cs).all())


def feasible_rows(candidates: np.ndarray, factuals: np.ndarray, cs: ConstraintSet) -> np.ndarray:
    """Row-wise :func:`feasible` for ``(N, D)`` arrays (broadcasts a single factual)."""
    return actionable_rows(candidates, factuals, cs) & causal_rows(candidates, factuals, cs)


def actionable_rows(candidates: np.ndarray, factuals: np.ndarray, cs: ConstraintSet) -> np.ndarray:
    c, x = _pair(candidates, factuals)
    ok = np.ones(c.shape[0], dtype=bool)
    for j in cs.immutable:
        ok &= c[:, j] == x[:, j]
    for j in cs.monotone:
        ok &= c[:, j] >= x[:, j]
    for j, code in cs.reserved:
        ok &= (c[:, j] != code) | (x[:, j] == code)
    return ok


def causal_rows(candidates: np.ndarray, factuals: np.ndarray, cs: ConstraintSet) -> np.ndarray:
    c, x = _pair(candidates, factuals)
    ok = np.ones(c.shape[0], dtype=bool)
    for cause, effect in cs.rules:
        ok &= (c[:, effect] <= x[:, effect]) | (c[:, cause] > x[:, cause])
    return ok


def mutable_hamming(candidate: np.ndarray, factual: np.ndarray, mutable: Sequence[int]) -> np.ndarray:
    c, x = _pair(candidate, factual)
    idx = list(mutable)
    out = (c[:, idx] != x[:, idx]).sum(axis=1)
    return out[0] if np.ndim(candidate) == 1 else out


def within_budget(
    candidate: np.ndarray, factual: np.ndarray, mutable: Sequence[int], budget: float
) -> bool:
    """Hamming distance over mutable features is at most ``budget``."""
    if budget < 0:
        raise ValueError("Budget must be nonnegative")
    return bool(np.all(mutable_hamming(candidate, factual, mutable) <= budget))


def _pair(candidates, factuals) -> Tuple[np.ndarray, np.ndarray]:
    c = np.atleast_2d(np.asarray(candidates))
    x = np.broadcast_to(np.atleast_2d(np.asarray(factuals)), c.shape)
    return c, x


def _check_codes(codes: np.ndarray, card: int) -> None:
    if ((codes < 0) | (codes >= card)).any():
        raise ValueError(f"Factual code out of range for {card} categories")
