"""LearnSPN structure learning for categorical data."""

from typing import List, Optional, Sequence

import numpy as np
from scipy.stats import chi2_contingency
from sklearn.cluster import KMeans

from pcrecourse.circuit import Circuit, CircuitBuilder, CircuitValidationError
from pcrecourse.components import defaults
from pcrecourse.data import one_hot_batch
from pcrecourse.utils.logger import logger

WEIGHT_FLOOR = 1e-6


def learn_structure(
    codes: np.ndarray,
    cards: Sequence[int],
    min_rows: int = defaults.CIRCUIT["min_rows"],
    min_cols: int = defaults.CIRCUIT["min_cols"],
    rng: Optional[np.random.Generator] = None,
    alpha: float = defaults.CIRCUIT["alpha"],
    significance: float = defaults.CIRCUIT["significance"],
    n_clusters: int = defaults.CIRCUIT["n_clusters"],
    n_init: int = defaults.CIRCUIT["n_init"],
) -> Circuit:
    """Learn a smooth, decomposable circuit from a discrete table.

    Args:
        codes: Integer table of shape (N, D)
        cards: Cardinality of every feature
        min_rows: Slices with fewer rows become fully factorized
        min_cols: Slices with fewer features become fully factorized
        rng: Seeds the row clustering
        alpha: Add-alpha smoothing of leaf estimates
        significance: G-test level; p-values above it mean independence
        n_clusters: Number of row clusters per sum node
        n_init: k-means restarts

    Returns:
        A validated circuit over all D features
    """
    codes = np.asarray(codes, dtype=np.int64)
    if codes.ndim != 2 or codes.shape[0] == 0:
        raise ValueError("Cannot learn a circuit from an empty table")
    cards = [int(c) for c in cards]
    if codes.shape[1] != len(cards):
        raise ValueError(f"Table has {codes.shape[1]} columns but {len(cards)} cardinalities given")
    learner = _LearnSpn(
        cards,
        min_rows=min_rows,
        min_cols=min_cols,
        rng=rng if rng is not None else np.random.default_rng(0),
        alpha=alpha,
        significance=significance,
        n_clusters=n_clusters,
        n_init=n_init,
    )
    learner.learn(codes, list(range(len(cards))))
    circuit = learner.builder.build()
    report = circuit.validate()
    if not report.ok:
        logger.error(f"Learned circuit failed validation: {report}")
        raise CircuitValidationError(report)
    counts = {"sum": 0, "product": 0, "leaf": 0}
    for node in circuit.nodes:
        counts[node.kind] += 1
    logger.info(
        f"Learned circuit on {codes.shape[0]} rows: {len(circuit)} nodes "
        f"({counts['sum']} sum, {counts['product']} product, {counts['leaf']} leaf)"
    )
    return circuit


def independent_groups(
    codes: np.ndarray, cards: Sequence[int], significance: float = defaults.CIRCUIT["significance"]
) -> List[List[int]]:
    """Connected components of the pairwise-dependence graph (column positions)."""
    n_cols = codes.shape[1]
    parent = list(range(n_cols))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for a in range(n_cols):
        for b in range(a + 1, n_cols):
            if find(a) == find(b):
                continue
            if g_test_pvalue(codes[:, a], codes[:, b], cards[a], cards[b]) <= significance:
                parent[find(a)] = find(b)

    groups = {}
    for col in range(n_cols):
        groups.setdefault(find(col), []).append(col)
    return sorted(groups.values(), key=lambda g: g[0])


def g_test_pvalue(a: np.ndarray, b: np.ndarray, card_a: int, card_b: int) -> float:
    """Log-likelihood ratio test of independence between two categorical columns."""
    table = np.zeros((card_a, card_b))
    np.add.at(table, (a, b), 1)
    table = table[table.sum(axis=1) > 0][:, table.sum(axis=0) > 0]
    if table.shape[0] < 2 or table.shape[1] < 2:
        return 1.0
    _, pvalue, _, _ = chi2_contingency(table, correction=False, lambda_="log-likelihood")
    return float(pvalue)


def leaf_params(column: np.ndarray, card: int, alpha: float) -> np.ndarray:
    counts = np.bincount(column, minlength=card).astype(float)
    return (counts + alpha) / (counts.sum() + alpha * card)


class _LearnSpn:
    def __init__(self, cards, min_rows, min_cols, rng, alpha, significance, n_clusters, n_init):
        self.cards = cards
        self.min_rows = min_rows
        self.min_cols = min_cols
        self.rng = rng
        self.alpha = alpha
        self.significance = significance
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.builder = CircuitBuilder(cards)

    def learn(self, data: np.ndarray, features: List[int]) -> int:
        if len(features) == 1:
            return self._leaf(data[:, 0], features[0])
        if data.shape[0] < self.min_rows or len(features) < self.min_cols:
            return self._factorized(data, features)

        local_cards = [self.cards[j] for j in features]
        groups = independent_groups(data, local_cards, self.significance)
        if len(groups) > 1:
            children = [self.learn(data[:, g], [features[i] for i in g]) for g in groups]
            return self.builder.add_product(children)

        labels = self._cluster(data, local_cards)
        if labels is None:
            return self._factorized(data, features)
        children, sizes = [], []
        for k in np.unique(labels):
            rows = labels == k
            children.append(self.learn(data[rows], features))
            sizes.append(rows.sum())
        weights = np.maximum(np.asarray(sizes, dtype=float) / data.shape[0], WEIGHT_FLOOR)
        return self.builder.add_sum(children, weights / weights.sum())

    def _cluster(self, data: np.ndarray, local_cards: List[int]) -> Optional[np.ndarray]:
        if len(np.unique(data, axis=0)) < self.n_clusters:
            return None
        kmeans = KMeans(
            n_clusters=self.n_clusters,
            n_init=self.n_init,
            random_state=int(self.rng.integers(2**31 - 1)),
        )
        labels = kmeans.fit_predict(one_hot_batch(data, local_cards))
        if len(np.unique(labels)) < 2:
            return None
        return labels

    def _leaf(self, column: np.ndarray, feature: int) -> int:
        return self.builder.add_leaf(feature, leaf_params(column, self.cards[feature], self.alpha))

    def _factorized(self, data: np.ndarray, features: List[int]) -> int:
        leaves = [self._leaf(data[:, i], j) for i, j in enumerate(features)]
        return self.builder.add_product(leaves)
