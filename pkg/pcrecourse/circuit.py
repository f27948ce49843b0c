"""Smooth, decomposable probabilistic circuits over categorical variables.

Nodes live in an arena in topological order (children before parents).
All evaluation is carried out in log space. Soft inputs replace the one-hot
indicator of each feature by a probability vector; leaves then return the
expectation ``sum_c q[j, c] * theta[j, c]`` and the circuit value becomes
multilinear in every block ``q[j]``.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import logsumexp
from typing_extensions import Self

from pcrecourse.utils.logger import logger

SUM = "sum"
PRODUCT = "product"
LEAF = "leaf"

SIMPLEX_TOL = 1e-9
NORMALIZATION_TOL = 1e-9
FORMAT_HEADER = "pcrecourse-circuit"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class CircuitNode:
    """One sum, product or categorical leaf node."""

    kind: str
    scope: FrozenSet[int]
    children: Tuple[int, ...] = ()
    weights: Optional[np.ndarray] = None
    feature: Optional[int] = None
    params: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ValidationIssue:
    node: int
    check: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of structural and parameter checks; ``ok`` means usable."""

    issues: Tuple[ValidationIssue, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.issues

    @property
    def smooth(self) -> bool:
        return not any(i.check == "smoothness" for i in self.issues)

    @property
    def decomposable(self) -> bool:
        return not any(i.check == "decomposability" for i in self.issues)

    def checks(self, node: int) -> List[str]:
        return [i.check for i in self.issues if i.node == node]

    def __str__(self) -> str:
        if self.ok:
            return "circuit valid"
        return "; ".join(f"node {i.node}: {i.check} ({i.message})" for i in self.issues)


class CircuitValidationError(ValueError):
    """Raised when an invalid circuit is used for inference."""

    def __init__(self, report: ValidationReport):
        super().__init__(str(report))
        self.report = report


@dataclass(frozen=True)
class SoftInstance:
    """Per-feature probability vectors, batched as ``(N, C_j)`` blocks."""

    blocks: Tuple[np.ndarray, ...]

    @classmethod
    def from_blocks(cls, blocks: Sequence[np.ndarray]) -> Self:
        return cls(tuple(np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks))

    @classmethod
    def from_codes(cls, codes: np.ndarray, cards: Sequence[int]) -> Self:
        """Vertex of the product of simplices at hard instance(s) ``codes``."""
        codes = np.atleast_2d(np.asarray(codes, dtype=np.int64))
        blocks = []
        for j, card in enumerate(cards):
            block = np.zeros((codes.shape[0], card))
            block[np.arange(codes.shape[0]), codes[:, j]] = 1.0
            blocks.append(block)
        return cls(tuple(blocks))

    @property
    def batch_size(self) -> int:
        return self.blocks[0].shape[0]

    def replace_block(self, j: int, block: np.ndarray) -> Self:
        """Copy with block ``j`` replaced (broadcast over the batch)."""
        block = np.broadcast_to(np.asarray(block, dtype=float), self.blocks[j].shape)
        blocks = list(self.blocks)
        blocks[j] = np.array(block)
        return type(self)(tuple(blocks))

    def check(self, cards: Sequence[int], tol: float = SIMPLEX_TOL) -> None:
        """Raise ``ValueError`` unless every block lies on its simplex."""
        if len(self.blocks) != len(cards):
            raise ValueError(f"Expected {len(cards)} blocks, got {len(self.blocks)}")
        for j, (block, card) in enumerate(zip(self.blocks, cards)):
            if block.shape[1] != card:
                raise ValueError(f"Block {j} has {block.shape[1]} entries, expected {card}")
            if (block < -tol).any():
                raise ValueError(f"Block {j} has negative entries")
            if np.abs(block.sum(axis=1) - 1.0).max() > tol:
                raise ValueError(f"Block {j} does not sum to 1")


class CircuitBuilder:
    """Appends nodes in topological order and computes their scopes."""

    def __init__(self, cardinalities: Sequence[int]):
        self.cardinalities = tuple(int(c) for c in cardinalities)
        self.nodes: List[CircuitNode] = []

    def add_leaf(self, feature: int, params: Sequence[float]) -> int:
        params = np.asarray(params, dtype=float)
        self.nodes.append(
            CircuitNode(kind=LEAF, scope=frozenset([feature]), feature=feature, params=params)
        )
        return len(self.nodes) - 1

    def add_sum(self, children: Sequence[int], weights: Sequence[float]) -> int:
        scope = frozenset().union(*(self.nodes[c].scope for c in children))
        self.nodes.append(
            CircuitNode(
                kind=SUM,
                scope=scope,
                children=tuple(children),
                weights=np.asarray(weights, dtype=float),
            )
        )
        return len(self.nodes) - 1

    def add_product(self, children: Sequence[int]) -> int:
        scope = frozenset().union(*(self.nodes[c].scope for c in children))
        self.nodes.append(CircuitNode(kind=PRODUCT, scope=scope, children=tuple(children)))
        return len(self.nodes) - 1

    def build(self, root: Optional[int] = None) -> "Circuit":
        return Circuit(self.nodes, len(self.nodes) - 1 if root is None else root, self.cardinalities)


SoftInput = Union[SoftInstance, Sequence[np.ndarray]]


class Circuit:
    """A probabilistic circuit; immutable once built."""

    def __init__(self, nodes: Sequence[CircuitNode], root: int, cardinalities: Sequence[int]):
        self.nodes = tuple(nodes)
        self.root = int(root)
        self.cardinalities = tuple(int(c) for c in cardinalities)
        self._report: Optional[ValidationReport] = None
        with np.errstate(divide="ignore"):
            self._log_weights = [
                np.log(n.weights) if n.kind == SUM else None for n in self.nodes
            ]
            self._log_params = [np.log(n.params) if n.kind == LEAF else None for n in self.nodes]

    @property
    def num_features(self) -> int:
        return len(self.cardinalities)

    def __len__(self) -> int:
        return len(self.nodes)

    def validate(self) -> ValidationReport:
        """Check acyclicity, smoothness, decomposability and normalization."""
        if self._report is None:
            self._report = _validate(self)
        return self._report

    def ensure_valid(self) -> None:
        report = self.validate()
        if not report.ok:
            logger.error(f"Invalid circuit: {report}")
            raise CircuitValidationError(report)

    def log_likelihood(self, codes: np.ndarray) -> np.ndarray:
        """Exact ``log p(x)`` for one instance ``(D,)`` or a batch ``(N, D)``."""
        self.ensure_valid()
        codes = np.asarray(codes, dtype=np.int64)
        single = codes.ndim == 1
        codes = np.atleast_2d(codes)
        if codes.shape[1] != self.num_features:
            raise ValueError(f"Expected {self.num_features} features, got {codes.shape[1]}")
        cards = np.asarray(self.cardinalities)
        if ((codes < 0) | (codes >= cards[None, :])).any():
            raise ValueError("Instance code outside its feature's cardinality")

        def leaf_log(i, node):
            return self._log_params[i][codes[:, node.feature]]

        values = self._forward(leaf_log, codes.shape[0])
        out = values[self.root]
        return out[0] if single else out

    def soft_value(self, q: SoftInput) -> np.ndarray:
        """``log v(q)`` of the multilinear extension at soft input(s) ``q``."""
        self.ensure_valid()
        soft, single = self._as_soft(q)
        values = self._soft_forward(soft)
        out = values[self.root]
        return out[0] if single else out

    def soft_gradient(self, q: SoftInput, method: str = "backward") -> Tuple[np.ndarray, List[np.ndarray]]:
        """Partials of ``log v(q)`` with respect to every ``q[j, c]``.

        Args:
            q: Soft input, single or batched
            method: ``"backward"`` for one reverse pass over the DAG or
                ``"evaluations"`` for ``C_j`` block-replaced evaluations per feature

        Returns:
            ``(log v(q), [d log v / d q_j for each feature j])``
        """
        self.ensure_valid()
        soft, single = self._as_soft(q)
        values = self._soft_forward(soft)
        log_v = values[self.root]
        if np.isneginf(log_v).any():
            raise ValueError("Circuit value is zero; gradient of log v is undefined")
        if method == "backward":
            grads = self._backward(values, soft.batch_size)
        elif method == "evaluations":
            grads = self._replacement_gradient(soft, log_v)
        else:
            raise ValueError(f"Unknown gradient method: {method}")
        if single:
            return log_v[0], [g[0] for g in grads]
        return log_v, grads

    def sample(self, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
        """Ancestral samples: one ``(D,)`` instance, or ``(n, D)`` when ``n`` is given."""
        self.ensure_valid()
        count = 1 if n is None else int(n)
        out = np.full((count, self.num_features), -1, dtype=np.int64)
        rows = {self.root: np.arange(count)}
        for i in range(len(self.nodes) - 1, -1, -1):
            assigned = rows.pop(i, None)
            if assigned is None or assigned.size == 0:
                continue
            node = self.nodes[i]
            if node.kind == LEAF:
                out[assigned, node.feature] = _draw(rng, node.params, assigned.size)
            elif node.kind == PRODUCT:
                for child in node.children:
                    rows[child] = _extend(rows.get(child), assigned)
            else:
                picks = _draw(rng, node.weights, assigned.size)
                for k, child in enumerate(node.children):
                    rows[child] = _extend(rows.get(child), assigned[picks == k])
        return out[0] if n is None else out

    def _as_soft(self, q: SoftInput) -> Tuple[SoftInstance, bool]:
        blocks = q.blocks if isinstance(q, SoftInstance) else q
        single = np.asarray(blocks[0]).ndim == 1
        soft = SoftInstance.from_blocks(blocks)
        soft.check(self.cardinalities)
        return soft, single

    def _soft_forward(self, soft: SoftInstance) -> List[np.ndarray]:
        def leaf_log(i, node):
            with np.errstate(divide="ignore"):
                return np.log(soft.blocks[node.feature] @ node.params)

        return self._forward(leaf_log, soft.batch_size)

    def _forward(self, leaf_log, batch: int) -> List[np.ndarray]:
        values: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        for i, node in enumerate(self.nodes):
            if node.kind == LEAF:
                values[i] = leaf_log(i, node)
            elif node.kind == PRODUCT:
                total = np.zeros(batch)
                for child in node.children:
                    total = total + values[child]
                values[i] = total
            else:
                stacked = np.stack([values[c] for c in node.children])
                values[i] = logsumexp(stacked + self._log_weights[i][:, None], axis=0)
        return values

    def _backward(self, values: List[np.ndarray], batch: int) -> List[np.ndarray]:
        # adjoint[n] = log( (d v_root / d v_n) / v_root )
        adjoint = [None] * len(self.nodes)
        adjoint[self.root] = np.zeros(batch) - values[self.root]
        grads = [np.zeros((batch, c)) for c in self.cardinalities]
        for i in range(len(self.nodes) - 1, -1, -1):
            if adjoint[i] is None:
                continue
            node = self.nodes[i]
            if node.kind == LEAF:
                grads[node.feature] += np.exp(adjoint[i])[:, None] * node.params[None, :]
            elif node.kind == SUM:
                for k, child in enumerate(node.children):
                    _accumulate(adjoint, child, adjoint[i] + self._log_weights[i][k])
            else:
                for child in node.children:
                    others = np.zeros(batch)
                    for other in node.children:
                        if other != child:
                            others = others + values[other]
                    _accumulate(adjoint, child, adjoint[i] + others)
        return grads

    def _replacement_gradient(self, soft: SoftInstance, log_v: np.ndarray) -> List[np.ndarray]:
        grads = []
        for j, card in enumerate(self.cardinalities):
            grad = np.zeros((soft.batch_size, card))
            for c in range(card):
                vertex = np.zeros(card)
                vertex[c] = 1.0
                replaced = self._soft_forward(soft.replace_block(j, vertex))[self.root]
                grad[:, c] = np.exp(replaced - log_v)
            grads.append(grad)
        return grads


def validate(circuit: Circuit) -> ValidationReport:
    return circuit.validate()


def log_likelihood(circuit: Circuit, x: np.ndarray) -> np.ndarray:
    return circuit.log_likelihood(x)


def soft_value(circuit: Circuit, q: SoftInput) -> np.ndarray:
    return circuit.soft_value(q)


def soft_gradient(circuit: Circuit, q: SoftInput, method: str = "backward") -> List[np.ndarray]:
    """Partials of ``log v(q)``; the circuit value itself is dropped."""
    return circuit.soft_gradient(q, method=method)[1]


def sample(circuit: Circuit, rng: np.random.Generator, n: Optional[int] = None) -> np.ndarray:
    return circuit.sample(rng, n)


def save_circuit(circuit: Circuit, path) -> Path:
    """Write the versioned text format, one node per line in topological order."""
    path = Path(path)
    lines = [
        f"{FORMAT_HEADER} {FORMAT_VERSION}",
        "cardinalities " + " ".join(str(c) for c in circuit.cardinalities),
        f"root {circuit.root}",
    ]
    for i, node in enumerate(circuit.nodes):
        scope = _join(sorted(node.scope))
        if node.kind == LEAF:
            lines.append(f"{i} leaf {scope} {node.feature} {_join(node.params, repr_float=True)}")
        elif node.kind == SUM:
            lines.append(
                f"{i} sum {scope} {_join(node.children)} {_join(node.weights, repr_float=True)}"
            )
        else:
            lines.append(f"{i} product {scope} {_join(node.children)}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_circuit(path) -> Circuit:
    """Read a circuit written by :func:`save_circuit`."""
    lines = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    header = lines[0].split()
    if header[0] != FORMAT_HEADER or int(header[1]) != FORMAT_VERSION:
        raise ValueError(f"Unsupported circuit file header: {lines[0]}")
    cards = [int(v) for v in lines[1].split()[1:]]
    root = int(lines[2].split()[1])
    nodes = []
    for expected, line in enumerate(lines[3:]):
        parts = line.split()
        if int(parts[0]) != expected:
            raise ValueError(f"Node ids must be consecutive, got {parts[0]}")
        kind = parts[1]
        scope = frozenset(_split_ints(parts[2]))
        if kind == LEAF:
            params = np.array([float(v) for v in parts[4].split(",")])
            nodes.append(CircuitNode(kind=LEAF, scope=scope, feature=int(parts[3]), params=params))
        elif kind == SUM:
            weights = np.array([float(v) for v in parts[4].split(",")])
            nodes.append(
                CircuitNode(kind=SUM, scope=scope, children=tuple(_split_ints(parts[3])), weights=weights)
            )
        elif kind == PRODUCT:
            nodes.append(CircuitNode(kind=PRODUCT, scope=scope, children=tuple(_split_ints(parts[3]))))
        else:
            raise ValueError(f"Unknown node kind: {kind}")
    return Circuit(nodes, root, cards)


def _validate(circuit: Circuit) -> ValidationReport:
    issues: List[ValidationIssue] = []
    nodes = circuit.nodes
    count = len(nodes)

    def report(i, check, message):
        issues.append(ValidationIssue(node=i, check=check, message=message))

    if not 0 <= circuit.root < count:
        report(circuit.root, "root", "root id outside the node arena")
        return ValidationReport(tuple(issues))

    for i, node in enumerate(nodes):
        for child in node.children:
            if not 0 <= child < count:
                report(i, "children", f"child {child} does not exist")
            elif child >= i:
                report(i, "topological_order", f"child {child} does not precede its parent")
    if _has_cycle(nodes):
        report(circuit.root, "acyclicity", "the node graph contains a cycle")
    if issues:
        return ValidationReport(tuple(issues))

    for i, node in enumerate(nodes):
        if node.kind == LEAF:
            j = node.feature
            if j is None or not 0 <= j < circuit.num_features:
                report(i, "leaf_feature", f"feature {j} out of range")
                continue
            params = node.params
            if params is None or params.shape != (circuit.cardinalities[j],):
                report(i, "leaf_normalization", f"expected {circuit.cardinalities[j]} parameters")
            elif (params < 0).any() or abs(params.sum() - 1.0) > NORMALIZATION_TOL:
                report(i, "leaf_normalization", f"parameters sum to {params.sum():.12g}")
            if node.scope != frozenset([j]):
                report(i, "scope", "leaf scope must be its own feature")
            continue

        if not node.children:
            report(i, "children", f"{node.kind} node without children")
            continue
        union = frozenset().union(*(nodes[c].scope for c in node.children))
        if node.scope != union:
            report(i, "scope", "scope differs from the union of child scopes")
        if node.kind == SUM:
            weights = node.weights
            if weights is None or weights.shape != (len(node.children),):
                report(i, "weight_normalization", "one weight per child required")
            elif (weights <= 0).any() or (weights > 1).any():
                report(i, "weight_normalization", "weights must lie in (0, 1]")
            elif abs(weights.sum() - 1.0) > NORMALIZATION_TOL:
                report(i, "weight_normalization", f"weights sum to {weights.sum():.12g}")
            if any(nodes[c].scope != node.scope for c in node.children):
                report(i, "smoothness", "children of a sum node must share its scope")
        elif node.kind == PRODUCT:
            seen: set = set()
            for c in node.children:
                if seen & nodes[c].scope:
                    report(i, "decomposability", "children of a product node overlap in scope")
                    break
                seen |= nodes[c].scope
        else:
            report(i, "kind", f"unknown node kind '{node.kind}'")

    if nodes[circuit.root].scope != frozenset(range(circuit.num_features)):
        report(circuit.root, "root_scope", "root scope must cover every feature")
    return ValidationReport(tuple(issues))


def _has_cycle(nodes: Sequence[CircuitNode]) -> bool:
    state = [0] * len(nodes)  # 0 new, 1 on stack, 2 done
    for start in range(len(nodes)):
        if state[start]:
            continue
        stack = [(start, iter(nodes[start].children))]
        state[start] = 1
        while stack:
            node, children = stack[-1]
            child = next(children, None)
            if child is None:
                state[node] = 2
                stack.pop()
            elif 0 <= child < len(nodes):
                if state[child] == 1:
                    return True
                if state[child] == 0:
                    state[child] = 1
                    stack.append((child, iter(nodes[child].children)))
    return False


def _accumulate(adjoint: list, node: int, value: np.ndarray) -> None:
    adjoint[node] = value if adjoint[node] is None else np.logaddexp(adjoint[node], value)


def _draw(rng: np.random.Generator, probs: np.ndarray, size: int) -> np.ndarray:
    cumulative = np.cumsum(probs)
    picks = np.searchsorted(cumulative, rng.random(size) * cumulative[-1], side="right")
    return np.minimum(picks, len(probs) - 1)


def _extend(current: Optional[np.ndarray], rows: np.ndarray) -> np.ndarray:
    return rows if current is None else np.concatenate([current, rows])


def _join(values, repr_float: bool = False) -> str:
    if repr_float:
        return ",".join(repr(float(v)) for v in values)
    return ",".join(str(int(v)) for v in values)


def _split_ints(text: str) -> List[int]:
    return [int(v) for v in text.split(",") if v != ""]
