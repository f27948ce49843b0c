"""Declarative schemas, train-split discretization and instance encoding.

Raw tables are turned into fully categorical data: every feature gets a
fixed domain at fit time (a category vocabulary, a set of discrete values or
quantile bin edges) and each value is mapped to a code in
``{0, ..., C_j - 1}``. Codes are ordinal for every kind except unordered
categoricals, which are label encoded.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from typing_extensions import Self

from pcrecourse.utils.logger import logger

ORDERED_CATEGORICAL = "ordered_categorical"
UNORDERED_CATEGORICAL = "unordered_categorical"
DISCRETE_NUMERIC = "discrete_numeric"
BINNED_NUMERIC = "binned_numeric"
NUMERIC = "numeric"  # resolved to discrete or binned at fit time

FEATURE_KINDS = (
    ORDERED_CATEGORICAL,
    UNORDERED_CATEGORICAL,
    DISCRETE_NUMERIC,
    BINNED_NUMERIC,
    NUMERIC,
)
CATEGORICAL_KINDS = (ORDERED_CATEGORICAL, UNORDERED_CATEGORICAL)

# Reserved last category of every unordered categorical; raw values outside the
# training vocabulary map to it.
UNKNOWN_TOKEN = "__unknown__"

FORMAT_VERSION = 1


@dataclass(frozen=True)
class FeatureSpec:
    """Declared type and constraint roles of one raw feature."""

    name: str
    kind: str
    order: Optional[Tuple[str, ...]] = None
    immutable: bool = False
    monotone: bool = False

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise ValueError(f"Feature '{self.name}': unknown kind '{self.kind}'")
        if self.order is not None:
            if len(self.order) == 0:
                raise ValueError(f"Feature '{self.name}': empty ordering")
            if len(set(self.order)) != len(self.order):
                raise ValueError(f"Feature '{self.name}': duplicate entries in ordering")
        if self.immutable and self.monotone:
            raise ValueError(f"Feature '{self.name}' cannot be both immutable and monotone")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Self:
        if "name" not in data or "kind" not in data:
            raise ValueError(f"Feature entry needs 'name' and 'kind': {data}")
        order = data.get("order")
        return cls(
            name=str(data["name"]),
            kind=str(data["kind"]),
            order=tuple(str(v) for v in order) if order is not None else None,
            immutable=bool(data.get("immutable", False)),
            monotone=bool(data.get("monotone", False)),
        )

    def to_dict(self) -> Dict[str, Any]:
        out = {"name": self.name, "kind": self.kind}
        if self.order is not None:
            out["order"] = list(self.order)
        if self.immutable:
            out["immutable"] = True
        if self.monotone:
            out["monotone"] = True
        return out


@dataclass(frozen=True)
class CausalRule:
    """``effect`` may only increase if ``cause`` increases too."""

    effect: str
    cause: str


@dataclass(frozen=True)
class Schema:
    """Feature list, causal rules and label definition of one dataset."""

    features: Tuple[FeatureSpec, ...]
    causal_rules: Tuple[CausalRule, ...] = ()
    target: Optional[str] = None
    positive_label: Any = 1

    def __post_init__(self):
        names = [f.name for f in self.features]
        if not names:
            raise ValueError("Schema declares no features")
        if len(set(names)) != len(names):
            raise ValueError("Schema declares duplicate feature names")
        for rule in self.causal_rules:
            for role, name in (("effect", rule.effect), ("cause", rule.cause)):
                if name not in names:
                    raise ValueError(f"Causal rule {role} '{name}' is not a schema feature")
            if rule.effect == rule.cause:
                raise ValueError(f"Causal rule on '{rule.effect}' references itself")

    @property
    def names(self) -> List[str]:
        return [f.name for f in self.features]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ValueError(f"Unknown feature: {name}") from None

    def needs_order(self, name: str) -> bool:
        """True when the feature takes part in a monotone or causal constraint."""
        spec = self.features[self.index(name)]
        if spec.monotone:
            return True
        return any(name in (r.effect, r.cause) for r in self.causal_rules)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Self:
        if "features" not in data:
            raise ValueError("Missing required field: features")
        rules = tuple(
            CausalRule(effect=str(r["effect"]), cause=str(r["cause"]))
            for r in data.get("causal_rules", [])
        )
        return cls(
            features=tuple(FeatureSpec.from_dict(f) for f in data["features"]),
            causal_rules=rules,
            target=data.get("target"),
            positive_label=data.get("positive_label", 1),
        )

    @classmethod
    def load(cls, path) -> Self:
        """Load a JSON schema file."""
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError:
            logger.error(f"Error: schema file {path} not found")
            raise
        return cls.from_dict(data)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "target": self.target,
            "positive_label": self.positive_label,
            "features": [f.to_dict() for f in self.features],
            "causal_rules": [{"effect": r.effect, "cause": r.cause} for r in self.causal_rules],
        }


@dataclass(frozen=True)
class FeatureDomain:
    """Training-time domain of one feature and its code mapping."""

    name: str
    kind: str
    categories: Tuple[str, ...] = ()
    values: Tuple[float, ...] = ()
    edges: Tuple[float, ...] = ()
    representatives: Tuple[Any, ...] = ()
    fallback_code: int = 0

    @property
    def cardinality(self) -> int:
        if self.kind in CATEGORICAL_KINDS:
            return len(self.categories)
        if self.kind == DISCRETE_NUMERIC:
            return len(self.values)
        return len(self.edges) + 1

    @property
    def ordered(self) -> bool:
        return self.kind != UNORDERED_CATEGORICAL

    @property
    def reserved_code(self) -> Optional[int]:
        """Code of the unknown-value token, if this domain carries one."""
        if self.kind == UNORDERED_CATEGORICAL and self.categories[-1:] == (UNKNOWN_TOKEN,):
            return len(self.categories) - 1
        return None

    def encode(self, column: pd.Series) -> Tuple[np.ndarray, np.ndarray]:
        """Map raw values to codes.

        Returns:
            ``(codes, in_domain)``; fallback mappings are flagged as out of domain
        """
        if self.kind in CATEGORICAL_KINDS:
            text = _as_text(column)
            lookup = {c: i for i, c in enumerate(self.categories)}
            known = text.map(lookup)
            codes = known.fillna(self.fallback_code).to_numpy().astype(np.int64)
            in_domain = known.notna().to_numpy()
            if self.reserved_code is not None:
                in_domain &= codes != self.reserved_code
            return codes, in_domain

        raw = pd.to_numeric(column, errors="coerce").to_numpy(dtype=float)
        finite = np.isfinite(raw)
        if self.kind == DISCRETE_NUMERIC:
            values = np.asarray(self.values, dtype=float)
            codes = _nearest_index(values, raw)
            exact = np.zeros(len(raw), dtype=bool)
            exact[finite] = values[codes[finite]] == raw[finite]
            codes[np.isnan(raw)] = self.fallback_code
            return codes, exact

        codes = np.searchsorted(np.asarray(self.edges, dtype=float), raw, side="left")
        codes[np.isnan(raw)] = self.fallback_code
        return codes.astype(np.int64), finite

    def describe(self, code: int) -> str:
        """Human-readable value (category, discrete value or bin interval) of a code."""
        if not 0 <= code < self.cardinality:
            raise ValueError(f"Feature '{self.name}': code {code} out of range")
        if self.kind in CATEGORICAL_KINDS:
            return self.categories[code]
        if self.kind == DISCRETE_NUMERIC:
            return f"{self.values[code]:g}"
        low = "-inf" if code == 0 else f"{self.edges[code - 1]:g}"
        high = "inf" if code == len(self.edges) else f"{self.edges[code]:g}"
        return f"({low}, {high}]"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind,
            "categories": list(self.categories),
            "values": [float(v) for v in self.values],
            "edges": [float(v) for v in self.edges],
            "representatives": [
                v if isinstance(v, str) else float(v) for v in self.representatives
            ],
            "fallback_code": int(self.fallback_code),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Self:
        return cls(
            name=data["name"],
            kind=data["kind"],
            categories=tuple(data.get("categories", ())),
            values=tuple(float(v) for v in data.get("values", ())),
            edges=tuple(float(v) for v in data.get("edges", ())),
            representatives=tuple(data.get("representatives", ())),
            fallback_code=int(data.get("fallback_code", 0)),
        )


@dataclass(frozen=True)
class DomainDiagnostics:
    """Bin coverage and bin fidelity of a raw table under a fitted discretizer."""

    coverage: float
    fidelity: float
    n_rows: int
    out_of_domain_counts: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "coverage": self.coverage,
            "fidelity": self.fidelity,
            "n_rows": self.n_rows,
            "per_feature_out_of_domain_counts": dict(self.out_of_domain_counts),
        }


class Discretizer:
    """Per-feature domains fitted on a training split; immutable after fit."""

    def __init__(self, domains: Sequence[FeatureDomain]):
        self.domains = tuple(domains)
        for domain in self.domains:
            if domain.cardinality < 1:
                raise ValueError(f"Feature '{domain.name}' has no categories")

    @property
    def names(self) -> List[str]:
        return [d.name for d in self.domains]

    @property
    def cardinalities(self) -> Tuple[int, ...]:
        return tuple(d.cardinality for d in self.domains)

    @property
    def ordered(self) -> Tuple[bool, ...]:
        return tuple(d.ordered for d in self.domains)

    @property
    def reserved(self) -> Tuple[Tuple[int, int], ...]:
        """``(feature, code)`` pairs of the unknown-value tokens."""
        return tuple(
            (j, d.reserved_code) for j, d in enumerate(self.domains) if d.reserved_code is not None
        )

    def transform(self, table: pd.DataFrame, return_flags: bool = False):
        """Encode a raw table into an ``(N, D)`` integer code matrix.

        Args:
            table: Raw table holding every discretized column
            return_flags: Also return the ``(N, D)`` in-domain indicator matrix

        Returns:
            Codes, or ``(codes, in_domain)`` when ``return_flags`` is set
        """
        _check_columns(table, self.names)
        codes = np.zeros((len(table), len(self.domains)), dtype=np.int64)
        in_domain = np.zeros((len(table), len(self.domains)), dtype=bool)
        for j, domain in enumerate(self.domains):
            codes[:, j], in_domain[:, j] = domain.encode(table[domain.name])
        outside = int((~in_domain).sum())
        if outside:
            logger.warning(f"{outside} raw values fell outside the fitted domains")
        if return_flags:
            return codes, in_domain
        return codes

    def representative(self, j: int, code: int):
        """Raw value standing for ``code`` of feature ``j``."""
        domain = self.domains[j]
        if not 0 <= code < domain.cardinality:
            raise ValueError(f"Feature '{domain.name}': code {code} out of range")
        return domain.representatives[code]

    def describe(self, j: int, code: int) -> str:
        return self.domains[j].describe(code)

    def inverse_transform(self, codes: np.ndarray) -> pd.DataFrame:
        """Replace codes with their raw representatives."""
        codes = np.atleast_2d(codes)
        columns = {
            d.name: [self.representative(j, int(c)) for c in codes[:, j]]
            for j, d in enumerate(self.domains)
        }
        return pd.DataFrame(columns)

    def to_dict(self) -> Dict[str, Any]:
        return {"version": FORMAT_VERSION, "domains": [d.to_dict() for d in self.domains]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Self:
        if data.get("version") != FORMAT_VERSION:
            raise ValueError(f"Unsupported discretizer format version: {data.get('version')}")
        return cls([FeatureDomain.from_dict(d) for d in data["domains"]])

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path

    @classmethod
    def load(cls, path) -> Self:
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def fit_discretizer(
    train_table: pd.DataFrame,
    schema: Schema,
    bins_per_numeric: int = 10,
    discrete_threshold: int = 25,
) -> Discretizer:
    """Fit per-feature domains on the training split.

    Args:
        train_table: Raw training features
        schema: Declared feature kinds and constraint roles
        bins_per_numeric: Equal-mass quantile bins for binned numeric features
        discrete_threshold: Numeric features with at most this many unique
            training values are treated as discrete numeric

    Returns:
        The fitted discretizer
    """
    if bins_per_numeric < 2:
        raise ValueError(f"bins_per_numeric must be at least 2, got {bins_per_numeric}")
    _check_columns(train_table, schema.names)
    if len(train_table) == 0:
        raise ValueError("Cannot fit a discretizer on an empty table")

    domains = []
    for spec in schema.features:
        column = train_table[spec.name]
        if column.isna().all():
            raise ValueError(f"Feature '{spec.name}' has no observed values")
        domain = _fit_feature(
            spec, column, schema.needs_order(spec.name), bins_per_numeric, discrete_threshold
        )
        logger.debug(f"Feature '{spec.name}': {domain.kind} with {domain.cardinality} categories")
        domains.append(domain)
    return Discretizer(domains)


def transform(disc: Discretizer, table: pd.DataFrame) -> np.ndarray:
    """Encode a raw table with a fitted discretizer."""
    return disc.transform(table)


def bin_diagnostics(disc: Discretizer, raw_test: pd.DataFrame) -> DomainDiagnostics:
    """Bin coverage (mean in-domain indicator) and bin fidelity (rows fully in domain)."""
    if len(raw_test) == 0:
        raise ValueError("Cannot compute bin diagnostics on an empty table")
    _, in_domain = disc.transform(raw_test, return_flags=True)
    counts = {name: int((~in_domain[:, j]).sum()) for j, name in enumerate(disc.names)}
    return DomainDiagnostics(
        coverage=float(in_domain.mean()),
        fidelity=float(in_domain.all(axis=1).mean()),
        n_rows=len(raw_test),
        out_of_domain_counts=counts,
    )


def one_hot(x: Sequence[int], cards: Sequence[int]) -> np.ndarray:
    """Concatenated one-hot encoding of a single coded instance."""
    return one_hot_batch(np.asarray(x, dtype=np.int64)[None, :], cards)[0]


def one_hot_batch(codes: np.ndarray, cards: Sequence[int]) -> np.ndarray:
    """Concatenated one-hot encoding of an ``(N, D)`` code matrix."""
    codes = np.atleast_2d(np.asarray(codes, dtype=np.int64))
    cards = np.asarray(cards, dtype=np.int64)
    if codes.shape[1] != len(cards):
        raise ValueError(f"Expected {len(cards)} features, got {codes.shape[1]}")
    bad = (codes < 0) | (codes >= cards[None, :])
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ValueError(
            f"Code {codes[row, col]} out of range for feature {col} (cardinality {cards[col]})"
        )
    offsets = np.concatenate([[0], np.cumsum(cards)[:-1]])
    out = np.zeros((codes.shape[0], int(cards.sum())))
    out[np.arange(codes.shape[0])[:, None], offsets[None, :] + codes] = 1.0
    return out


def split_blocks(vector: np.ndarray, cards: Sequence[int]) -> List[np.ndarray]:
    """Split the last axis of a concatenated encoding into per-feature blocks."""
    bounds = np.cumsum(cards)[:-1]
    return np.split(vector, bounds, axis=-1)


def load_table(csv_path, schema: Schema) -> Tuple[pd.DataFrame, np.ndarray]:
    """Read a raw CSV and split it into schema features and binary labels.

    Args:
        csv_path: CSV file with a header row
        schema: Schema naming the features, the target and its positive label

    Returns:
        ``(features, labels)`` with labels in ``{0, 1}``
    """
    if schema.target is None:
        raise ValueError("Schema has no target column")
    dtypes = {f.name: str for f in schema.features if f.kind in CATEGORICAL_KINDS}
    dtypes[schema.target] = str
    try:
        table = pd.read_csv(csv_path, dtype=dtypes, skipinitialspace=True)
    except FileNotFoundError:
        logger.error(f"Error: dataset {csv_path} not found")
        raise
    _check_columns(table, schema.names + [schema.target])
    labels = (table[schema.target].str.strip() == str(schema.positive_label)).to_numpy()
    logger.info(
        f"Loaded {len(table)} rows from {csv_path} ({labels.mean():.1%} positive)"
    )
    return table[schema.names].reset_index(drop=True), labels.astype(np.int64)


def _fit_feature(
    spec: FeatureSpec,
    column: pd.Series,
    needs_order: bool,
    bins: int,
    discrete_threshold: int,
) -> FeatureDomain:
    kind = spec.kind
    if kind == UNORDERED_CATEGORICAL and needs_order:
        # constrained features need a meaningful order; coerce or halt
        if _coerce_numeric(column) is None:
            raise ValueError(
                f"Feature '{spec.name}' takes part in a monotone or causal constraint "
                "but has no ordering and is not numerically coercible"
            )
        logger.warning(f"Feature '{spec.name}' coerced to numeric to obtain an ordering")
        kind = NUMERIC
        column = pd.to_numeric(column)

    if kind in CATEGORICAL_KINDS:
        return _fit_categorical(spec, column, kind, needs_order)

    numeric = pd.to_numeric(column, errors="coerce").to_numpy(dtype=float)
    numeric = numeric[np.isfinite(numeric)]
    if numeric.size == 0:
        raise ValueError(f"Feature '{spec.name}' has no finite numeric values")
    unique = np.unique(numeric)
    if kind == NUMERIC:
        kind = DISCRETE_NUMERIC if unique.size <= discrete_threshold else BINNED_NUMERIC
    if kind == DISCRETE_NUMERIC:
        return _discrete_domain(spec.name, numeric, unique)

    # lower quantiles are observed values, so every bin below holds data
    probs = np.linspace(0.0, 1.0, bins + 1)[1:-1]
    edges = np.unique(np.quantile(numeric, probs, method="lower"))
    edges = edges[edges < numeric.max()]
    if edges.size == 0:
        logger.warning(
            f"Feature '{spec.name}': quantile binning degenerated, using discrete values"
        )
        return _discrete_domain(spec.name, numeric, unique)
    codes = np.searchsorted(edges, numeric, side="left")
    representatives = tuple(float(np.median(numeric[codes == k])) for k in range(edges.size + 1))
    return FeatureDomain(
        name=spec.name,
        kind=BINNED_NUMERIC,
        edges=tuple(float(e) for e in edges),
        representatives=representatives,
        fallback_code=int(np.searchsorted(edges, np.median(numeric), side="left")),
    )


def _fit_categorical(
    spec: FeatureSpec, column: pd.Series, kind: str, needs_order: bool
) -> FeatureDomain:
    text = _as_text(column).dropna()
    text = text[text != UNKNOWN_TOKEN]
    if text.empty:
        raise ValueError(f"Feature '{spec.name}' has no observed values")
    observed = sorted(text.unique())
    if kind == ORDERED_CATEGORICAL and spec.order is not None:
        categories = tuple(spec.order)
        stray = sorted(set(observed) - set(categories))
        if stray:
            raise ValueError(f"Feature '{spec.name}': values {stray} missing from declared ordering")
    elif kind == ORDERED_CATEGORICAL:
        numeric = _coerce_numeric(text)
        if numeric is None:
            raise ValueError(
                f"Feature '{spec.name}' is ordered but declares no ordering and "
                "is not numerically coercible"
            )
        categories = tuple(sorted(observed, key=lambda v: float(v)))
    else:
        categories = tuple(observed) + (UNKNOWN_TOKEN,)
        return FeatureDomain(
            name=spec.name,
            kind=kind,
            categories=categories,
            representatives=categories,
            fallback_code=len(categories) - 1,
        )
    counts = text.value_counts()
    mode = max(categories, key=lambda c: (counts.get(c, 0), -categories.index(c)))
    return FeatureDomain(
        name=spec.name,
        kind=kind,
        categories=categories,
        representatives=categories,
        fallback_code=categories.index(mode),
    )


def _discrete_domain(name: str, numeric: np.ndarray, unique: np.ndarray) -> FeatureDomain:
    median_code = int(_nearest_index(unique, np.array([np.median(numeric)]))[0])
    return FeatureDomain(
        name=name,
        kind=DISCRETE_NUMERIC,
        values=tuple(float(v) for v in unique),
        representatives=tuple(float(v) for v in unique),
        fallback_code=median_code,
    )


def _nearest_index(values: np.ndarray, raw: np.ndarray) -> np.ndarray:
    """Index of the closest entry of sorted ``values``; ties go to the lower value."""
    pos = np.searchsorted(values, raw, side="left")
    pos = np.clip(pos, 0, len(values) - 1)
    lower = np.clip(pos - 1, 0, len(values) - 1)
    with np.errstate(invalid="ignore"):
        take_lower = np.abs(raw - values[lower]) <= np.abs(values[pos] - raw)
    take_lower |= np.isneginf(raw)
    out = np.where(take_lower, lower, pos)
    out[np.isposinf(raw)] = len(values) - 1
    return out.astype(np.int64)


def _as_text(column: pd.Series) -> pd.Series:
    present = column.notna()
    text = column.astype(str).str.strip()
    return text.where(present, None)


def _coerce_numeric(column: pd.Series) -> Optional[pd.Series]:
    present = column.dropna()
    numeric = pd.to_numeric(present, errors="coerce")
    if numeric.isna().any() or not np.isfinite(numeric.to_numpy(dtype=float)).all():
        return None
    return numeric


def _check_columns(table: pd.DataFrame, names: Sequence[str]) -> None:
    missing = [n for n in names if n not in table.columns]
    if missing:
        raise ValueError(f"Missing required columns: {missing}")
