"""Amortized recourse generation.

A generator network maps each denied factual to masked logits over the
mutable features. The resulting soft recourse is trained against the
classifier and the two class-conditional circuits, then decoded to a hard
counterfactual that satisfies every hard constraint by construction.
"""

import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit, softmax
from typing_extensions import Self

from pcrecourse.circuit import Circuit, SoftInstance
from pcrecourse.components import defaults
from pcrecourse.constraints import NEG, ConstraintSet, JointComponent
from pcrecourse.data import one_hot_batch, split_blocks
from pcrecourse.neural import (
    IDENTITY,
    RELU,
    AdamState,
    MlpModel,
    adam_step,
    load_model,
    predict_proba,
    save_model,
)
from pcrecourse.utils.logger import logger

PROB_FLOOR = 1e-300
TERMS = ("validity", "proximity", "plaus_pos", "plaus_neg", "sparsity", "entropy")


class PoolExhaustedError(RuntimeError):
    """Raised when rejection sampling cannot collect enough instances."""

    def __init__(self, what: str, collected: int, target: int, draws: int):
        rate = collected / draws if draws else 0.0
        super().__init__(
            f"Collected only {collected}/{target} {what} after {draws} draws "
            f"(acceptance rate {rate:.4%})"
        )
        self.collected = collected
        self.target = target
        self.draws = draws
        self.acceptance_rate = rate


@dataclass(frozen=True)
class NeighborhoodPool:
    """Accepted instances sampled from ``p+`` with their log-likelihoods."""

    members: np.ndarray
    log_p_plus: np.ndarray
    draws: int = 0

    @property
    def size(self) -> int:
        return self.members.shape[0]

    @property
    def acceptance_rate(self) -> float:
        return self.size / self.draws if self.draws else 1.0

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "wb") as f:
            np.savez(f, members=self.members, log_p_plus=self.log_p_plus, draws=np.array(self.draws))
        return path

    @classmethod
    def load(cls, path) -> Self:
        with np.load(Path(path), allow_pickle=False) as data:
            return cls(data["members"].copy(), data["log_p_plus"].copy(), int(data["draws"]))


def sample_filtered(
    circuit: Circuit,
    classifier: MlpModel,
    tau: float,
    n: int,
    max_draws: int,
    rng: np.random.Generator,
    accepted: bool = True,
    draw_batch: int = defaults.POOL["draw_batch"],
) -> Tuple[np.ndarray, int]:
    """Rejection-sample ``n`` instances the classifier accepts (or denies).

    Returns:
        ``(instances, draws)``; instances keep their draw order
    """
    kept: List[np.ndarray] = []
    count, draws = 0, 0
    while count < n and draws < max_draws:
        size = min(draw_batch, max_draws - draws)
        batch = circuit.sample(rng, size)
        draws += size
        scores = predict_proba(classifier, one_hot_batch(batch, circuit.cardinalities))
        keep = scores >= tau if accepted else scores < tau
        kept.append(batch[keep])
        count += int(keep.sum())
    if count < n:
        what = "accepted instances" if accepted else "denied surrogates"
        error = PoolExhaustedError(what, count, n, draws)
        logger.error(str(error))
        raise error
    return np.concatenate(kept)[:n], draws


def build_pool(
    p_plus: Circuit,
    classifier: MlpModel,
    tau: float,
    target_size: int,
    max_draws: int,
    rng: np.random.Generator,
    draw_batch: int = defaults.POOL["draw_batch"],
) -> NeighborhoodPool:
    """Sample ``p+`` and keep the first ``target_size`` instances with ``f(x) >= tau``."""
    members, draws = sample_filtered(
        p_plus, classifier, tau, target_size, max_draws, rng, accepted=True, draw_batch=draw_batch
    )
    pool = NeighborhoodPool(members, p_plus.log_likelihood(members), draws)
    logger.info(
        f"Built neighborhood pool of {pool.size} instances from {draws} draws "
        f"(acceptance {pool.acceptance_rate:.1%})"
    )
    return pool


@dataclass
class EncoderCache:
    tape_psi: Any
    tape_rho: Any
    k: int


class NeighborhoodEncoder:
    """Set encoder over the K Hamming-nearest pool members.

    Each neighbor is described by ``(distance, log p+)``; descriptors pass
    through the shared network ``psi``, are mean-pooled, and are projected by
    ``rho``.
    """

    def __init__(self, psi: MlpModel, rho: MlpModel, k: int = defaults.ENCODER["k"]):
        if psi.input_dim != 2 or rho.input_dim != psi.output_dim:
            raise ValueError("psi must take 2-d descriptors and feed rho")
        self.psi = psi
        self.rho = rho
        self.k = int(k)

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        k: int = defaults.ENCODER["k"],
        psi_hidden: Sequence[int] = tuple(defaults.ENCODER["psi_hidden"]),
        embed_dim: int = defaults.ENCODER["embed_dim"],
    ) -> Self:
        psi = MlpModel.init([2, *psi_hidden], [RELU] * len(psi_hidden), rng)
        rho = MlpModel.init([psi_hidden[-1], embed_dim], [IDENTITY], rng)
        return cls(psi, rho, k)

    @property
    def embed_dim(self) -> int:
        return self.rho.output_dim

    def descriptors(self, factuals: np.ndarray, pool: NeighborhoodPool) -> np.ndarray:
        """``(N, K, 2)`` descriptors of the K nearest pool members, ties by pool index."""
        if pool.size < self.k:
            raise ValueError(f"Pool has {pool.size} members, fewer than K={self.k}")
        x = np.atleast_2d(factuals)
        dist = (x[:, None, :] != pool.members[None, :, :]).sum(axis=2)
        nearest = np.argsort(dist, axis=1, kind="stable")[:, : self.k]
        d = np.take_along_axis(dist, nearest, axis=1).astype(float)
        return np.stack([d, pool.log_p_plus[nearest]], axis=2)

    def encode(self, factuals: np.ndarray, pool: NeighborhoodPool) -> Tuple[np.ndarray, EncoderCache]:
        return self.encode_descriptors(self.descriptors(factuals, pool))

    def encode_descriptors(self, u: np.ndarray) -> Tuple[np.ndarray, EncoderCache]:
        n, k, _ = u.shape
        embedded, tape_psi = self.psi.forward(u.reshape(n * k, 2))
        pooled = embedded.reshape(n, k, -1).mean(axis=1)
        h, tape_rho = self.rho.forward(pooled)
        return h, EncoderCache(tape_psi, tape_rho, k)

    def backward(self, cache: EncoderCache, dh: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        rho_grads, dpooled = self.rho.backward(cache.tape_rho, dh)
        dembedded = np.repeat(dpooled / cache.k, cache.k, axis=0)
        psi_grads, _ = self.psi.backward(cache.tape_psi, dembedded)
        return psi_grads, rho_grads


def encode_neighborhood(
    psi: MlpModel, rho: MlpModel, factual: np.ndarray, pool: NeighborhoodPool, k: int
) -> np.ndarray:
    """Neighborhood embedding ``h`` of one factual (or a batch)."""
    h, _ = NeighborhoodEncoder(psi, rho, k).encode(factual, pool)
    return h[0] if np.ndim(factual) == 1 else h


@dataclass(frozen=True)
class GeneratorInput:
    """``z = [one-hot immutables, log p+(x), h]``, batched."""

    immutable_one_hot: np.ndarray
    log_p_plus: np.ndarray
    embedding: np.ndarray

    @classmethod
    def build(
        cls, factuals: np.ndarray, cs: ConstraintSet, p_plus: Circuit, embedding: np.ndarray
    ) -> Self:
        x = np.atleast_2d(factuals)
        immutable = sorted(cs.immutable)
        if immutable:
            one_hot = one_hot_batch(x[:, immutable], [cs.cardinalities[j] for j in immutable])
        else:
            one_hot = np.zeros((x.shape[0], 0))
        return cls(one_hot, np.atleast_1d(p_plus.log_likelihood(x)), np.atleast_2d(embedding))

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.immutable_one_hot, self.log_p_plus[:, None], self.embedding], axis=1)

    @staticmethod
    def dim(cs: ConstraintSet, embed_dim: int) -> int:
        return sum(cs.cardinalities[j] for j in cs.immutable) + 1 + embed_dim


@dataclass(frozen=True)
class SoftRecourse:
    """Soft counterfactuals for a batch of factuals.

    Immutable blocks are one-hot at the factual; mutable blocks come from the
    masked softmax (or the joint softmax of a causal group).
    """

    soft: SoftInstance
    factual: np.ndarray
    mutable: Tuple[int, ...]
    allowed: Dict[int, np.ndarray]
    singles: Tuple[int, ...]
    joints: Tuple[Tuple[JointComponent, np.ndarray, np.ndarray], ...] = ()

    @classmethod
    def from_logits(cls, logits: np.ndarray, factuals: np.ndarray, cs: ConstraintSet) -> Self:
        """Mask, normalize and clamp raw generator logits ``(N, sum of mutable C_j)``."""
        x = np.atleast_2d(factuals)
        logits = np.atleast_2d(logits)
        n = x.shape[0]
        expected = sum(cs.cardinalities[j] for j in cs.mutable)
        if logits.shape != (n, expected):
            raise ValueError(f"Expected logits of shape {(n, expected)}, got {logits.shape}")

        clamped = set(cs.clamped)
        reserved = dict(cs.reserved)
        allowed, masked, offset = {}, {}, 0
        for j in cs.mutable:
            card = cs.cardinalities[j]
            codes = np.arange(card)[None, :]
            allow = np.ones((n, card), dtype=bool)
            if j in cs.monotone:
                allow &= codes >= x[:, j][:, None]
            if j in clamped:
                allow &= codes <= x[:, j][:, None]
            if j in reserved:
                # the unknown token is never a target, only a starting point
                allow &= (codes != reserved[j]) | (x[:, j] == reserved[j])[:, None]
            allowed[j] = allow
            masked[j] = np.where(allow, logits[:, offset:offset + card], NEG)
            offset += card

        blocks: List[Optional[np.ndarray]] = [None] * cs.num_features
        for j in cs.immutable:
            block = np.zeros((n, cs.cardinalities[j]))
            block[np.arange(n), x[:, j]] = 1.0
            blocks[j] = block
        joints, grouped = [], set()
        for group in cs.joint_groups():
            component = JointComponent.for_group(cs, group)
            probs, marginals, mask = component.forward(
                [masked[j] for j in group], x[:, list(group)], [allowed[j] for j in group]
            )
            for j, marginal in zip(group, marginals):
                blocks[j] = marginal
            joints.append((component, probs, mask))
            grouped.update(group)
        singles = tuple(j for j in cs.mutable if j not in grouped)
        for j in singles:
            blocks[j] = softmax(masked[j], axis=1)
        return cls(SoftInstance(tuple(blocks)), x, tuple(cs.mutable), allowed, singles, tuple(joints))

    @property
    def blocks(self) -> Tuple[np.ndarray, ...]:
        return self.soft.blocks

    @property
    def batch_size(self) -> int:
        return self.factual.shape[0]

    def factual_probs(self) -> np.ndarray:
        """``q_j(x_j)`` for every mutable feature, shape ``(N, |M|)``."""
        rows = np.arange(self.batch_size)
        return np.stack([self.blocks[j][rows, self.factual[:, j]] for j in self.mutable], axis=1)

    def change_probs(self) -> np.ndarray:
        """``pi_j = 1 - q_j(x_j)`` over mutable features."""
        return 1.0 - self.factual_probs()

    def backward(self, block_grads: Sequence[np.ndarray]) -> np.ndarray:
        """Gradient of the raw generator logits from gradients of the mutable blocks."""
        out: Dict[int, np.ndarray] = {}
        for j in self.singles:
            q, g = self.blocks[j], block_grads[j]
            dl = q * (g - (q * g).sum(axis=1, keepdims=True))
            out[j] = np.where(self.allowed[j], dl, 0.0)
        for component, probs, mask in self.joints:
            grads = component.backward(probs, mask, [block_grads[j] for j in component.features])
            for j, dl in zip(component.features, grads):
                out[j] = np.where(self.allowed[j], dl, 0.0)
        return np.concatenate([out[j] for j in self.mutable], axis=1)


def generate_soft(
    generator: MlpModel, z, factuals: np.ndarray, cs: ConstraintSet
) -> SoftRecourse:
    """Run the generator on ``z`` and turn its logits into a soft recourse."""
    vector = z.vector if isinstance(z, GeneratorInput) else np.atleast_2d(z)
    return SoftRecourse.from_logits(generator.predict(vector), factuals, cs)


def decode(q: SoftRecourse, cs: ConstraintSet) -> np.ndarray:
    """Hard counterfactuals: argmax per free feature, legal joint argmax per causal group."""
    out = q.factual.copy()
    for j in q.singles:
        out[:, j] = np.argmax(np.where(q.allowed[j], q.blocks[j], -1.0), axis=1)
    for component, probs, mask in q.joints:
        out[:, list(component.features)] = component.decode(probs, mask)
    return out


@dataclass(frozen=True)
class LossWeights:
    """Objective weights and per-term switches."""

    lambda_val: float = defaults.LOSS_WEIGHTS["lambda_val"]
    lambda_ppt: float = defaults.LOSS_WEIGHTS["lambda_ppt"]
    alpha: float = defaults.LOSS_WEIGHTS["alpha"]
    lambda_pos: float = defaults.LOSS_WEIGHTS["lambda_pos"]
    lambda_neg: float = defaults.LOSS_WEIGHTS["lambda_neg"]
    lambda_sparse: float = defaults.LOSS_WEIGHTS["lambda_sparse"]
    lambda_ent: float = defaults.LOSS_WEIGHTS["lambda_ent"]
    budget: float = defaults.LOSS_WEIGHTS["budget"]
    proximity: bool = True
    plaus_pos: bool = True
    plaus_neg: bool = True
    sparsity: bool = True
    validity: bool = True
    entropy: bool = True
    ppt_block: bool = True

    def __post_init__(self):
        for name in ("lambda_val", "lambda_ppt", "lambda_pos", "lambda_neg", "lambda_sparse", "lambda_ent", "budget"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")

    @classmethod
    def from_config(cls, section: Dict[str, Any]) -> Self:
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in section.items() if k in known})

    def coefficients(self) -> Dict[str, float]:
        """Effective multiplier of every term in the total loss; disabled terms get 0."""
        ppt = self.lambda_ppt if self.ppt_block else 0.0
        return {
            "validity": self.lambda_val if self.validity else 0.0,
            "proximity": ppt * self.alpha if self.proximity else 0.0,
            "plaus_pos": ppt * (1 - self.alpha) * self.lambda_pos if self.plaus_pos else 0.0,
            "plaus_neg": ppt * (1 - self.alpha) * self.lambda_neg if self.plaus_neg else 0.0,
            "sparsity": self.lambda_sparse if self.sparsity else 0.0,
            "entropy": self.lambda_ent if self.entropy else 0.0,
        }


@dataclass(frozen=True)
class LossResult:
    """Batch-mean total, per-term means and the gradient of the total w.r.t. raw logits."""

    total: float
    terms: Dict[str, float]
    grad_logits: np.ndarray


def compute_losses(
    q: SoftRecourse,
    classifier: MlpModel,
    p_plus: Circuit,
    p_minus: Circuit,
    weights: LossWeights,
    neg_grad_clip: Optional[float] = defaults.GENERATOR["neg_grad_clip"],
) -> LossResult:
    """Evaluate the recourse objective and backpropagate it to the generator logits."""
    n = q.batch_size
    coef = weights.coefficients()
    mutable = list(q.mutable)
    rows = np.arange(n)
    grads = [np.zeros_like(b) for b in q.blocks]

    def add(term: str, block_grads: Sequence[np.ndarray]):
        if coef[term] == 0.0:
            return
        for j in mutable:
            grads[j] += coef[term] * block_grads[j] / n

    # validity: BCE of f(q) against the accepted label
    x_soft = np.concatenate(q.blocks, axis=1)
    _, tape = classifier.forward(x_soft)
    z = tape.pre_activations[-1][:, 0]
    validity = np.logaddexp(0.0, -z)
    if coef["validity"]:
        _, dx = classifier.backward(tape, (expit(z) - 1.0)[:, None], from_logits=True)
        add("validity", split_blocks(dx, p_plus.cardinalities))

    # proximity: squared hinge on the expected number of changes
    excess = np.maximum(0.0, q.change_probs().sum(axis=1) - weights.budget)
    proximity = excess**2
    prox_grads = [np.zeros_like(b) for b in q.blocks]
    for j in mutable:
        prox_grads[j][rows, q.factual[:, j]] = -2.0 * excess
    add("proximity", prox_grads)

    # plausibility under both circuits
    log_pos, pos_grads = p_plus.soft_gradient(q.soft)
    add("plaus_pos", [-g for g in pos_grads])
    log_neg, neg_grads = p_minus.soft_gradient(q.soft)
    if neg_grad_clip is not None:
        norms = np.sqrt(sum((neg_grads[j] ** 2).sum(axis=1) for j in mutable))
        scale = np.minimum(1.0, neg_grad_clip / np.maximum(norms, PROB_FLOOR))
        neg_grads = [g * scale[:, None] for g in neg_grads]
    add("plaus_neg", neg_grads)

    # sparsity and entropy over mutable blocks
    m = max(len(mutable), 1)
    stay = np.maximum(q.factual_probs(), PROB_FLOOR)
    sparsity = -np.log(stay).sum(axis=1) / m
    sparse_grads = [np.zeros_like(b) for b in q.blocks]
    for i, j in enumerate(mutable):
        sparse_grads[j][rows, q.factual[:, j]] = -1.0 / (m * stay[:, i])
    add("sparsity", sparse_grads)

    entropy = np.zeros(n)
    ent_grads = [np.zeros_like(b) for b in q.blocks]
    for j in mutable:
        block = q.blocks[j]
        positive = block > 0
        logs = np.log(np.where(positive, block, 1.0))
        entropy -= (block * logs).sum(axis=1) / m
        ent_grads[j] = np.where(positive, -(logs + 1.0) / m, 0.0)
    add("entropy", ent_grads)

    per_term = {
        "validity": validity,
        "proximity": proximity,
        "plaus_pos": -log_pos,
        "plaus_neg": log_neg,
        "sparsity": sparsity,
        "entropy": entropy,
    }
    terms = {name: float(values.mean()) for name, values in per_term.items()}
    total = float(sum(coef[name] * terms[name] for name in TERMS))
    return LossResult(total, terms, q.backward(grads))


@dataclass
class TrainingHistory:
    """Per-epoch mean of every loss term and of the total."""

    epochs: List[Dict[str, float]] = field(default_factory=list)
    surrogate_draws: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {"epochs": list(self.epochs), "surrogate_draws": self.surrogate_draws}


class RecourseModel:
    """Frozen generator plus encoder, pool and constraints needed at inference."""

    def __init__(
        self,
        generator: MlpModel,
        encoder: NeighborhoodEncoder,
        pool: NeighborhoodPool,
        p_plus: Circuit,
        cs: ConstraintSet,
        use_neighborhood: bool = True,
    ):
        self.generator = generator
        self.encoder = encoder
        self.pool = pool
        self.p_plus = p_plus
        self.cs = cs
        self.use_neighborhood = use_neighborhood

    @classmethod
    def init(
        cls,
        pool: NeighborhoodPool,
        p_plus: Circuit,
        cs: ConstraintSet,
        rng: np.random.Generator,
        encoder_config: Optional[Dict[str, Any]] = None,
        hidden: Sequence[int] = tuple(defaults.GENERATOR["hidden"]),
    ) -> Self:
        enc = dict(defaults.ENCODER)
        enc.update(encoder_config or {})
        encoder = NeighborhoodEncoder.init(rng, enc["k"], enc["psi_hidden"], enc["embed_dim"])
        out_dim = sum(cs.cardinalities[j] for j in cs.mutable)
        dims = [GeneratorInput.dim(cs, encoder.embed_dim), *hidden, out_dim]
        generator = MlpModel.init(dims, [RELU] * len(hidden) + [IDENTITY], rng)
        return cls(generator, encoder, pool, p_plus, cs, enc["use_neighborhood"])

    def embedding(self, factuals: np.ndarray) -> Tuple[np.ndarray, Optional[EncoderCache]]:
        x = np.atleast_2d(factuals)
        if not self.use_neighborhood:
            return np.zeros((x.shape[0], self.encoder.embed_dim)), None
        return self.encoder.encode(x, self.pool)

    def inputs(self, factuals: np.ndarray, embedding: Optional[np.ndarray] = None) -> GeneratorInput:
        h = self.embedding(factuals)[0] if embedding is None else embedding
        return GeneratorInput.build(factuals, self.cs, self.p_plus, h)

    def soft(self, factuals: np.ndarray) -> SoftRecourse:
        x = np.atleast_2d(factuals)
        return generate_soft(self.generator, self.inputs(x), x, self.cs)

    def generate(self, factuals: np.ndarray) -> np.ndarray:
        """Decoded counterfactuals for a batch of factuals."""
        return decode(self.soft(factuals), self.cs)

    def generate_timed(self, factuals: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Decode one factual at a time; returns candidates and seconds per factual."""
        x = np.atleast_2d(factuals)
        out = np.empty_like(x)
        seconds = np.empty(x.shape[0])
        for i in range(x.shape[0]):
            start = time.perf_counter()
            out[i] = self.generate(x[i:i + 1])[0]
            seconds[i] = time.perf_counter() - start
        return out, seconds

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_model(self.generator, directory / "generator.npz", {"use_neighborhood": self.use_neighborhood})
        save_model(self.encoder.psi, directory / "psi.npz", {"k": self.encoder.k})
        save_model(self.encoder.rho, directory / "rho.npz")
        self.pool.save(directory / "pool.npz")
        return directory

    @classmethod
    def load(cls, directory, p_plus: Circuit, cs: ConstraintSet) -> Self:
        directory = Path(directory)
        generator, manifest = load_model(directory / "generator.npz")
        psi, psi_manifest = load_model(directory / "psi.npz")
        rho, _ = load_model(directory / "rho.npz")
        encoder = NeighborhoodEncoder(psi, rho, psi_manifest["k"])
        pool = NeighborhoodPool.load(directory / "pool.npz")
        return cls(generator, encoder, pool, p_plus, cs, manifest.get("use_neighborhood", True))


def train_generator(
    model: RecourseModel,
    p_minus: Circuit,
    classifier: MlpModel,
    tau: float,
    weights: LossWeights,
    rng: np.random.Generator,
    epochs: int = defaults.GENERATOR["epochs"],
    batch_size: int = defaults.GENERATOR["batch_size"],
    steps_per_epoch: int = defaults.GENERATOR["steps_per_epoch"],
    lr: float = defaults.GENERATOR["lr"],
    neg_grad_clip: Optional[float] = defaults.GENERATOR["neg_grad_clip"],
    max_draws: int = defaults.GENERATOR["max_draws"],
) -> TrainingHistory:
    """Jointly train the generator and encoder networks on denied surrogates.

    Surrogate factuals are drawn from ``p-`` and kept when the classifier
    denies them. Only the circuits, the classifier and the constraints are
    used; no training data is needed.

    Args:
        model: Generator, encoder and pool to train in place
        p_minus: Denied-class circuit
        classifier: Frozen classifier
        tau: Decision threshold
        weights: Objective weights and switches
        rng: Seeded stream for surrogate sampling
        epochs: Number of epochs
        batch_size: Surrogates per step
        steps_per_epoch: Adam steps per epoch
        lr: Adam learning rate
        neg_grad_clip: Per-instance norm cap on the ``p-`` gradient; None disables it
        max_draws: Draw cap per epoch when collecting surrogates

    Returns:
        Loss history per epoch
    """
    states = {
        "generator": AdamState.for_model(model.generator, lr),
        "psi": AdamState.for_model(model.encoder.psi, lr),
        "rho": AdamState.for_model(model.encoder.rho, lr),
    }
    history = TrainingHistory()
    for epoch in range(epochs):
        surrogates, draws = sample_filtered(
            p_minus, classifier, tau, batch_size * steps_per_epoch, max_draws, rng, accepted=False
        )
        history.surrogate_draws += draws
        sums = {name: 0.0 for name in (*TERMS, "total")}
        for step in range(steps_per_epoch):
            x = surrogates[step * batch_size:(step + 1) * batch_size]
            result = training_step(model, x, p_minus, classifier, weights, states, neg_grad_clip)
            for name, value in result.terms.items():
                sums[name] += value
            sums["total"] += result.total
        means = {name: value / steps_per_epoch for name, value in sums.items()}
        history.epochs.append(means)
        logger.info(
            f"Generator epoch {epoch + 1}/{epochs}: total {means['total']:.4f} "
            + " ".join(f"{name} {means[name]:.4f}" for name in TERMS)
        )
    return history


def training_step(
    model: RecourseModel,
    x: np.ndarray,
    p_minus: Circuit,
    classifier: MlpModel,
    weights: LossWeights,
    states: Dict[str, AdamState],
    neg_grad_clip: Optional[float] = defaults.GENERATOR["neg_grad_clip"],
) -> LossResult:
    """One Adam update of generator, ``psi`` and ``rho`` on a batch of factuals."""
    h, cache = model.embedding(x)
    z = GeneratorInput.build(x, model.cs, model.p_plus, h)
    logits, tape = model.generator.forward(z.vector)
    q = SoftRecourse.from_logits(logits, x, model.cs)
    result = compute_losses(q, classifier, model.p_plus, p_minus, weights, neg_grad_clip)
    gen_grads, dz = model.generator.backward(tape, result.grad_logits)
    adam_step(model.generator, states["generator"], gen_grads)
    if cache is not None:
        psi_grads, rho_grads = model.encoder.backward(cache, dz[:, -model.encoder.embed_dim:])
        adam_step(model.encoder.psi, states["psi"], psi_grads)
        adam_step(model.encoder.rho, states["rho"], rho_grads)
    return result


@dataclass(frozen=True)
class LogitChange:
    """How much the neighborhood embedding moves the generator logits."""

    relative_l1: float
    fraction_changed: float
    blockwise: Dict[int, float]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "relative_l1": self.relative_l1,
            "fraction_changed": self.fraction_changed,
            "blockwise_mean_abs_change": {str(j): v for j, v in self.blockwise.items()},
        }


def neighborhood_logit_change(
    model: RecourseModel,
    factuals: np.ndarray,
    threshold: float = defaults.EVALUATION["logit_change_threshold"],
) -> LogitChange:
    """Compare generator logits with the embedding ``h`` against ``h = 0``."""
    x = np.atleast_2d(factuals)
    h, _ = model.encoder.encode(x, model.pool)
    with_h = model.generator.predict(model.inputs(x, h).vector)
    without = model.generator.predict(model.inputs(x, np.zeros_like(h)).vector)
    delta = np.abs(with_h - without)
    base = np.abs(without).sum()
    blockwise, offset = {}, 0
    for j in model.cs.mutable:
        card = model.cs.cardinalities[j]
        blockwise[j] = float(delta[:, offset:offset + card].mean())
        offset += card
    return LogitChange(
        relative_l1=float(delta.sum() / base) if base > 0 else 0.0,
        fraction_changed=float((delta > threshold).mean()),
        blockwise=blockwise,
    )
