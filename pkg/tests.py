"""Tests for the pcrecourse project."""

import itertools
import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd
from docx import Document

from pcrecourse.__main__ import main
from pcrecourse.circuit import (
    CircuitBuilder,
    CircuitValidationError,
    SoftInstance,
    load_circuit,
    save_circuit,
    soft_gradient,
)
from pcrecourse.constraints import (
    NEG,
    ConstraintSet,
    JointComponent,
    apply_causal_clamp,
    apply_causal_joint,
    apply_monotone_mask,
    causal_rows,
    feasible,
    feasible_rows,
    mutable_hamming,
    within_budget,
)
from pcrecourse.components import styles
from pcrecourse.data import (
    UNKNOWN_TOKEN,
    Discretizer,
    FeatureDomain,
    Schema,
    bin_diagnostics,
    fit_discretizer,
    load_table,
    one_hot,
    one_hot_batch,
)
from pcrecourse.experiment import ExperimentRunner, ablate, make_folds, stage_seed
from pcrecourse.learnspn import leaf_params, learn_structure
from pcrecourse.metrics import (
    POST,
    PRE,
    MetricsReport,
    RecourseRecord,
    Summary,
    aggregate,
    mad_weights,
    metric_actionability_causality,
    metric_sparsity_time,
    metric_validity,
    similarity_distance,
    summarize,
)
from pcrecourse.neural import (
    IDENTITY,
    RELU,
    SCORE_EPS,
    SIGMOID,
    AdamState,
    DenseLayer,
    MlpModel,
    adam_step,
    fit_binary,
    load_model,
    predict_proba,
    save_model,
    select_threshold_youden,
    train_classifier,
)
from pcrecourse.recourse import (
    GeneratorInput,
    LossWeights,
    NeighborhoodEncoder,
    NeighborhoodPool,
    PoolExhaustedError,
    RecourseModel,
    SoftRecourse,
    build_pool,
    compute_losses,
    decode,
    encode_neighborhood,
    generate_soft,
    neighborhood_logit_change,
    train_generator,
    training_step,
)
from pcrecourse.refine import RefineConfig, refine, repair_causality, sparsify
from pcrecourse.report_writer import format_text, report_tables, write_docx
from pcrecourse.utils.config import RunConfig


def leaf_circuit(theta):
    builder = CircuitBuilder([len(theta)])
    builder.add_leaf(0, theta)
    return builder.build()


def factorized_circuit(leaves):
    builder = CircuitBuilder([len(t) for t in leaves])
    ids = [builder.add_leaf(j, t) for j, t in enumerate(leaves)]
    builder.add_product(ids)
    return builder.build()


def random_circuit(rng, cards):
    """Random smooth, decomposable circuit with strictly positive parameters."""
    builder = CircuitBuilder(cards)

    def leaf(j):
        return builder.add_leaf(j, rng.dirichlet(np.ones(cards[j])))

    def grow(scope, depth):
        if len(scope) == 1 and (depth >= 2 or rng.random() < 0.5):
            return leaf(scope[0])
        if depth < 2 and rng.random() < 0.5:
            children = [grow(scope, depth + 1) for _ in range(2)]
            return builder.add_sum(children, rng.dirichlet(np.ones(2) * 2))
        if len(scope) == 1:
            return leaf(scope[0])
        perm = [int(v) for v in rng.permutation(scope)]
        split = int(rng.integers(1, len(scope)))
        return builder.add_product(
            [grow(sorted(perm[:split]), depth + 1), grow(sorted(perm[split:]), depth + 1)]
        )

    grow(list(range(len(cards))), 0)
    return builder.build()


def interior_soft(rng, cards, n=None):
    blocks = []
    for card in cards:
        size = (card,) if n is None else (n, card)
        raw = rng.dirichlet(np.ones(card) * 3, size=None if n is None else n)
        blocks.append((0.5 * raw + 0.5 / card).reshape(size))
    return blocks


def linear_classifier(cards, weights, bias):
    """Sigmoid of a linear score over the concatenated one-hot encoding."""
    dim = int(sum(cards))
    w = np.zeros((dim, 1))
    for (j, code), value in weights.items():
        w[int(sum(cards[:j])) + code, 0] = value
    return MlpModel([DenseLayer(w, np.array([float(bias)]), SIGMOID)])


def constant_classifier(dim, bias):
    return MlpModel([DenseLayer(np.zeros((dim, 1)), np.array([float(bias)]), SIGMOID)])


def all_assignments(cards):
    return np.array(list(itertools.product(*[range(c) for c in cards])), dtype=np.int64)


SCHEMA_DIR = Path(__file__).resolve().parent / "configs" / "schemas"


def synthetic_table(schema, rng, n):
    """Random raw rows of the right kind for every schema feature."""
    columns = {}
    for feature in schema.features:
        if feature.kind == "ordered_categorical" and feature.order:
            columns[feature.name] = rng.choice(list(feature.order), size=n)
        elif feature.kind == "unordered_categorical" and not schema.needs_order(feature.name):
            columns[feature.name] = rng.choice(["u", "v", "w"], size=n)
        elif feature.kind in ("ordered_categorical", "unordered_categorical"):
            columns[feature.name] = rng.integers(0, 5, size=n).astype(str)
        else:
            columns[feature.name] = rng.integers(0, 60, size=n)
    return pd.DataFrame(columns)


class TestData(unittest.TestCase):
    """Schemas, discretization and encoding."""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.output_dir = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def schema(self, features, rules=()):
        return Schema.from_dict(
            {"features": features, "causal_rules": list(rules), "target": "y"}
        )

    def test_quantile_bins(self):
        schema = self.schema([{"name": "v", "kind": "binned_numeric"}])
        disc = fit_discretizer(pd.DataFrame({"v": [1, 2, 3, 4, 5, 6, 7, 8]}), schema, bins_per_numeric=4)
        self.assertEqual(disc.domains[0].edges, (2.0, 4.0, 6.0))
        self.assertEqual(disc.cardinalities, (4,))

        codes, flags = disc.transform(pd.DataFrame({"v": [-10, 3, 100]}), return_flags=True)
        self.assertEqual(codes[:, 0].tolist(), [0, 1, 3])
        self.assertTrue(flags.all())

    def test_constant_column_falls_back_to_discrete(self):
        schema = self.schema([{"name": "v", "kind": "binned_numeric"}])
        disc = fit_discretizer(pd.DataFrame({"v": [5, 5, 5, 5]}), schema, bins_per_numeric=4)
        self.assertEqual(disc.domains[0].kind, "discrete_numeric")
        self.assertEqual(disc.cardinalities, (1,))

    def test_ordered_categorical_follows_declared_order(self):
        schema = self.schema(
            [{"name": "level", "kind": "ordered_categorical", "order": ["low", "med", "high"]}]
        )
        disc = fit_discretizer(pd.DataFrame({"level": ["high", "low", "med", "low"]}), schema)
        self.assertEqual(disc.cardinalities, (3,))
        codes = disc.transform(pd.DataFrame({"level": ["low", "med", "high"]}))
        self.assertEqual(codes[:, 0].tolist(), [0, 1, 2])

    def test_discrete_values_snap_and_are_flagged(self):
        schema = self.schema([{"name": "n", "kind": "discrete_numeric"}])
        disc = fit_discretizer(pd.DataFrame({"n": [1, 2, 3, 3]}), schema)
        codes, flags = disc.transform(pd.DataFrame({"n": [2, 2.4]}), return_flags=True)
        self.assertEqual(codes[:, 0].tolist(), [1, 1])
        self.assertEqual(flags[:, 0].tolist(), [True, False])

    def test_unseen_category_maps_to_unknown_token(self):
        schema = self.schema([{"name": "c", "kind": "unordered_categorical"}])
        disc = fit_discretizer(pd.DataFrame({"c": ["a", "b", "b"]}), schema)
        domain = disc.domains[0]
        self.assertEqual(domain.categories, ("a", "b", UNKNOWN_TOKEN))
        self.assertEqual(domain.reserved_code, 2)
        self.assertEqual(disc.reserved, ((0, 2),))

        codes, flags = disc.transform(pd.DataFrame({"c": ["zzz", None, "a"]}), return_flags=True)
        self.assertEqual(codes[:, 0].tolist(), [2, 2, 0])
        self.assertEqual(flags[:, 0].tolist(), [False, False, True])
        self.assertEqual(disc.inverse_transform(codes)["c"].tolist(), [UNKNOWN_TOKEN, UNKNOWN_TOKEN, "a"])

    def test_ordered_categories_have_no_unknown_token(self):
        schema = self.schema(
            [{"name": "level", "kind": "ordered_categorical", "order": ["low", "high"]}]
        )
        disc = fit_discretizer(pd.DataFrame({"level": ["low", "high", "high"]}), schema)
        self.assertIsNone(disc.domains[0].reserved_code)
        codes, flags = disc.transform(pd.DataFrame({"level": ["huge"]}), return_flags=True)
        self.assertEqual(codes[0, 0], 1)
        self.assertFalse(flags[0, 0])

    def mixed_table(self, n=300, seed=0):
        rng = np.random.default_rng(seed)
        schema = self.schema(
            [
                {"name": "v", "kind": "numeric"},
                {"name": "n", "kind": "numeric"},
                {"name": "level", "kind": "ordered_categorical", "order": ["low", "mid", "high"]},
                {"name": "c", "kind": "unordered_categorical"},
            ]
        )
        table = pd.DataFrame(
            {
                "v": rng.lognormal(size=n),
                "n": rng.integers(0, 6, size=n),
                "level": rng.choice(["low", "mid", "high"], size=n),
                "c": rng.choice(["a", "b", "c", "d"], size=n),
            }
        )
        return schema, table

    def test_refit_is_deterministic(self):
        schema, table = self.mixed_table()
        first = fit_discretizer(table, schema, bins_per_numeric=6)
        second = fit_discretizer(table, schema, bins_per_numeric=6)
        shuffled = fit_discretizer(
            table.sample(frac=1.0, random_state=3).reset_index(drop=True), schema, bins_per_numeric=6
        )
        self.assertEqual([d.kind for d in first.domains], ["binned_numeric", "discrete_numeric", "ordered_categorical", "unordered_categorical"])
        for other in (second, shuffled):
            self.assertEqual(other.domains, first.domains)
            self.assertEqual(other.cardinalities, first.cardinalities)
            self.assertEqual(other.to_dict(), first.to_dict())

    def test_training_rows_are_in_domain(self):
        schema, table = self.mixed_table(seed=1)
        disc = fit_discretizer(table, schema, bins_per_numeric=6)
        codes, flags = disc.transform(table, return_flags=True)
        self.assertTrue(flags.all())
        self.assertTrue(((codes >= 0) & (codes < np.array(disc.cardinalities))).all())
        diagnostics = bin_diagnostics(disc, table)
        self.assertEqual((diagnostics.coverage, diagnostics.fidelity), (1.0, 1.0))
        self.assertEqual(set(diagnostics.out_of_domain_counts.values()), {0})

    def test_bin_diagnostics(self):
        schema = self.schema(
            [{"name": "a", "kind": "unordered_categorical"}, {"name": "b", "kind": "unordered_categorical"}]
        )
        train = pd.DataFrame({"a": ["x", "y"], "b": ["p", "q"]})
        disc = fit_discretizer(train, schema)

        clean = bin_diagnostics(disc, train)
        self.assertEqual((clean.coverage, clean.fidelity), (1.0, 1.0))

        diag = bin_diagnostics(disc, pd.DataFrame({"a": ["x", "z"], "b": ["p", "q"]}))
        self.assertAlmostEqual(diag.coverage, 0.75)
        self.assertAlmostEqual(diag.fidelity, 0.5)
        self.assertEqual(diag.out_of_domain_counts, {"a": 1, "b": 0})

        with self.assertRaises(ValueError):
            bin_diagnostics(disc, train.iloc[:0])

    def test_constrained_feature_needs_order(self):
        schema = self.schema(
            [{"name": "c", "kind": "unordered_categorical", "monotone": True}]
        )
        with self.assertRaises(ValueError):
            fit_discretizer(pd.DataFrame({"c": ["a", "b"]}), schema)

        coercible = fit_discretizer(pd.DataFrame({"c": ["1", "3", "2"]}), schema)
        self.assertTrue(coercible.ordered[0])

    def test_one_hot(self):
        self.assertEqual(one_hot([1, 0], [2, 2]).tolist(), [0, 1, 1, 0])
        self.assertEqual(one_hot([0], [3]).tolist(), [1, 0, 0])
        with self.assertRaises(ValueError):
            one_hot([2], [2])

        codes = np.array([[0, 2, 1], [1, 0, 3]])
        encoded = one_hot_batch(codes, [2, 3, 4])
        blocks = np.split(encoded, [2, 5], axis=1)
        self.assertEqual(np.stack([b.argmax(axis=1) for b in blocks], axis=1).tolist(), codes.tolist())

    def test_discretizer_save_load(self):
        schema = self.schema(
            [{"name": "v", "kind": "numeric"}, {"name": "c", "kind": "unordered_categorical"}]
        )
        rng = np.random.default_rng(0)
        table = pd.DataFrame({"v": rng.normal(size=200), "c": rng.choice(["a", "b"], 200)})
        disc = fit_discretizer(table, schema, bins_per_numeric=5)
        path = disc.save(self.output_dir / "disc.json")
        loaded = Discretizer.load(path)
        self.assertEqual(loaded.cardinalities, disc.cardinalities)
        np.testing.assert_array_equal(loaded.transform(table), disc.transform(table))

    def test_load_table(self):
        path = self.output_dir / "data.csv"
        pd.DataFrame({"a": [1, 2, 3], "c": ["x", "y", "x"], "y": ["yes", "no", "yes"]}).to_csv(path, index=False)
        schema = Schema.from_dict(
            {
                "features": [{"name": "a", "kind": "numeric"}, {"name": "c", "kind": "unordered_categorical"}],
                "target": "y",
                "positive_label": "yes",
            }
        )
        table, labels = load_table(path, schema)
        self.assertEqual(list(table.columns), ["a", "c"])
        self.assertEqual(labels.tolist(), [1, 0, 1])


class TestCircuit(unittest.TestCase):
    """Circuit semantics, validation, gradients and sampling."""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.output_dir = Path(self.temp_dir.name)
        self.rng = np.random.default_rng(7)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_leaf_examples(self):
        circuit = leaf_circuit([0.3, 0.7])
        self.assertTrue(circuit.validate().ok)
        self.assertAlmostEqual(circuit.log_likelihood(np.array([1])), np.log(0.7))
        self.assertAlmostEqual(circuit.soft_value([np.array([0.5, 0.5])]), np.log(0.5))
        grads = soft_gradient(circuit, [np.array([0.2, 0.8])])
        v = 0.2 * 0.3 + 0.8 * 0.7
        np.testing.assert_allclose(grads[0] * v, [0.3, 0.7])

    def test_mixture_example(self):
        builder = CircuitBuilder([2])
        a = builder.add_leaf(0, [1.0, 0.0])
        b = builder.add_leaf(0, [0.0, 1.0])
        builder.add_sum([a, b], [0.5, 0.5])
        circuit = builder.build()
        self.assertAlmostEqual(circuit.log_likelihood(np.array([0])), np.log(0.5))

    def test_validation_reports(self):
        builder = CircuitBuilder([2])
        a = builder.add_leaf(0, [0.5, 0.5])
        b = builder.add_leaf(0, [0.5, 0.5])
        product = builder.add_product([a, b])
        report = builder.build().validate()
        self.assertFalse(report.decomposable)
        self.assertIn("decomposability", report.checks(product))

        builder = CircuitBuilder([2])
        a = builder.add_leaf(0, [0.5, 0.5])
        b = builder.add_leaf(0, [0.5, 0.5])
        total = builder.add_sum([a, b], [0.5, 0.6])
        circuit = builder.build()
        self.assertIn("weight_normalization", circuit.validate().checks(total))
        with self.assertRaises(CircuitValidationError):
            circuit.log_likelihood(np.array([0]))

        builder = CircuitBuilder([2, 2])
        a = builder.add_leaf(0, [0.5, 0.5])
        b = builder.add_leaf(1, [0.5, 0.5])
        total = builder.add_sum([a, b], [0.5, 0.5])
        report = builder.build().validate()
        self.assertFalse(report.smooth)
        self.assertIn("smoothness", report.checks(total))

    def test_normalization(self):
        for cards in ([2, 3], [3, 2, 2], [2, 2, 3, 4]):
            circuit = random_circuit(self.rng, cards)
            self.assertTrue(circuit.validate().ok, str(circuit.validate()))
            total = np.exp(circuit.log_likelihood(all_assignments(cards))).sum()
            self.assertAlmostEqual(total, 1.0, delta=1e-9)

    def test_soft_value_at_vertices(self):
        cards = [3, 2, 4]
        circuit = random_circuit(self.rng, cards)
        codes = all_assignments(cards)
        soft = SoftInstance.from_codes(codes, cards)
        np.testing.assert_allclose(circuit.soft_value(soft), circuit.log_likelihood(codes), atol=1e-12)

    def test_block_replacement_identity(self):
        cards = [3, 2, 4]
        circuit = random_circuit(self.rng, cards)
        soft = SoftInstance.from_blocks(interior_soft(self.rng, cards, n=5))
        v = np.exp(circuit.soft_value(soft))
        for j, card in enumerate(cards):
            total = np.zeros(5)
            for c in range(card):
                vertex = np.zeros(card)
                vertex[c] = 1.0
                total += soft.blocks[j][:, c] * np.exp(circuit.soft_value(soft.replace_block(j, vertex)))
            np.testing.assert_allclose(total, v, atol=1e-12)

    def test_gradient_matches_finite_differences(self):
        cards = [3, 2, 4]
        h = 1e-5
        for _ in range(3):
            circuit = random_circuit(self.rng, cards)
            blocks = interior_soft(self.rng, cards)
            _, grads = circuit.soft_gradient(blocks)
            for j, card in enumerate(cards):
                for a, b in itertools.permutations(range(card), 2):
                    direction = np.zeros(card)
                    direction[a], direction[b] = 1.0, -1.0
                    plus = list(blocks)
                    minus = list(blocks)
                    plus[j] = blocks[j] + h * direction
                    minus[j] = blocks[j] - h * direction
                    numeric = (circuit.soft_value(plus) - circuit.soft_value(minus)) / (2 * h)
                    analytic = grads[j] @ direction
                    self.assertAlmostEqual(numeric, analytic, delta=1e-5 * max(1.0, abs(analytic)))

    def test_gradient_methods_agree_and_euler_identity(self):
        cards = [2, 3, 3, 2]
        circuit = random_circuit(self.rng, cards)
        blocks = interior_soft(self.rng, cards, n=4)
        log_v, backward = circuit.soft_gradient(blocks, method="backward")
        _, evaluations = circuit.soft_gradient(blocks, method="evaluations")
        for j in range(len(cards)):
            np.testing.assert_allclose(backward[j], evaluations[j], atol=1e-9)
            # sum_c q_c * dv/dq_c = v, i.e. the log-gradient contracts to 1
            np.testing.assert_allclose((blocks[j] * backward[j]).sum(axis=1), 1.0, atol=1e-9)
        self.assertEqual(log_v.shape, (4,))

    def test_gradient_with_zero_valued_branch(self):
        builder = CircuitBuilder([2, 2])
        a = builder.add_leaf(0, [1.0, 0.0])
        b = builder.add_leaf(1, [0.5, 0.5])
        left = builder.add_product([a, b])
        c = builder.add_leaf(0, [0.2, 0.8])
        d = builder.add_leaf(1, [0.3, 0.7])
        right = builder.add_product([c, d])
        builder.add_sum([left, right], [0.5, 0.5])
        circuit = builder.build()
        blocks = [np.array([0.0, 1.0]), np.array([0.4, 0.6])]
        _, backward = circuit.soft_gradient(blocks)
        _, evaluations = circuit.soft_gradient(blocks, method="evaluations")
        for j in range(2):
            np.testing.assert_allclose(backward[j], evaluations[j], atol=1e-12)

    def test_zero_value_gradient_raises(self):
        with self.assertRaises(ValueError):
            leaf_circuit([1.0, 0.0]).soft_gradient([np.array([0.0, 1.0])])

    def test_simplex_violation_raises(self):
        with self.assertRaises(ValueError):
            leaf_circuit([0.3, 0.7]).soft_value([np.array([0.6, 0.6])])

    def test_sample_deterministic_circuit(self):
        builder = CircuitBuilder([3, 2])
        children = []
        for _ in range(2):
            a = builder.add_leaf(0, [0.0, 0.0, 1.0])
            b = builder.add_leaf(1, [1.0, 0.0])
            children.append(builder.add_product([a, b]))
        builder.add_sum(children, [0.5, 0.5])
        samples = builder.build().sample(self.rng, 500)
        self.assertTrue((samples == np.array([2, 0])).all())

    def test_sample_leaf_frequency(self):
        samples = leaf_circuit([0.25, 0.75]).sample(np.random.default_rng(0), 100_000)
        self.assertAlmostEqual(samples[:, 0].mean(), 0.75, delta=0.01)

    def test_sample_matches_enumeration(self):
        cards = [2, 3, 2]
        circuit = random_circuit(np.random.default_rng(3), cards)
        samples = circuit.sample(np.random.default_rng(11), 200_000)
        codes = all_assignments(cards)
        exact = np.exp(circuit.log_likelihood(codes))
        flat = np.ravel_multi_index(samples.T, cards)
        empirical = np.bincount(flat, minlength=len(codes)) / len(samples)
        self.assertLess(0.5 * np.abs(empirical - exact).sum(), 0.01)

    def test_single_sample_is_one_instance(self):
        circuit = random_circuit(self.rng, [2, 3])
        self.assertEqual(circuit.sample(self.rng).shape, (2,))

    def test_save_load(self):
        cards = [3, 2, 4]
        circuit = random_circuit(self.rng, cards)
        path = save_circuit(circuit, self.output_dir / "c.circuit")
        loaded = load_circuit(path)
        codes = all_assignments(cards)
        np.testing.assert_array_equal(loaded.log_likelihood(codes), circuit.log_likelihood(codes))
        self.assertEqual(loaded.cardinalities, circuit.cardinalities)

    def test_load_rejects_unknown_header(self):
        path = self.output_dir / "bad.circuit"
        path.write_text("something-else 1\n", encoding="utf-8")
        with self.assertRaises(ValueError):
            load_circuit(path)

    def test_out_of_range_code(self):
        with self.assertRaises(ValueError):
            leaf_circuit([0.5, 0.5]).log_likelihood(np.array([2]))


class TestLearnSpn(unittest.TestCase):
    """Structure learning."""

    def test_single_feature_mle(self):
        codes = np.array([[0]] * 30 + [[1]] * 70)
        circuit = learn_structure(codes, [2], alpha=0.0)
        np.testing.assert_allclose(circuit.nodes[circuit.root].params, [0.3, 0.7])

    def test_independent_features_give_product(self):
        codes = np.repeat(all_assignments([3, 3]), 556, axis=0)
        circuit = learn_structure(codes, [3, 3], min_rows=200, min_cols=2)
        root = circuit.nodes[circuit.root]
        self.assertEqual(root.kind, "product")
        self.assertEqual(sorted(sorted(circuit.nodes[c].scope) for c in root.children), [[0], [1]])

    def test_beats_factorized_baseline(self):
        rng = np.random.default_rng(0)
        x0 = rng.integers(0, 3, size=600)
        x1 = np.where(rng.random(600) < 0.9, x0, rng.integers(0, 3, size=600))
        x2 = rng.integers(0, 2, size=600)
        codes = np.stack([x0, x1, x2], axis=1)
        cards = [3, 3, 2]
        circuit = learn_structure(codes, cards, min_rows=50, min_cols=2, rng=np.random.default_rng(1))
        self.assertTrue(circuit.validate().ok)
        learned = circuit.log_likelihood(codes).sum()
        baseline = sum(
            np.log(leaf_params(codes[:, j], cards[j], 0.1))[codes[:, j]].sum() for j in range(3)
        )
        self.assertGreaterEqual(learned, baseline)

    def test_empty_table(self):
        with self.assertRaises(ValueError):
            learn_structure(np.zeros((0, 2), dtype=int), [2, 2])


class TestNeural(unittest.TestCase):
    """Dense networks, training and threshold selection."""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.output_dir = Path(self.temp_dir.name)
        self.rng = np.random.default_rng(5)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_forward_examples(self):
        identity = MlpModel([DenseLayer(np.eye(2), np.zeros(2), IDENTITY)])
        np.testing.assert_array_equal(identity.predict(np.array([3.0, -1.0])), [3.0, -1.0])
        relu = MlpModel([DenseLayer(np.eye(2), np.zeros(2), RELU)])
        np.testing.assert_array_equal(relu.predict(np.array([-1.0, 2.0])), [0.0, 2.0])
        sigmoid = MlpModel([DenseLayer(np.eye(1), np.zeros(1), SIGMOID)])
        self.assertEqual(sigmoid.predict(np.array([0.0]))[0], 0.5)
        with self.assertRaises(ValueError):
            identity.forward(np.zeros(3))

    def test_backward_matches_finite_differences(self):
        model = MlpModel.init([4, 5, 3, 2], [RELU, SIGMOID, IDENTITY], self.rng)
        x = self.rng.normal(size=(3, 4))
        weights = self.rng.normal(size=(3, 2))

        def loss():
            return float((model.predict(x) * weights).sum())

        _, tape = model.forward(x)
        grads, input_grad = model.backward(tape, weights)
        h = 1e-5
        for param, grad in zip(model.parameters(), grads):
            for idx in list(np.ndindex(param.shape))[:6]:
                original = param[idx]
                param[idx] = original + h
                up = loss()
                param[idx] = original - h
                down = loss()
                param[idx] = original
                self.assertAlmostEqual((up - down) / (2 * h), grad[idx], delta=1e-4 * max(1.0, abs(grad[idx])))
        for idx in [(0, 0), (2, 3)]:
            shifted = x.copy()
            shifted[idx] += h
            up = float((model.predict(shifted) * weights).sum())
            shifted[idx] -= 2 * h
            down = float((model.predict(shifted) * weights).sum())
            self.assertAlmostEqual((up - down) / (2 * h), input_grad[idx], delta=1e-4)

    def test_backward_linear_and_zero(self):
        w = self.rng.normal(size=(3, 2))
        model = MlpModel([DenseLayer(w, np.zeros(2), IDENTITY)])
        _, tape = model.forward(np.ones(3))
        g = np.array([1.0, -2.0])
        _, input_grad = model.backward(tape, g)
        np.testing.assert_allclose(input_grad, w @ g)
        grads, input_grad = model.backward(tape, np.zeros(2))
        self.assertTrue(all(not p.any() for p in grads))
        self.assertFalse(input_grad.any())

    def test_stale_tape(self):
        model = MlpModel.init([2, 3, 1], [RELU, SIGMOID], self.rng)
        _, tape = model.forward(np.ones((2, 2)))
        grads, _ = model.backward(tape, np.ones((2, 1)))
        adam_step(model, AdamState.for_model(model), grads)
        with self.assertRaises(ValueError):
            model.backward(tape, np.ones((2, 1)))

    def test_separable_training(self):
        x = self.rng.uniform(-1, 1, size=(600, 2))
        x = x[np.abs(x.sum(axis=1)) > 0.3][:400]
        y = (x.sum(axis=1) > 0).astype(int)
        model = train_classifier(x, y, epochs=200, lr=1e-2, seed=0)
        accuracy = ((predict_proba(model, x) >= 0.5) == (y == 1)).mean()
        self.assertGreaterEqual(accuracy, 0.99)
        scores = predict_proba(model, x)
        self.assertTrue(((scores > 0) & (scores < 1)).all())

    def test_single_class_rejected(self):
        with self.assertRaises(ValueError):
            train_classifier(np.ones((4, 2)), np.zeros(4))

    def test_all_zero_labels(self):
        model = MlpModel.init([2, 8, 1], [RELU, SIGMOID], self.rng)
        x = self.rng.normal(size=(128, 2))
        fit_binary(model, x, np.zeros(128), epochs=200, batch_size=64, lr=1e-2, rng=self.rng)
        self.assertLess(predict_proba(model, x).mean(), 0.05)

    def test_full_batch_loss_decreases(self):
        model = MlpModel.init([2, 6, 1], [RELU, SIGMOID], self.rng)
        x = self.rng.normal(size=(64, 2))
        y = (x[:, 0] > 0).astype(float)
        history = fit_binary(model, x, y, epochs=50, batch_size=64, lr=1e-4, rng=self.rng)
        for before, after in zip(history, history[1:]):
            self.assertLessEqual(after, before * 1.01)

    def test_training_is_deterministic(self):
        x = self.rng.normal(size=(100, 3))
        y = (x[:, 0] > 0).astype(int)
        first = train_classifier(x, y, epochs=5, seed=3)
        second = train_classifier(x, y, epochs=5, seed=3)
        for a, b in zip(first.parameters(), second.parameters()):
            self.assertTrue(np.array_equal(a, b))

    def test_youden_examples(self):
        labels = np.array([1, 1, 0, 0])
        self.assertEqual(select_threshold_youden([0.9, 0.9, 0.1, 0.1], labels), 0.11)
        self.assertEqual(select_threshold_youden([0.8, 0.8, 0.2, 0.2], labels), 0.21)
        with self.assertRaises(ValueError):
            select_threshold_youden([0.1, 0.2], [1, 1])

    def test_youden_takes_smallest_threshold_on_plateau(self):
        labels = np.array([1, 1, 0, 0])
        self.assertEqual(select_threshold_youden([0.6, 0.6, 0.3, 0.3], labels), 0.31)
        # J = 0.5 on (0.1, 0.4] and again on (0.5, 0.8]
        self.assertEqual(select_threshold_youden([0.8, 0.4, 0.5, 0.1], labels), 0.11)

    def test_youden_invariant_to_monotone_transforms(self):
        rng = np.random.default_rng(4)
        levels = np.arange(0.15, 0.9, 0.1)
        scores = rng.choice(levels, size=500)
        labels = (rng.random(500) < scores).astype(int)

        def accepted(s):
            return s >= select_threshold_youden(s, labels)

        reference = accepted(scores)
        self.assertTrue(0 < reference.sum() < len(reference))
        for transform in (np.square, lambda s: 0.05 + 0.9 * np.sqrt(s)):
            np.testing.assert_array_equal(accepted(transform(scores)), reference)

    def test_scores_stay_inside_unit_interval(self):
        saturated = constant_classifier(2, 800.0)
        self.assertEqual(predict_proba(saturated, np.zeros((3, 2))).tolist(), [1.0 - SCORE_EPS] * 3)
        self.assertEqual(predict_proba(constant_classifier(2, -800.0), np.zeros((1, 2)))[0], SCORE_EPS)
        mid = predict_proba(constant_classifier(2, 0.0), np.zeros((1, 2)))[0]
        self.assertEqual(mid, 0.5)

    def test_youden_on_skewed_scores(self):
        rng = np.random.default_rng(0)
        labels = (rng.random(2000) < 0.07).astype(int)
        scores = np.clip(rng.beta(1, 12, size=2000) + 0.08 * labels, 0, 1)
        self.assertLess(select_threshold_youden(scores, labels), 0.5)

    def test_save_load(self):
        model = MlpModel.init([3, 4, 1], [RELU, SIGMOID], self.rng)
        path = save_model(model, self.output_dir / "m.npz", {"tau": 0.5})
        loaded, manifest = load_model(path)
        x = self.rng.normal(size=(5, 3))
        np.testing.assert_array_equal(loaded.predict(x), model.predict(x))
        self.assertEqual(manifest, {"tau": 0.5})


class TestConstraints(unittest.TestCase):
    """Logit masks and feasibility predicates."""

    def test_monotone_mask(self):
        logits = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(apply_monotone_mask(logits, 2), [NEG, NEG, 3.0, 4.0])
        np.testing.assert_array_equal(apply_monotone_mask(logits, 0), logits)
        self.assertEqual((apply_monotone_mask(logits, 3) > NEG).sum(), 1)
        once = apply_monotone_mask(logits, 1)
        np.testing.assert_array_equal(apply_monotone_mask(once, 1), once)
        with self.assertRaises(ValueError):
            apply_monotone_mask(logits, 4)

    def test_causal_clamp(self):
        np.testing.assert_array_equal(apply_causal_clamp(np.array([5.0, 1.0, 9.0]), 1), [5.0, 1.0, NEG])
        np.testing.assert_array_equal(apply_causal_clamp(np.array([5.0, 1.0, 9.0]), 2), [5.0, 1.0, 9.0])

    def test_causal_joint(self):
        result = apply_causal_joint(np.zeros(3), np.zeros(3), factual_e=1, factual_c=1)
        illegal = {(int(a), int(b)) for a, b in zip(*np.nonzero(~result.mask))}
        self.assertEqual(illegal, {(0, 2), (1, 2)})
        legal = result.joint[result.mask]
        np.testing.assert_allclose(legal, 1.0 / 7.0)
        self.assertLess(result.joint[~result.mask].sum(), 1e-300)
        self.assertAlmostEqual(result.q_cause.sum(), 1.0, delta=1e-9)
        self.assertAlmostEqual(result.q_effect.sum(), 1.0, delta=1e-9)

    def test_causal_joint_random_trials(self):
        rng = np.random.default_rng(0)
        for _ in range(10_000):
            fe, fc = (int(v) for v in rng.integers(0, 4, size=2))
            logits_e = rng.normal(size=4) * 3
            logits_c = rng.normal(size=4) * 3
            if rng.random() < 0.5:
                logits_c = apply_monotone_mask(logits_c, fc)
            r = apply_causal_joint(logits_e, logits_c, fe, fc)
            a_c, a_e = r.argmax
            self.assertTrue(a_e <= fe or a_c > fc)
            self.assertTrue(r.mask[a_c, a_e])
            self.assertLess(r.joint[~r.mask].sum(), 1e-300)
            self.assertAlmostEqual(r.joint.sum(), 1.0, delta=1e-9)

    def test_joint_component_three_linked_features(self):
        cs = ConstraintSet((3, 3, 4), monotone=frozenset({0}), rules=((0, 1), (1, 2)))
        self.assertEqual(cs.joint_groups(), [(0, 1, 2)])
        component = JointComponent.for_group(cs, (0, 1, 2))
        self.assertEqual(component.size, 36)

        rng = np.random.default_rng(1)
        n = 10_000
        factual = np.stack([rng.integers(0, c, size=n) for c in cs.cardinalities], axis=1)
        allowed = [np.ones((n, c), dtype=bool) for c in cs.cardinalities]
        allowed[0] = np.arange(3)[None, :] >= factual[:, [0]]
        logits = [np.where(a, rng.normal(size=a.shape) * 3, NEG) for a in allowed]
        probs, marginals, mask = component.forward(logits, factual, allowed)

        for row in range(20):
            expected = causal_rows(component.assignments, factual[row], cs)
            expected &= component.assignments[:, 0] >= factual[row, 0]
            np.testing.assert_array_equal(mask[row], expected)
        self.assertTrue((np.where(mask, 0.0, probs).sum(axis=1) < 1e-300).all())
        np.testing.assert_allclose(probs.sum(axis=1), 1.0)
        for marginal in marginals:
            np.testing.assert_allclose(marginal.sum(axis=1), 1.0)
        decoded = component.decode(probs, mask)
        self.assertTrue(feasible_rows(decoded, factual, cs).all())

    def test_feasible_examples(self):
        cs = ConstraintSet((3, 3, 3), immutable=frozenset({0}), monotone=frozenset({1}), rules=((1, 2),))
        x = np.array([1, 1, 1])
        self.assertTrue(feasible(x, x, cs))
        self.assertFalse(feasible(np.array([2, 1, 1]), x, cs))
        self.assertFalse(feasible(np.array([1, 0, 1]), x, cs))
        self.assertFalse(feasible(np.array([1, 1, 2]), x, cs))
        self.assertTrue(feasible(np.array([1, 2, 2]), x, cs))

    def test_within_budget(self):
        x = np.zeros(4, dtype=int)
        c = np.array([1, 1, 1, 0])
        mutable = [0, 1, 2, 3]
        self.assertTrue(within_budget(x, x, mutable, 0))
        self.assertFalse(within_budget(c, x, mutable, 2))
        self.assertTrue(within_budget(c, x, mutable, 3))
        self.assertEqual(mutable_hamming(c, x, mutable), 3)

    def test_from_schema_rejects_unordered_constrained_feature(self):
        schema = Schema.from_dict(
            {"features": [{"name": "c", "kind": "unordered_categorical", "monotone": True}]}
        )
        disc = Discretizer([FeatureDomain("c", "unordered_categorical", categories=("a", "b"), representatives=("a", "b"))])
        with self.assertRaises(ValueError):
            ConstraintSet.from_schema(schema, disc)

    def test_joint_groups(self):
        cs = ConstraintSet((3, 3, 3, 3), immutable=frozenset({3}), rules=((0, 1), (0, 2), (3, 1)))
        self.assertEqual(cs.joint_groups(), [(0, 1, 2)])
        self.assertEqual(cs.clamped, (1,))
        self.assertEqual(cs.effects, {0: (1, 2), 3: (1,)})

    def test_unknown_token_is_never_a_target(self):
        schema = Schema.from_dict(
            {"features": [{"name": "v", "kind": "numeric"}, {"name": "c", "kind": "unordered_categorical"}]}
        )
        disc = fit_discretizer(pd.DataFrame({"v": [1, 2, 3], "c": ["a", "b", "a"]}), schema)
        cs = ConstraintSet.from_schema(schema, disc)
        self.assertEqual(cs.reserved, ((1, 2),))

        self.assertFalse(feasible(np.array([0, 2]), np.array([0, 0]), cs))
        self.assertTrue(feasible(np.array([0, 2]), np.array([1, 2]), cs))
        self.assertTrue(feasible(np.array([0, 1]), np.array([0, 2]), cs))

        factuals = np.array([[0, 0], [0, 2]])
        logits = np.zeros((2, 6))
        logits[:, 5] = 50.0
        soft = SoftRecourse.from_logits(logits, factuals, cs)
        self.assertEqual(soft.blocks[1][0, 2], 0.0)
        self.assertGreater(soft.blocks[1][1, 2], 0.99)
        np.testing.assert_array_equal(decode(soft, cs)[:, 1], [0, 2])

        with self.assertRaises(ValueError):
            ConstraintSet((2, 3), reserved=((1, 3),))


class TestRecourse(unittest.TestCase):
    """Pool, encoder, soft recourse, losses and generator training."""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.output_dir = Path(self.temp_dir.name)
        self.rng = np.random.default_rng(21)
        self.cards = (2, 3, 3, 3, 2)
        self.cs = ConstraintSet(
            self.cards,
            immutable=frozenset({0}),
            monotone=frozenset({1}),
            rules=((2, 3), (2, 1), (0, 4)),
            budget=0.5,
        )
        self.p_plus = random_circuit(np.random.default_rng(1), list(self.cards))
        self.p_minus = random_circuit(np.random.default_rng(2), list(self.cards))
        self.classifier = MlpModel.init([sum(self.cards), 4, 1], [RELU, SIGMOID], np.random.default_rng(3))

    def tearDown(self):
        self.temp_dir.cleanup()

    def logit_dim(self, cs):
        return sum(cs.cardinalities[j] for j in cs.mutable)

    def random_factuals(self, n):
        return np.stack([self.rng.integers(0, c, size=n) for c in self.cards], axis=1)

    def test_pool_accepts_everything(self):
        accept_all = constant_classifier(sum(self.cards), 5.0)
        pool = build_pool(self.p_plus, accept_all, 0.5, 10, 5000, np.random.default_rng(4), draw_batch=64)
        expected = self.p_plus.sample(np.random.default_rng(4), 64)[:10]
        np.testing.assert_array_equal(pool.members, expected)
        np.testing.assert_allclose(pool.log_p_plus, self.p_plus.log_likelihood(expected))
        self.assertEqual(pool.draws, 64)

    def test_pool_members_are_accepted(self):
        draws = self.p_plus.sample(np.random.default_rng(5), 500)
        tau = float(np.median(predict_proba(self.classifier, one_hot_batch(draws, self.cards))))
        pool = build_pool(self.p_plus, self.classifier, tau, 20, 50_000, np.random.default_rng(4))
        scores = predict_proba(self.classifier, one_hot_batch(pool.members, self.cards))
        self.assertTrue((scores >= tau).all())

    def test_pool_exhausted(self):
        reject_all = constant_classifier(sum(self.cards), -5.0)
        with self.assertRaises(PoolExhaustedError) as ctx:
            build_pool(self.p_plus, reject_all, 0.5, 10, 300, np.random.default_rng(4), draw_batch=64)
        self.assertEqual(ctx.exception.draws, 300)
        self.assertEqual(ctx.exception.collected, 0)

    def test_pool_save_load(self):
        pool = NeighborhoodPool(self.random_factuals(6), self.rng.normal(size=6), draws=9)
        loaded = NeighborhoodPool.load(pool.save(self.output_dir / "pool.npz"))
        np.testing.assert_array_equal(loaded.members, pool.members)
        self.assertEqual(loaded.draws, 9)

    def test_encoder_properties(self):
        encoder = NeighborhoodEncoder.init(self.rng, k=4, psi_hidden=[5, 5], embed_dim=3)
        u = self.rng.normal(size=(2, 4, 2))
        h, _ = encoder.encode_descriptors(u)
        permuted, _ = encoder.encode_descriptors(u[:, [2, 0, 3, 1]])
        np.testing.assert_allclose(h, permuted, atol=1e-12)

        same = np.repeat(u[:, :1], 4, axis=1)
        h_same, _ = encoder.encode_descriptors(same)
        direct = encoder.rho.predict(encoder.psi.predict(u[:, 0]))
        np.testing.assert_allclose(h_same, direct, atol=1e-12)

        pool = NeighborhoodPool(self.random_factuals(8), self.rng.normal(size=8))
        factual = pool.members[5]
        descriptors = encoder.descriptors(factual, pool)
        self.assertEqual(descriptors.shape, (1, 4, 2))
        self.assertEqual(descriptors[0, 0, 0], 0.0)
        single = encode_neighborhood(encoder.psi, encoder.rho, factual, pool, 4)
        self.assertEqual(single.shape, (3,))

        with self.assertRaises(ValueError):
            encoder.descriptors(factual, NeighborhoodPool(pool.members[:3], pool.log_p_plus[:3]))

    def test_generator_input_dim(self):
        z = GeneratorInput.build(self.random_factuals(3), self.cs, self.p_plus, np.zeros((3, 4)))
        self.assertEqual(z.vector.shape, (3, GeneratorInput.dim(self.cs, 4)))
        self.assertEqual(GeneratorInput.dim(self.cs, 4), 2 + 1 + 4)

    def test_zero_generator_gives_uniform_unmasked(self):
        cs = ConstraintSet((3, 4), monotone=frozenset({0}))
        dim_in = GeneratorInput.dim(cs, 2)
        generator = MlpModel([DenseLayer(np.zeros((dim_in, 7)), np.zeros(7), IDENTITY)])
        x = np.array([[1, 2], [2, 0]])
        q = generate_soft(generator, np.zeros((2, dim_in)), x, cs)
        np.testing.assert_allclose(q.blocks[0][0], [0.0, 0.5, 0.5])
        np.testing.assert_allclose(q.blocks[0][1], [0.0, 0.0, 1.0])
        np.testing.assert_allclose(q.blocks[1], 0.25)

    def test_soft_recourse_invariants(self):
        n = 50
        x = self.random_factuals(n)
        logits = self.rng.normal(size=(n, self.logit_dim(self.cs))) * 4
        q = SoftRecourse.from_logits(logits, x, self.cs)
        np.testing.assert_array_equal(q.blocks[0], one_hot_batch(x[:, [0]], [2]))
        q.soft.check(self.cards)
        for j in self.cs.mutable:
            masked = ~q.allowed[j]
            self.assertLess(q.blocks[j][masked].sum(), 1e-300 * max(1, masked.sum()))

    def test_decode_is_always_feasible(self):
        n = 10_000
        x = self.random_factuals(n)
        logits = self.rng.normal(size=(n, self.logit_dim(self.cs))) * 5
        candidates = decode(SoftRecourse.from_logits(logits, x, self.cs), self.cs)
        self.assertTrue(feasible_rows(candidates, x, self.cs).all())

    def test_decode_one_hot_and_ties(self):
        cs = ConstraintSet((3, 3))
        x = np.array([[0, 0]])
        logits = np.array([[0.0, 0.0, 80.0, 0.0, 80.0, 0.0]])
        np.testing.assert_array_equal(decode(SoftRecourse.from_logits(logits, x, cs), cs), [[2, 1]])
        tied = np.array([[0.0, 3.0, 3.0, 1.0, 1.0, 1.0]])
        np.testing.assert_array_equal(decode(SoftRecourse.from_logits(tied, x, cs), cs), [[1, 0]])

    def vertex_recourse(self, x, cs):
        soft = SoftInstance.from_codes(x, cs.cardinalities)
        allowed = {j: np.ones((len(x), cs.cardinalities[j]), dtype=bool) for j in cs.mutable}
        return SoftRecourse(soft, x, cs.mutable, allowed, cs.mutable)

    def test_losses_vanish_at_factual(self):
        cs = ConstraintSet(self.cards, immutable=frozenset({0}))
        x = self.random_factuals(4)
        result = compute_losses(self.vertex_recourse(x, cs), self.classifier, self.p_plus, self.p_minus, LossWeights())
        self.assertEqual(result.terms["proximity"], 0.0)
        self.assertEqual(result.terms["sparsity"], 0.0)
        self.assertEqual(result.terms["entropy"], 0.0)

    def test_uniform_entropy_and_proximity_hinge(self):
        cs = ConstraintSet((4,))
        q = SoftRecourse.from_logits(np.zeros((1, 4)), np.array([[0]]), cs)
        p = leaf_circuit([0.25, 0.25, 0.25, 0.25])
        clf = constant_classifier(4, 0.0)
        result = compute_losses(q, clf, p, p, LossWeights())
        self.assertAlmostEqual(result.terms["entropy"], np.log(4))

        cs = ConstraintSet((3, 3, 3, 3))
        q = SoftRecourse.from_logits(np.zeros((1, 12)), np.zeros((1, 4), dtype=int), cs)
        p = factorized_circuit([np.ones(3) / 3] * 4)
        result = compute_losses(q, constant_classifier(12, 0.0), p, p, LossWeights(budget=8 / 3 - 2))
        self.assertAlmostEqual(result.terms["proximity"], 4.0, places=9)

    def test_loss_gradient_matches_finite_differences(self):
        x = self.random_factuals(3)
        weights = LossWeights(lambda_neg=0.3, lambda_ent=0.2, budget=0.5)
        logits = self.rng.normal(size=(3, self.logit_dim(self.cs)))

        def total(l):
            q = SoftRecourse.from_logits(l, x, self.cs)
            return compute_losses(q, self.classifier, self.p_plus, self.p_minus, weights, neg_grad_clip=None)

        analytic = total(logits).grad_logits
        h = 1e-6
        numeric = np.zeros_like(logits)
        for idx in np.ndindex(logits.shape):
            up, down = logits.copy(), logits.copy()
            up[idx] += h
            down[idx] -= h
            numeric[idx] = (total(up).total - total(down).total) / (2 * h)
        np.testing.assert_allclose(numeric, analytic, rtol=1e-4, atol=1e-6)

    def test_loss_coefficients(self):
        weights = LossWeights.from_config({"ppt_block": False, "lambda_val": 2.0, "unrelated": 1})
        coef = weights.coefficients()
        self.assertEqual(coef["validity"], 2.0)
        self.assertEqual(coef["proximity"], 0.0)
        self.assertEqual(coef["plaus_pos"], 0.0)
        self.assertEqual(coef["plaus_neg"], 0.0)
        with self.assertRaises(ValueError):
            LossWeights(alpha=1.5)
        with self.assertRaises(ValueError):
            LossWeights(lambda_pos=-1.0)

    def make_model(self, cs, pool_members, p_plus, hidden=(16,)):
        pool = NeighborhoodPool(pool_members, np.atleast_1d(p_plus.log_likelihood(pool_members)))
        return RecourseModel.init(
            pool, p_plus, cs, np.random.default_rng(8), {"k": 3, "psi_hidden": [4, 4], "embed_dim": 2}, hidden
        )

    def test_disabled_terms_leave_parameters_unchanged(self):
        model = self.make_model(self.cs, self.random_factuals(6), self.p_plus)
        before = [p.copy() for p in model.generator.parameters() + model.encoder.psi.parameters()]
        off = LossWeights(
            proximity=False, plaus_pos=False, plaus_neg=False, sparsity=False, validity=False, entropy=False
        )
        states = {
            "generator": AdamState.for_model(model.generator),
            "psi": AdamState.for_model(model.encoder.psi),
            "rho": AdamState.for_model(model.encoder.rho),
        }
        result = training_step(model, self.random_factuals(8), self.p_minus, self.classifier, off, states)
        self.assertEqual(result.total, 0.0)
        after = model.generator.parameters() + model.encoder.psi.parameters()
        for a, b in zip(before, after):
            np.testing.assert_array_equal(a, b)

    def test_sparsity_only_training_stays_at_factual(self):
        cards = (3, 3)
        cs = ConstraintSet(cards)
        p_plus = factorized_circuit([[0.2, 0.3, 0.5], [0.5, 0.3, 0.2]])
        p_minus = factorized_circuit([[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        deny_all = constant_classifier(6, -5.0)
        model = self.make_model(cs, all_assignments(cards)[:6], p_plus)
        weights = LossWeights(
            proximity=False, plaus_pos=False, plaus_neg=False, validity=False, entropy=False
        )
        history = train_generator(
            model, p_minus, deny_all, 0.5, weights, np.random.default_rng(0),
            epochs=20, batch_size=16, steps_per_epoch=10, lr=0.05,
        )
        self.assertEqual(len(history.epochs), 20)
        held_out = p_minus.sample(np.random.default_rng(99), 32)
        self.assertLess(model.soft(held_out).change_probs().sum(axis=1).mean(), 0.1)

    def test_model_save_load_and_logit_change(self):
        model = self.make_model(self.cs, self.random_factuals(6), self.p_plus)
        x = self.random_factuals(5)
        loaded = RecourseModel.load(model.save(self.output_dir / "gen"), self.p_plus, self.cs)
        np.testing.assert_array_equal(loaded.generate(x), model.generate(x))
        change = neighborhood_logit_change(model, x)
        self.assertEqual(sorted(change.blockwise), list(self.cs.mutable))
        self.assertGreaterEqual(change.fraction_changed, 0.0)

        candidates, seconds = model.generate_timed(x)
        self.assertTrue(feasible_rows(candidates, x, self.cs).all())
        self.assertTrue((seconds >= 0).all())


class TestRefine(unittest.TestCase):
    """Local search."""

    def setUp(self):
        self.cards = (3, 3, 3)
        self.x = np.array([0, 0, 0])

    def test_repair_causality(self):
        effects = {0: (1,)}
        x = np.array([1, 1])
        np.testing.assert_array_equal(repair_causality(np.array([1, 2]), x, effects), [1, 1])
        np.testing.assert_array_equal(repair_causality(np.array([2, 2]), x, effects), [2, 2])
        once = repair_causality(np.array([0, 2]), x, effects)
        np.testing.assert_array_equal(repair_causality(once, x, effects), once)

    def test_valid_candidate_is_sparsified(self):
        cs = ConstraintSet(self.cards)
        clf = linear_classifier(self.cards, {(0, 2): 10.0}, -5.0)
        out = refine(np.array([2, 1, 1]), self.x, cs, clf, 0.5)
        np.testing.assert_array_equal(out, [2, 0, 0])

    def test_invalid_candidate_is_repaired(self):
        cs = ConstraintSet(self.cards)
        clf = linear_classifier(self.cards, {(0, 2): 10.0}, -5.0)
        out = refine(np.array([1, 1, 0]), self.x, cs, clf, 0.5)
        np.testing.assert_array_equal(out, [2, 0, 0])

    def test_no_valid_move_keeps_fallback(self):
        cs = ConstraintSet(self.cards)
        clf = linear_classifier(self.cards, {(0, 2): 10.0}, -5.0)
        c0 = np.array([0, 1, 0])
        out = refine(c0, self.x, cs, clf, 0.5)
        np.testing.assert_array_equal(out, c0)

    def test_sparsify_respects_causality(self):
        cs = ConstraintSet(self.cards, rules=((0, 1),))
        clf = linear_classifier(self.cards, {(1, 2): 10.0}, -5.0)
        out = sparsify(np.array([1, 2, 0]), self.x, cs, clf, 0.5)
        np.testing.assert_array_equal(out, [1, 2, 0])
        with self.assertRaises(ValueError):
            sparsify(np.array([0, 1, 0]), self.x, cs, clf, 0.5)

    def test_plausibility_guard(self):
        cs = ConstraintSet(self.cards)
        clf = linear_classifier(self.cards, {(0, 2): 10.0}, -5.0)
        # the factual value of feature 1 is very unlikely under p+
        p_plus = factorized_circuit([[1 / 3] * 3, [1e-6, 0.5 - 5e-7, 0.5 - 5e-7], [1 / 3] * 3])
        cfg = RefineConfig(tau=0.5, delta_max=1.0)
        out = refine(np.array([2, 1, 0]), self.x, cs, clf, 0.5, p_plus, cfg)
        np.testing.assert_array_equal(out, [2, 1, 0])
        unguarded = refine(np.array([2, 1, 0]), self.x, cs, clf, 0.5, p_plus)
        np.testing.assert_array_equal(unguarded, [2, 0, 0])

    def test_random_refinement_stays_feasible(self):
        rng = np.random.default_rng(0)
        cards = (3, 3, 3, 2, 3)
        cs = ConstraintSet(
            cards,
            immutable=frozenset({3}),
            monotone=frozenset({0}),
            rules=((0, 1), (3, 2)),
            ordered=(True, True, True, True, False),
            reserved=((4, 2),),
        )
        clf = MlpModel.init([sum(cards), 6, 1], [RELU, SIGMOID], rng)
        factuals = np.stack([rng.integers(0, c, size=10_000) for c in cards], axis=1)
        starts = np.stack([rng.integers(0, c, size=10_000) for c in cards], axis=1)
        outs = np.array([refine(c0, x, cs, clf, 0.5) for c0, x in zip(starts, factuals)])
        self.assertTrue(feasible_rows(outs, factuals, cs).all())
        self.assertTrue(
            (mutable_hamming(outs, factuals, cs.mutable) <= mutable_hamming(starts, factuals, cs.mutable)).all()
        )

    def test_shipped_schemas_decode_and_refine_feasibly(self):
        paths = sorted(SCHEMA_DIR.glob("*.json"))
        self.assertEqual([p.stem for p in paths], ["adult", "credit", "gmsc"])
        for path in paths:
            with self.subTest(schema=path.stem):
                rng = np.random.default_rng(0)
                schema = Schema.load(path)
                disc = fit_discretizer(synthetic_table(schema, rng, 500), schema, bins_per_numeric=5)
                cs = ConstraintSet.from_schema(schema, disc)
                self.assertEqual(len(cs.rules), len(schema.causal_rules))

                raw = synthetic_table(schema, rng, 2000)
                for j, _ in cs.reserved:
                    name = schema.names[j]
                    raw.loc[rng.random(len(raw)) < 0.05, name] = "unseen"
                x = disc.transform(raw)
                dim = sum(cs.cardinalities[j] for j in cs.mutable)
                decoded = decode(SoftRecourse.from_logits(rng.normal(size=(len(x), dim)) * 3, x, cs), cs)
                self.assertTrue(feasible_rows(decoded, x, cs).all())
                for j, code in cs.reserved:
                    moved = (decoded[:, j] == code) & (x[:, j] != code)
                    self.assertFalse(moved.any())

                clf = MlpModel.init([sum(cs.cardinalities), 4, 1], [RELU, SIGMOID], rng)
                refined = np.array([refine(decoded[i], x[i], cs, clf, 0.5) for i in range(200)])
                self.assertTrue(feasible_rows(refined, x[:200], cs).all())


class TestMetrics(unittest.TestCase):
    """Metric arithmetic and aggregation."""

    def setUp(self):
        self.cards = (3, 3)
        self.cs = ConstraintSet(self.cards, immutable=frozenset({1}))
        self.clf = linear_classifier(self.cards, {(0, 2): 10.0}, -5.0)
        x = np.array([0, 0])
        self.records = [
            RecourseRecord(0, x, pre=np.array([1, 0]), post=np.array([2, 0]), time_generate=0.1, time_refine=0.2),
            RecourseRecord(1, x, pre=np.array([2, 1]), post=np.array([0, 1]), time_generate=0.3, time_refine=0.0),
        ]

    def test_summarize(self):
        s = summarize([1.0, 2.0, 3.0])
        self.assertEqual((s.mean, s.std), (2.0, 1.0))
        self.assertEqual(summarize([4.0]).std, 0.0)
        with self.assertRaises(ValueError):
            summarize([])

    def test_validity(self):
        self.assertEqual(metric_validity(self.records, self.clf, 0.5, self.cards, PRE), 50.0)
        self.assertEqual(metric_validity(self.records, self.clf, 0.5, self.cards, POST), 50.0)

    def test_actionability_and_causality(self):
        action, causal = metric_actionability_causality(self.records, self.cs, POST)
        self.assertEqual(action, 50.0)
        self.assertIsNone(causal)
        cs = ConstraintSet(self.cards, rules=((1, 0),))
        _, causal = metric_actionability_causality(self.records, cs, PRE)
        self.assertEqual(causal, 50.0)

    def test_mad_and_similarity(self):
        np.testing.assert_array_equal(mad_weights(np.array([[0], [0], [4]])), [1.0])
        np.testing.assert_array_equal(mad_weights(np.array([[0], [2], [4], [6]])), [2.0])
        c = np.array([[3, 2]])
        x = np.array([[0, 0]])
        mad = np.array([1.0, 2.0])
        self.assertEqual(similarity_distance(c, x, mad)[0], 4.0)
        self.assertEqual(similarity_distance(c, x, mad, ordered=(True, False))[0], 3.5)

    def test_sparsity_and_time(self):
        sparsity, median = metric_sparsity_time(self.records, self.cs.mutable, POST)
        self.assertEqual(sparsity.mean, 0.5)
        self.assertAlmostEqual(median, 0.3)
        with self.assertRaises(ValueError):
            RecourseRecord(0, np.zeros(2), np.zeros(2), np.zeros(2), time_generate=-1.0)

    def test_aggregate(self):
        def report(validity):
            return MetricsReport(
                n=2, validity=validity, actionability=100.0, causality=None,
                nll=Summary(1.0, 0.0), similarity=Summary(2.0, 0.0), sparsity=Summary(1.0, 0.0),
                median_time=0.1, mean_yhat=0.6,
            )

        out = aggregate([report(80.0), report(100.0)])
        self.assertEqual(out["validity"]["mean"], 90.0)
        self.assertAlmostEqual(out["validity"]["std"], np.sqrt(200.0))
        self.assertIsNone(out["causality"])
        self.assertNotIn("alt_yhat", out)
        restored = MetricsReport.from_dict(report(90.0).to_dict())
        self.assertEqual(restored.nll, Summary(1.0, 0.0))


class TestConfig(unittest.TestCase):
    """Run configuration loading."""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.output_dir = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_defaults_and_overrides(self):
        path = self.output_dir / "run.json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump({"dataset": {"csv": "d.csv", "schema": "s.json"}, "loss": {"lambda_neg": 0.2}}, f)
        config = RunConfig.load(path)
        self.assertEqual(config.csv_path, self.output_dir / "d.csv")
        self.assertEqual(config.loss["lambda_neg"], 0.2)
        self.assertEqual(config.loss["lambda_val"], 1.0)
        self.assertEqual(config.with_loss(validity=False).loss["validity"], False)
        self.assertEqual(config.to_dict()["loss"]["lambda_neg"], 0.2)

    def test_rejects_bad_configs(self):
        with self.assertRaises(ValueError):
            RunConfig.from_dict({"seed": 1})
        with self.assertRaises(ValueError):
            RunConfig.from_dict({"dataset": {"csv": "a"}})
        with self.assertRaises(ValueError):
            RunConfig.from_dict({"dataset": {"csv": "a", "schema": "b"}, "bogus": 1})
        with self.assertRaises(ValueError):
            RunConfig.from_dict({"dataset": {"csv": "a", "schema": "b"}, "loss": {"lambda_x": 1}})
        with self.assertRaises(FileNotFoundError):
            RunConfig.load(self.output_dir / "missing.json")

    def test_shipped_configs_load(self):
        root = Path(__file__).parent / "configs"
        for name in ("credit", "adult", "gmsc"):
            config = RunConfig.load(root / f"{name}.json")
            schema = Schema.load(config.schema_path)
            self.assertTrue(schema.names)
        self.assertEqual(RunConfig.load(root / "gmsc.json").classifier["threshold_policy"], "youden")


class TestExperiment(unittest.TestCase):
    """Folds and a small end-to-end run."""

    def setUp(self):
        self.temp_dir = tempfile.TemporaryDirectory()
        self.output_dir = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_folds_partition_rows(self):
        labels = np.array([0, 1] * 25)
        plan = make_folds(labels, 5, seed=0)
        test = np.sort(np.concatenate(plan.test))
        np.testing.assert_array_equal(test, np.arange(50))
        for train, held in zip(plan.train, plan.test):
            self.assertFalse(set(train) & set(held))
        self.assertNotEqual(stage_seed(0, 0, 1), stage_seed(0, 1, 1))
        self.assertEqual(stage_seed(0, 0, 1), stage_seed(0, 0, 1))

    def write_dataset(self):
        rng = np.random.default_rng(0)
        n = 400
        age = rng.integers(20, 61, size=n)
        job = rng.choice(["a", "b", "c"], size=n)
        level = rng.choice(["low", "mid", "high"], size=n)
        group = rng.choice(["g1", "g2"], size=n)
        score = np.array([["low", "mid", "high"].index(v) for v in level]) + (job == "a") + (age > 45)
        table = pd.DataFrame(
            {"age": age, "job": job, "level": level, "group": group, "label": (score >= 2).astype(int)}
        )
        table.to_csv(self.output_dir / "toy.csv", index=False)
        schema = {
            "target": "label",
            "positive_label": 1,
            "features": [
                {"name": "age", "kind": "numeric", "monotone": True},
                {"name": "job", "kind": "unordered_categorical"},
                {"name": "level", "kind": "ordered_categorical", "order": ["low", "mid", "high"]},
                {"name": "group", "kind": "unordered_categorical", "immutable": True},
            ],
            "causal_rules": [{"effect": "level", "cause": "age"}],
        }
        with open(self.output_dir / "toy_schema.json", "w", encoding="utf-8") as f:
            json.dump(schema, f)

    def small_config(self):
        return RunConfig.from_dict(
            {
                "dataset": {"csv": "toy.csv", "schema": "toy_schema.json"},
                "output_dir": "runs",
                "seed": 0,
                "discretizer": {"bins_per_numeric": 4},
                "classifier": {"epochs": 30, "batch_size": 32, "lr": 0.01},
                "circuit": {"min_rows": 50, "n_init": 2},
                "pool": {"target_size": 20, "max_draws": 20000, "draw_batch": 256},
                "encoder": {"k": 3, "psi_hidden": [4, 4], "embed_dim": 2},
                "generator": {"hidden": [8, 8], "epochs": 2, "batch_size": 8, "steps_per_epoch": 2},
                "evaluation": {"folds": 2, "max_denied": 10},
            },
            base_dir=self.output_dir,
        )

    def test_prepare_writes_code_tables(self):
        self.write_dataset()
        config = self.small_config()
        runner = ExperimentRunner(config)
        plan = runner.prepare()
        raw = pd.read_csv(self.output_dir / "toy.csv")
        for k in range(plan.n_folds):
            fold = config.output_dir / f"fold_{k}"
            codes = pd.read_csv(fold / "codes.csv")
            self.assertEqual(list(codes.columns), ["age", "job", "level", "group", "label", "split", "row"])
            self.assertEqual(sorted(codes["row"]), list(range(len(raw))))
            self.assertEqual((codes["split"] == "test").sum(), len(plan.test[k]))
            np.testing.assert_array_equal(codes["label"], raw["label"].to_numpy()[codes["row"]])

            disc = Discretizer.load(fold / "discretizer.json")
            features = codes[disc.names].to_numpy()
            self.assertTrue(((features >= 0) & (features < np.array(disc.cardinalities))).all())
            test_rows = codes[codes["split"] == "test"].sort_values("row")
            np.testing.assert_array_equal(
                test_rows[disc.names].to_numpy(),
                disc.transform(raw.iloc[test_rows["row"].to_numpy()].reset_index(drop=True)),
            )

    def test_end_to_end(self):
        self.write_dataset()
        config = self.small_config()
        report = ExperimentRunner(config).run()

        self.assertTrue((config.output_dir / "report.json").exists())
        self.assertTrue((config.output_dir / "records.csv").exists())
        post = report["aggregate"][POST]
        pre = report["aggregate"][PRE]
        self.assertEqual(post["actionability"]["mean"], 100.0)
        self.assertEqual(post["causality"]["mean"], 100.0)
        self.assertGreaterEqual(post["validity"]["mean"], pre["validity"]["mean"])
        self.assertLessEqual(post["sparsity"]["mean"], pre["sparsity"]["mean"])
        for fold in report["folds"]:
            self.assertGreaterEqual(fold["diagnostics"]["coverage"], fold["diagnostics"]["fidelity"])

        text = format_text(report_tables(report))
        self.assertIn("PAR (+LS)", text)
        docx = write_docx(report, self.output_dir / "report.docx")
        self.assertTrue(docx.exists())
        document = Document(str(docx))
        fonts = {
            document.styles[name].font.name
            for name in ("Title", "Heading 1", "Heading 2", "Normal", "Report Note")
        }
        self.assertEqual(fonts, set(styles.FONTS.values()))

        summary = ablate(config, [{"name": "full"}, {"name": "no_validity", "validity": False}])
        self.assertEqual([row["name"] for row in summary["rows"]], ["full", "no_validity"])
        self.assertTrue((config.output_dir / "ablation.json").exists())
        self.assertIn("Ablation", report_tables(summary))

        self.assertEqual(main(["report", str(config.output_dir / "report.json")]), 0)

    def test_cli_missing_config(self):
        self.assertEqual(main(["prepare", "-c", str(self.output_dir / "missing.json")]), 1)


if __name__ == "__main__":
    unittest.main()
