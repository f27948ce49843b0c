"""Fold-based experiment runner.

Each stage reads the artifacts of the previous one from
``<output_dir>/fold_<k>/`` and writes its own next to them, so the CLI can
run stages one by one or the whole pipeline at once.
"""

import json
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from sklearn.model_selection import StratifiedKFold, train_test_split
from typing_extensions import Self

from pcrecourse.circuit import Circuit, load_circuit, save_circuit
from pcrecourse.constraints import ConstraintSet
from pcrecourse.data import (
    Discretizer,
    Schema,
    bin_diagnostics,
    fit_discretizer,
    load_table,
    one_hot_batch,
)
from pcrecourse.learnspn import learn_structure
from pcrecourse.metrics import (
    POST,
    PRE,
    MetricsReport,
    RecourseRecord,
    aggregate,
    evaluate_records,
    mad_weights,
    similarity_distance,
)
from pcrecourse.neural import (
    MlpModel,
    load_model,
    predict_proba,
    save_model,
    select_threshold_youden,
    train_classifier,
)
from pcrecourse.recourse import (
    LossWeights,
    RecourseModel,
    build_pool,
    neighborhood_logit_change,
    train_generator,
)
from pcrecourse.refine import RefineConfig, refine
from pcrecourse.utils.config import RunConfig
from pcrecourse.utils.logger import logger
from pcrecourse.utils.paths import ensure_dir, fold_dir

# Stream ids that keep every stage's random numbers independent
STREAM_CLASSIFIER = 1
STREAM_CIRCUITS = 2
STREAM_POOL = 3
STREAM_GENERATOR = 4
STREAM_SPLIT = 5


@dataclass(frozen=True)
class FoldPlan:
    """Stratified folds; test sets partition the dataset."""

    n_folds: int
    seed: int
    train: List[np.ndarray]
    test: List[np.ndarray]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_folds": self.n_folds,
            "seed": self.seed,
            "train": [t.tolist() for t in self.train],
            "test": [t.tolist() for t in self.test],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> Self:
        return cls(
            n_folds=int(data["n_folds"]),
            seed=int(data["seed"]),
            train=[np.asarray(t, dtype=np.int64) for t in data["train"]],
            test=[np.asarray(t, dtype=np.int64) for t in data["test"]],
        )


def make_folds(labels: np.ndarray, n_folds: int = 5, seed: int = 0) -> FoldPlan:
    """Stratified K-fold split of row indices, shuffled under ``seed``."""
    labels = np.asarray(labels)
    splitter = StratifiedKFold(n_splits=n_folds, shuffle=True, random_state=seed)
    train, test = [], []
    for train_idx, test_idx in splitter.split(np.zeros(len(labels)), labels):
        train.append(np.sort(train_idx))
        test.append(np.sort(test_idx))
    return FoldPlan(n_folds, seed, train, test)


def stage_seed(seed: int, fold: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, fold, stream]).generate_state(1)[0])


class FoldArtifacts:
    """File locations of one fold."""

    def __init__(self, phase_one_dir: Path, output_dir: Path, fold: int):
        self.fold = fold
        self.base = fold_dir(phase_one_dir, fold)
        self.out = fold_dir(output_dir, fold)

    @property
    def discretizer(self) -> Path:
        return self.base / "discretizer.json"

    @property
    def diagnostics(self) -> Path:
        return self.base / "diagnostics.json"

    @property
    def data(self) -> Path:
        return self.base / "data.npz"

    @property
    def codes_csv(self) -> Path:
        return self.base / "codes.csv"

    @property
    def classifier(self) -> Path:
        return self.base / "classifier.npz"

    @property
    def classifier_alt(self) -> Path:
        return self.base / "classifier_alt.npz"

    @property
    def p_plus(self) -> Path:
        return self.base / "p_plus.circuit"

    @property
    def p_minus(self) -> Path:
        return self.base / "p_minus.circuit"

    @property
    def generator_dir(self) -> Path:
        return self.out / "generator"

    @property
    def history(self) -> Path:
        return self.out / "generator_history.json"

    @property
    def records(self) -> Path:
        return self.out / "records.npz"


class ExperimentRunner:
    """Runs the pipeline stages for every fold of one configuration."""

    def __init__(self, config: RunConfig, phase_one_dir: Optional[Path] = None):
        self.config = config
        self.output_dir = ensure_dir(config.output_dir)
        self.phase_one_dir = ensure_dir(phase_one_dir) if phase_one_dir else self.output_dir
        self.schema = Schema.load(config.schema_path)

    @property
    def folds_path(self) -> Path:
        return self.phase_one_dir / "folds.json"

    def fold(self, k: int) -> FoldArtifacts:
        return FoldArtifacts(self.phase_one_dir, self.output_dir, k)

    def fold_ids(self) -> List[int]:
        return list(range(self.load_plan().n_folds))

    def load_plan(self) -> FoldPlan:
        with open(self.folds_path, "r", encoding="utf-8") as f:
            return FoldPlan.from_dict(json.load(f))

    def prepare(self) -> FoldPlan:
        """Split folds, fit a discretizer per training split and encode both splits."""
        table, labels = load_table(self.config.csv_path, self.schema)
        plan = make_folds(labels, self.config.evaluation["folds"], self.config.seed)
        _write_json(self.folds_path, plan.to_dict())
        for k in range(plan.n_folds):
            art = self.fold(k)
            train_raw = table.iloc[plan.train[k]].reset_index(drop=True)
            test_raw = table.iloc[plan.test[k]].reset_index(drop=True)
            disc = fit_discretizer(
                train_raw,
                self.schema,
                bins_per_numeric=self.config.discretizer["bins_per_numeric"],
                discrete_threshold=self.config.discretizer["discrete_threshold"],
            )
            disc.save(art.discretizer)
            diagnostics = bin_diagnostics(disc, test_raw)
            _write_json(art.diagnostics, diagnostics.to_dict())
            train_codes = disc.transform(train_raw)
            test_codes = disc.transform(test_raw)
            with open(art.data, "wb") as f:
                np.savez(
                    f,
                    train_codes=train_codes,
                    train_labels=labels[plan.train[k]],
                    test_codes=test_codes,
                    test_labels=labels[plan.test[k]],
                    test_index=plan.test[k],
                )
            pd.concat(
                [
                    self._codes_frame(train_codes, labels[plan.train[k]], plan.train[k], "train"),
                    self._codes_frame(test_codes, labels[plan.test[k]], plan.test[k], "test"),
                ],
                ignore_index=True,
            ).to_csv(art.codes_csv, index=False)
            logger.info(
                f"Fold {k}: {len(plan.train[k])} train / {len(plan.test[k])} test rows, "
                f"coverage {diagnostics.coverage:.4f}, fidelity {diagnostics.fidelity:.4f}"
            )
        return plan

    def _codes_frame(self, codes: np.ndarray, labels: np.ndarray, rows: np.ndarray, split: str) -> pd.DataFrame:
        """Integer codes under the schema column names, plus label, split and source row."""
        frame = pd.DataFrame(codes, columns=self.schema.names)
        frame[self.schema.target or "label"] = labels
        frame["split"] = split
        frame["row"] = rows
        return frame

    def train_classifier(self, k: int, youden: Optional[bool] = None) -> float:
        """Train the primary and alternative classifiers; returns the threshold."""
        art = self.fold(k)
        cfg = self.config.classifier
        data = _load_data(art)
        x = one_hot_batch(data["train_codes"], self._discretizer(k).cardinalities)
        y = data["train_labels"]
        use_youden = cfg["threshold_policy"] == "youden" if youden is None else youden
        seed = stage_seed(self.config.seed, k, STREAM_CLASSIFIER)
        kwargs = dict(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], hidden=cfg["hidden"])

        manifest: Dict[str, Any] = {"seed": seed, "epochs": cfg["epochs"], "policy": "fixed"}
        if use_youden:
            split_seed = stage_seed(self.config.seed, k, STREAM_SPLIT)
            fit_idx, val_idx = train_test_split(
                np.arange(len(y)),
                test_size=cfg["validation_fraction"],
                stratify=y,
                random_state=split_seed,
            )
            model = train_classifier(x[fit_idx], y[fit_idx], seed=seed, **kwargs)
            tau = select_threshold_youden(predict_proba(model, x[val_idx]), y[val_idx])
            manifest.update(policy="youden", split_seed=split_seed, validation_rows=len(val_idx))
        else:
            fit_idx = np.arange(len(y))
            model = train_classifier(x, y, seed=seed, **kwargs)
            tau = float(cfg["tau"])
        manifest["tau"] = tau
        save_model(model, art.classifier, manifest)

        alt_seed = seed + int(cfg["alt_seed_offset"])
        alt = train_classifier(x[fit_idx], y[fit_idx], seed=alt_seed, **kwargs)
        save_model(alt, art.classifier_alt, {"seed": alt_seed, "epochs": cfg["epochs"], "tau": tau})
        logger.info(f"Fold {k}: classifier trained, tau={tau:.2f} ({manifest['policy']})")
        return tau

    def train_circuits(self, k: int) -> None:
        """Learn ``p+`` and ``p-`` on the ground-truth label split of the training fold."""
        art = self.fold(k)
        cfg = self.config.circuit
        data = _load_data(art)
        cards = self._discretizer(k).cardinalities
        rng = np.random.default_rng(stage_seed(self.config.seed, k, STREAM_CIRCUITS))
        for label, path in ((1, art.p_plus), (0, art.p_minus)):
            rows = data["train_codes"][data["train_labels"] == label]
            circuit = learn_structure(
                rows,
                cards,
                min_rows=cfg["min_rows"],
                min_cols=cfg["min_cols"],
                rng=rng,
                alpha=cfg["alpha"],
                significance=cfg["significance"],
                n_clusters=cfg["n_clusters"],
                n_init=cfg["n_init"],
            )
            save_circuit(circuit, path)
        logger.info(f"Fold {k}: circuits saved to {art.base}")

    def train_generator(self, k: int) -> RecourseModel:
        """Build the pool and train generator and encoder from Phase-I artifacts only."""
        art = self.fold(k)
        gen = self.config.generator
        classifier, tau = self._classifier(k)
        p_plus, p_minus = load_circuit(art.p_plus), load_circuit(art.p_minus)
        cs = self._constraints(k)
        pool = build_pool(
            p_plus,
            classifier,
            tau,
            self.config.pool["target_size"],
            self.config.pool["max_draws"],
            np.random.default_rng(stage_seed(self.config.seed, k, STREAM_POOL)),
            draw_batch=self.config.pool["draw_batch"],
        )
        rng = np.random.default_rng(stage_seed(self.config.seed, k, STREAM_GENERATOR))
        model = RecourseModel.init(pool, p_plus, cs, rng, self.config.encoder, gen["hidden"])
        weights = LossWeights.from_config(self.config.loss)
        history = train_generator(
            model,
            p_minus,
            classifier,
            tau,
            weights,
            rng,
            epochs=gen["epochs"],
            batch_size=gen["batch_size"],
            steps_per_epoch=gen["steps_per_epoch"],
            lr=gen["lr"],
            neg_grad_clip=gen["neg_grad_clip"],
            max_draws=gen["max_draws"],
        )
        model.save(art.generator_dir)
        _write_json(
            art.history,
            {
                "seed": self.config.seed,
                "loss": dict(self.config.loss),
                "pool": {"size": pool.size, "draws": pool.draws, "acceptance_rate": pool.acceptance_rate},
                **history.to_dict(),
            },
        )
        return model

    def generate(self, k: int, local_search: Optional[bool] = None) -> List[RecourseRecord]:
        """Counterfactuals for the denied test factuals of one fold."""
        art = self.fold(k)
        local_search = self.config.refine["enabled"] if local_search is None else local_search
        classifier, tau = self._classifier(k)
        p_plus = load_circuit(art.p_plus)
        cs = self._constraints(k)
        model = RecourseModel.load(art.generator_dir, p_plus, cs)
        data = _load_data(art)
        codes = data["test_codes"]
        denied = np.flatnonzero(predict_proba(classifier, one_hot_batch(codes, cs.cardinalities)) < tau)
        denied = denied[: self.config.evaluation["max_denied"]]
        if denied.size == 0:
            art.records.unlink(missing_ok=True)
            logger.warning(f"Fold {k}: no denied test factuals, skipping")
            return []

        factuals = codes[denied]
        pre, t_gen = model.generate_timed(factuals)
        post = pre.copy()
        t_ref = np.zeros(len(denied))
        if local_search:
            cfg = RefineConfig(tau=tau, delta_max=self.config.refine["delta_max"])
            for i in range(len(denied)):
                start = time.perf_counter()
                post[i] = refine(pre[i], factuals[i], cs, classifier, tau, p_plus, cfg)
                t_ref[i] = time.perf_counter() - start
        with open(art.records, "wb") as f:
            np.savez(
                f,
                index=data["test_index"][denied],
                factual=factuals,
                pre=pre,
                post=post,
                time_generate=t_gen,
                time_refine=t_ref,
                local_search=np.array(local_search),
            )
        logger.info(f"Fold {k}: generated {len(denied)} counterfactuals (local search {'on' if local_search else 'off'})")
        return _records_from(art.records)

    def evaluate(self) -> Dict[str, Any]:
        """Score every fold before and after local search; writes report.json and records.csv."""
        folds, pre_reports, post_reports, rows = [], [], [], []
        for k in self.fold_ids():
            art = self.fold(k)
            if not art.records.exists():
                logger.warning(f"Fold {k}: no records, skipped")
                continue
            records = _records_from(art.records)
            classifier, tau = self._classifier(k)
            alt, _ = load_model(art.classifier_alt)
            p_plus = load_circuit(art.p_plus)
            cs = self._constraints(k)
            disc = self._discretizer(k)
            mad = mad_weights(_load_data(art)["train_codes"])
            reports = {
                stage: evaluate_records(records, classifier, tau, p_plus, cs, mad, stage, alt)
                for stage in (PRE, POST)
            }
            pre_reports.append(reports[PRE])
            post_reports.append(reports[POST])
            entry = {
                "fold": k,
                "tau": tau,
                "n_denied": len(records),
                "diagnostics": _read_json(art.diagnostics),
                PRE: reports[PRE].to_dict(),
                POST: reports[POST].to_dict(),
                "deltas": _deltas(reports[PRE], reports[POST]),
            }
            model = RecourseModel.load(art.generator_dir, p_plus, cs)
            if model.use_neighborhood:
                factuals = np.stack([r.factual for r in records])
                entry["logit_change"] = neighborhood_logit_change(
                    model, factuals, self.config.evaluation["logit_change_threshold"]
                ).to_dict()
            folds.append(entry)
            rows.extend(_record_rows(k, records, classifier, p_plus, cs, disc, mad))

        if not folds:
            raise ValueError("No fold produced records; run generate first")
        report = {
            "config": self.config.to_dict(),
            "folds": folds,
            "aggregate": {PRE: aggregate(pre_reports), POST: aggregate(post_reports)},
        }
        _write_json(self.output_dir / "report.json", report)
        pd.DataFrame(rows).to_csv(self.output_dir / "records.csv", index=False)
        logger.info(f"Report written to {self.output_dir / 'report.json'}")
        return report

    def run(self, local_search: Optional[bool] = None) -> Dict[str, Any]:
        """Every stage for every fold."""
        try:
            plan = self.prepare()
            for k in range(plan.n_folds):
                logger.info(f"Starting fold {k + 1}/{plan.n_folds}")
                self.train_classifier(k)
                self.train_circuits(k)
                self.run_phase_two(k, local_search)
            return self.evaluate()
        except Exception as e:
            logger.error(f"Experiment failed: {str(e)}")
            raise

    def run_phase_two(self, k: int, local_search: Optional[bool] = None) -> None:
        self.train_generator(k)
        self.generate(k, local_search)

    def _discretizer(self, k: int) -> Discretizer:
        return Discretizer.load(self.fold(k).discretizer)

    def _constraints(self, k: int) -> ConstraintSet:
        return ConstraintSet.from_schema(self.schema, self._discretizer(k), self.config.loss["budget"])

    def _classifier(self, k: int):
        model, manifest = load_model(self.fold(k).classifier)
        return model, float(manifest["tau"])


def run_experiment(config: RunConfig, local_search: Optional[bool] = None) -> Dict[str, Any]:
    return ExperimentRunner(config).run(local_search)


def ablate(config: RunConfig, matrix: Optional[Sequence[Dict[str, Any]]] = None) -> Dict[str, Any]:
    """Retrain the generator for every toggle row on shared Phase-I artifacts.

    Phase-I artifacts (folds, discretizers, classifiers, circuits) must
    already exist under ``config.output_dir``. Each row writes to
    ``<output_dir>/ablation/<name>/``; the summary goes to ``ablation.json``.
    """
    matrix = config.ablation if matrix is None else matrix
    base = ExperimentRunner(config)
    if not base.folds_path.exists():
        raise FileNotFoundError(f"Run prepare, train-clf and train-pc first: {base.folds_path} missing")
    rows = []
    for row in matrix:
        toggles = {key: value for key, value in row.items() if key != "name"}
        name = row.get("name", "_".join(f"{k}-{v}" for k, v in toggles.items()) or "full")
        logger.info(f"Ablation row '{name}': {toggles}")
        row_config = replace(config.with_loss(**toggles), output_dir=config.output_dir / "ablation" / name)
        runner = ExperimentRunner(row_config, phase_one_dir=config.output_dir)
        for k in runner.fold_ids():
            runner.run_phase_two(k)
        report = runner.evaluate()
        rows.append({"name": name, "toggles": toggles, **report["aggregate"]})
    summary = {"rows": rows}
    _write_json(config.output_dir / "ablation.json", summary)
    return summary


def _deltas(pre: MetricsReport, post: MetricsReport) -> Dict[str, float]:
    return {
        "validity": post.validity - pre.validity,
        "nll": post.nll.mean - pre.nll.mean,
        "sparsity": post.sparsity.mean - pre.sparsity.mean,
        "similarity": post.similarity.mean - pre.similarity.mean,
    }


def _record_rows(
    k: int,
    records: Sequence[RecourseRecord],
    classifier: MlpModel,
    p_plus: Circuit,
    cs: ConstraintSet,
    disc: Discretizer,
    mad: np.ndarray,
) -> List[Dict[str, Any]]:
    factuals = np.stack([r.factual for r in records])
    rows = [{"fold": k, "index": r.index, "time_generate": r.time_generate, "time_refine": r.time_refine} for r in records]
    mutable = list(cs.mutable)
    for stage in (PRE, POST):
        cands = np.stack([r.candidate(stage) for r in records])
        scores = predict_proba(classifier, one_hot_batch(cands, cs.cardinalities))
        nll = -np.atleast_1d(p_plus.log_likelihood(cands))
        sim = similarity_distance(cands, factuals, mad, cs.ordered)
        sparsity = (cands[:, mutable] != factuals[:, mutable]).sum(axis=1)
        for i, row in enumerate(rows):
            row[f"{stage}_yhat"] = float(scores[i])
            row[f"{stage}_nll"] = float(nll[i])
            row[f"{stage}_similarity"] = float(sim[i])
            row[f"{stage}_sparsity"] = int(sparsity[i])
    for i, row in enumerate(rows):
        for j, name in enumerate(disc.names):
            row[f"factual:{name}"] = disc.describe(j, int(factuals[i, j]))
            row[f"post:{name}"] = disc.describe(j, int(records[i].post[j]))
    return rows


def _records_from(path: Path) -> List[RecourseRecord]:
    with np.load(path, allow_pickle=False) as data:
        return [
            RecourseRecord(
                index=int(data["index"][i]),
                factual=data["factual"][i],
                pre=data["pre"][i],
                post=data["post"][i],
                time_generate=float(data["time_generate"][i]),
                time_refine=float(data["time_refine"][i]),
            )
            for i in range(len(data["index"]))
        ]


def _load_data(art: FoldArtifacts) -> Dict[str, np.ndarray]:
    with np.load(art.data, allow_pickle=False) as data:
        return {key: data[key] for key in data.files}


def _write_json(path: Path, payload: Dict[str, Any]) -> Path:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
    return path


def _read_json(path: Path) -> Dict[str, Any]:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)
