"""
pcrecourse - Plausible algorithmic recourse with probabilistic circuits.

Class-conditional circuits learned on discretized data supply exact
likelihoods and sampling; a constraint-masked generator proposes
counterfactuals for denied instances, and a local search repairs and
sparsifies them.
"""

__version__ = "0.1.0"

from pcrecourse.circuit import Circuit, CircuitBuilder, load_circuit, save_circuit
from pcrecourse.constraints import ConstraintSet, feasible
from pcrecourse.data import Discretizer, Schema, fit_discretizer
from pcrecourse.experiment import ExperimentRunner, ablate, run_experiment
from pcrecourse.learnspn import learn_structure
from pcrecourse.recourse import LossWeights, RecourseModel, train_generator
from pcrecourse.refine import refine
from pcrecourse.utils.config import RunConfig

__all__ = [
    "Circuit",
    "CircuitBuilder",
    "load_circuit",
    "save_circuit",
    "ConstraintSet",
    "feasible",
    "Discretizer",
    "Schema",
    "fit_discretizer",
    "ExperimentRunner",
    "ablate",
    "run_experiment",
    "learn_structure",
    "LossWeights",
    "RecourseModel",
    "train_generator",
    "refine",
    "RunConfig",
]
