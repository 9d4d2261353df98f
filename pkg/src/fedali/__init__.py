"""Federated learning with prototype alignment layers, on a small numpy autodiff core."""

from .alp import AlpConfig, PrototypeBank
from .data import Dataset, SynthConfig, dirichlet_partition, stratified_split, synth_generate
from .evalharness import ScoreReport, macro_f1, run_experiment
from .federation import Strategy, comm_cost, run_round
from .model import DESK, FULL_SCALE, ModelConfig, TrainConfig, build, forward, predict, train_local

__version__ = "0.1.0"
