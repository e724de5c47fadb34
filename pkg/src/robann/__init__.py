"""Adversarially robust approximate nearest neighbor search over LSH."""

from .budget import TIMEOUT, BudgetExhausted, WorkBudget
from .dp import advanced_composition, decider_constants, laplace_sample, subsampling_amplification
from .fair import FairIndex, FairLSH, fair_query
from .forall import NOT_COVERED, Covering, DiscretizedANN, ForAllHammingANN, rho_prime
from .harness import GameConfig, Transcript, fairness_test, failure_rate, planted_instance, run_game
from .lsh import AmplifiedLshIndex, ClassicLSH, LshParams, derive_params
from .metric import Dataset, Metric, Point, ProblemParams, ball, distance, oracle_ann_verdicts
from .robust import (
    AnnuliANN,
    BucketedANN,
    MedianAnnuliANN,
    RelaxedFairANN,
    RobustDecider,
    exponent_optimize,
    median_amplify,
)

__version__ = "0.1.0"
