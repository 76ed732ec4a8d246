"""Nonbipartite matching that strengthens an instrument, with exact
paired-outcome inference and sensitivity analysis."""

from .cohort import Cohort, Schema, Unit, compute_alos, ingest, outcomes_sealed, stratify
from .distance import DistanceMatrix, robust_mahalanobis
from .inference import (AttributableHypothesis, PairedOutcomeTable, adjust_table, amplify,
                        attributable_test, mcnemar_test, tabulate, three_part_test)
from .ipmodel import BinaryMatchProgram, export_mps, new_program
from .solver import MatchSolution, SolverLimits, solve

__version__ = "0.1.0"
