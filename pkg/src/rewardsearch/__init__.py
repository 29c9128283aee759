"""Reward-program search for cooperative multi-agent RL in an Overcooked-style kitchen."""

from .diagnostics import DiagnosticTuple, RolloutTrace, diagnose
from .dsl import GRAMMAR, CompiledProgram, ValidityReport, Verdict, check, compile_program, parse
from .env import BUILTIN_LAYOUTS, FEATURE_SCHEMA, Action, Overcooked, load_layout
from .mappo import TrainConfig, evaluate_sparse, train_candidate
from .search import CandidateRecord, SearchConfig, run_search, select_best

__version__ = "0.1.0"
