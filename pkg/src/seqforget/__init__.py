"""Sequential unlearning for a small from-scratch decoder-only language model.

The pipeline trains on a retain corpus (positive fine-tuning), applies
layer-restricted gradient ascent on a forget corpus (negative fine-tuning),
then stabilizes with early-stopped retain fine-tuning. Everything runs on
NumPy with optional Numba kernels; see the README for the command-line
interface.
"""

from .config import RunConfig, resolve_config
from .data import (BOS_ID, EOS_ID, IGNORE_INDEX, PAD_ID, VOCAB_SIZE,
                   CorpusSpec, Example, augment_with_refusals, collate,
                   detokenize, generate_forget, generate_retain, load_corpus,
                   save_corpus, split_train_val, tokenize)
from .errors import SeqforgetError
from .evaluation import (EvalReport, Probe, ProbeSuite, build_probe_suite,
                         compare_capacity, detect_sensitive, evaluate_model,
                         mean_nll, perplexity, probe_emission_rate)
from .model import (FreezePolicy, ModelConfig, TransformerModel, init_model,
                    select_trainable)
from .persistence import (append_metrics, load_checkpoint, read_metrics,
                          save_checkpoint)
from .trainer import (EarlyStop, OptimizerState, PhaseConfig, RunReport,
                      run_joint_baseline, run_negative_phase, run_pipeline,
                      run_positive_phase, run_stabilization)

__version__ = "0.1.0"

__all__ = [
    "BOS_ID", "EOS_ID", "IGNORE_INDEX", "PAD_ID", "VOCAB_SIZE",
    "CorpusSpec", "EarlyStop", "EvalReport", "Example", "FreezePolicy",
    "ModelConfig", "OptimizerState", "PhaseConfig", "Probe", "ProbeSuite",
    "RunConfig", "RunReport", "SeqforgetError", "TransformerModel",
    "append_metrics", "augment_with_refusals", "build_probe_suite",
    "collate", "compare_capacity",
    "detect_sensitive", "detokenize", "evaluate_model", "generate_forget",
    "generate_retain", "init_model", "load_checkpoint", "load_corpus",
    "mean_nll", "perplexity", "probe_emission_rate", "read_metrics",
    "resolve_config", "run_joint_baseline", "run_negative_phase",
    "run_pipeline", "run_positive_phase", "run_stabilization", "save_checkpoint",
    "save_corpus", "select_trainable", "split_train_val", "tokenize",
    "__version__",
]
