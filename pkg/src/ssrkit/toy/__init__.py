"""Toy domains, model, training loops and the staged paradigms."""
from .domains import DOMAINS, DomainSpec, SyntheticConfig, SyntheticSuite, build_suite, make_synthetic_domains
from .model import LabeledBatch, ModelSpec, ToyModel, length_weights, loss_square_avg
from .pipeline import (PARADIGMS, PipelineResult, SsrConfig, joint_baseline, run_paradigm,
                       sequential_baseline, ssr_pipeline, transfer_routes)
from .train import sft_train, train_steps

__all__ = [
    "DOMAINS", "DomainSpec", "SyntheticConfig", "SyntheticSuite", "build_suite", "make_synthetic_domains",
    "LabeledBatch", "ModelSpec", "ToyModel", "length_weights", "loss_square_avg", "PARADIGMS", "PipelineResult",
    "SsrConfig", "joint_baseline", "run_paradigm", "sequential_baseline", "ssr_pipeline",
    "transfer_routes", "sft_train", "train_steps",
]
