"""Softmax1 ("outlier-free") attention lab: toy transformers, outlier diagnostics,
simulated quantisation and low-rank adapter algebra in plain numpy."""

__version__ = "0.1.0"

from .attention import AttentionVariant, BlockMode, ModelConfig, model_forward, softmax, softmax1
from .checkpoint import Checkpoint, load, save
from .data import CorpusSpec, Vocab, bpe_train, decode, encode, gen_corpus
from .lora import (
    AdapterSet,
    LoraAdapter,
    apply_adapters,
    check_nonsingularity,
    construct_adapters,
    functionality_gap,
    lemma_product_update,
    loftq_init,
    lra,
    verify_theorem,
)
from .outlier_metrics import OutlierReport, collect_report, kurtosis
from .quantizer import QuantSpec, calibrate, fake_quant, quantize_model, smoothquant_migrate
from .training import TrainConfig, continue_training, finetune_classifier, mcc, pretrain, surgery

__all__ = [
    "AdapterSet", "AttentionVariant", "BlockMode", "Checkpoint", "CorpusSpec", "LoraAdapter", "ModelConfig",
    "OutlierReport", "QuantSpec", "TrainConfig", "Vocab", "apply_adapters", "bpe_train", "calibrate",
    "check_nonsingularity", "collect_report", "construct_adapters", "continue_training", "decode", "encode",
    "fake_quant", "finetune_classifier", "functionality_gap", "gen_corpus", "kurtosis", "lemma_product_update",
    "load", "loftq_init", "lra", "mcc", "model_forward", "pretrain", "quantize_model", "save",
    "smoothquant_migrate", "softmax", "softmax1", "surgery", "verify_theorem",
]
