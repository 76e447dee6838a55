"""Toolkit for diagnosing and repairing token-flipping in weight-quantized
autoregressive language models.

The pipeline: train a small byte-level transformer, quantize it with
per-channel round-to-nearest, measure where and why its generations drift
from the full-precision baseline, build a preference dataset from the two
policies' own outputs, and align the quantized policy back to the baseline
with quantization-aware preference optimization.
"""

__version__ = "0.1.0"

from .model import ModelCheckpoint, ModelConfig, KVCache, init_checkpoint
from .quant import QuantSpec, QuantizedTensor, quantize, dequantize, fake_quant_forward
from .decode import DecodeParams, GenerationTrace, greedy_decode, beam_decode
from .prefs import PreferenceDataset, PreferenceTriplet, build_dataset
from .train import LossSpec, TrainConfig
from .corpus import Corpus, ingest, synth_restricted

__all__ = [
    "ModelCheckpoint",
    "ModelConfig",
    "KVCache",
    "init_checkpoint",
    "QuantSpec",
    "QuantizedTensor",
    "quantize",
    "dequantize",
    "fake_quant_forward",
    "DecodeParams",
    "GenerationTrace",
    "greedy_decode",
    "beam_decode",
    "PreferenceDataset",
    "PreferenceTriplet",
    "build_dataset",
    "LossSpec",
    "TrainConfig",
    "Corpus",
    "ingest",
    "synth_restricted",
    "__version__",
]
