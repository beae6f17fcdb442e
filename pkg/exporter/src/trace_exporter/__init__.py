"""Bridge from real causal LMs to knnadapt trace files."""

__version__ = "0.1.0"

from .export import ExportConfig, export, export_frequencies
from .model import ModelConfig, TinyCausalLM, load_model, pretrain, save_model
from .tokenizer import WordTokenizer

__all__ = [
    "ExportConfig",
    "ModelConfig",
    "TinyCausalLM",
    "WordTokenizer",
    "export",
    "export_frequencies",
    "load_model",
    "pretrain",
    "save_model",
    "__version__",
]
