"""Knowledge-augmented instruction-following language model for structured chest X-ray findings."""

from .errors import CxrlmError, DataError, NumericError
from .findings import Finding, StructuredImageRepr, parse_findings, serialize_findings
from .kg import Concept, ConceptMatchSet, KnowledgeGraph, load_kg, save_kg
from .model import LanguageModel, ModelConfig, ModelParams, init_params
from .tokenizer import Vocabulary, build_vocab
from .training import TrainConfig, train
from .decode import DecodeConfig, decode
from .data import GeneratorConfig, InstructionExample, build_kg, generate_dataset
from .evaluation import MetricReport, ablation_run, evaluate

__version__ = "0.1.0"
