"""Language-neuron detection, ablation scoring and neuron-targeted training
for small decoder-only transformers, in numpy with optional numba kernels."""

from ._backend import backend_name
from .ablation import ImportanceReport, agnostic_score, build_report, delta_ppl, importance, random_neurons
from .container import load_model, save_model
from .corpus import LanguageCorpus, SynthSpec, load_corpus, synth_language, tokenize
from .detect import DetectionConfig, detect_language_neurons, layer_impacts, sequential_oracle
from .model import ModelBundle, ModelConfig, forward, init_random, perplexity
from .neurons import AblationMask, NeuronId, NeuronSet, Site
from .sets import LanguageNeuronProfile, classify, shared_ratio
from .training import GradientMask, TrainConfig, select_strategy, train_masked

__version__ = "0.1.0"

__all__ = [
    "AblationMask",
    "DetectionConfig",
    "GradientMask",
    "ImportanceReport",
    "LanguageCorpus",
    "LanguageNeuronProfile",
    "ModelBundle",
    "ModelConfig",
    "NeuronId",
    "NeuronSet",
    "Site",
    "SynthSpec",
    "TrainConfig",
    "agnostic_score",
    "backend_name",
    "build_report",
    "classify",
    "delta_ppl",
    "detect_language_neurons",
    "forward",
    "importance",
    "init_random",
    "layer_impacts",
    "load_corpus",
    "load_model",
    "perplexity",
    "random_neurons",
    "save_model",
    "select_strategy",
    "sequential_oracle",
    "shared_ratio",
    "synth_language",
    "tokenize",
    "train_masked",
]
