"""Concept-based explanations (TCAV) for EEG classifiers."""

__version__ = "0.1.0"

from .cav import Cav, CavHyper, train_cav
from .concepts import ConceptDataset
from .dsp import PreprocessConfig, Window, design_firwin, preprocess
from .edf import EegRecording, parse_edf, read_edf
from .inverse import LeadField, eloreta
from .model import Bottleneck, LhbConfig, LhbWeights, forward, init_weights
from .stats import mann_whitney_u, paired_t
from .tcav import TcavHyper, TcavResult, run_tcav, sensitivity, tcav_score

__all__ = [
    "Bottleneck",
    "Cav",
    "CavHyper",
    "ConceptDataset",
    "EegRecording",
    "LeadField",
    "LhbConfig",
    "LhbWeights",
    "PreprocessConfig",
    "TcavHyper",
    "TcavResult",
    "Window",
    "design_firwin",
    "eloreta",
    "forward",
    "init_weights",
    "mann_whitney_u",
    "paired_t",
    "parse_edf",
    "preprocess",
    "read_edf",
    "run_tcav",
    "sensitivity",
    "tcav_score",
    "train_cav",
]
