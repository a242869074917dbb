"""Deep face-recognition toolkit: hand-written CNN layers with manual
backpropagation, identification + verification supervision, region-ensemble
feature extraction, PCA + Joint Bayesian scoring and the verification /
identification protocols, at desk scale.
"""

from .config import PipelineConfig, load_config, parse_config
from .errors import DeepIDError
from .kernels import BACKEND
from .nets import ScaleConfig, build, build_deepid2plus, build_deepid3_net1, build_deepid3_net2, extract_feature
from .pipeline import run_pipeline
from .recognition import jb_fit, jb_score, pca_fit, pca_transform
from .tensor import Rng
from .training import TrainConfig, train
from .weights import load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "DeepIDError", "PipelineConfig", "Rng", "ScaleConfig", "TrainConfig", "build", "build_deepid2plus",
    "build_deepid3_net1", "build_deepid3_net2", "extract_feature", "jb_fit", "jb_score", "load_config",
    "load_weights", "parse_config", "pca_fit", "pca_transform", "run_pipeline", "save_weights", "train",
]
