"""Multi-task semantic multiplexing over a simulated MIMO-OFDM link.

Several classification inputs are bound to quasi-orthogonal keys, superposed
into one latent, sent through a CSI-conditioned stochastic precoder, an OFDM
modem and a fading channel, and separated again at the receiver.
"""

from .channel import ChannelModel, ChannelRealization, Csi, estimate_csi, sample_realization
from .config import ExperimentConfig
from .data import Dataset, synthetic
from .model import SemanticMux
from .modem import OfdmConfig
from .nets import ArchConfig
from .pipeline import AdaptConfig, TrainConfig, run_dynamic_experiment, train

__all__ = [
    "AdaptConfig",
    "ArchConfig",
    "ChannelModel",
    "ChannelRealization",
    "Csi",
    "Dataset",
    "ExperimentConfig",
    "OfdmConfig",
    "SemanticMux",
    "TrainConfig",
    "estimate_csi",
    "run_dynamic_experiment",
    "sample_realization",
    "synthetic",
    "train",
]
__version__ = "0.1.0"
