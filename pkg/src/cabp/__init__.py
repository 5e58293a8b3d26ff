"""CNN training with average-pooled saved activations.

The forward pass, input gradients and bias gradients are exact; only the
weight gradients of compressed convolutions see the pooled surrogate of
their input.  Includes a byte-level memory ledger, a static per-layer
memory model and a gradient-similarity analyzer.
"""

from cabp.analysis import GradSimilarityReport, cosine, first_step_similarity, one_epoch_similarity
from cabp.autodiff import Tape
from cabp.checkpoint import load_checkpoint, save_checkpoint
from cabp.compression import CompressedActivation, compress, inflate
from cabp.data import Dataset, load_dataset, synthetic_cifar
from cabp.ledger import MemoryLedger, PointsOfInterest
from cabp.models import CompressionPolicy, ResNetConfig, build_network, build_resnet18, build_resnet_cifar
from cabp.nn.kernels import Conv2dSpec, SavePolicy
from cabp.static_model import static_model
from cabp.tensor import AllocCategory, Tensor
from cabp.train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "AllocCategory",
    "CompressedActivation",
    "CompressionPolicy",
    "Conv2dSpec",
    "Dataset",
    "GradSimilarityReport",
    "MemoryLedger",
    "PointsOfInterest",
    "ResNetConfig",
    "SavePolicy",
    "Tape",
    "Tensor",
    "TrainConfig",
    "build_network",
    "build_resnet18",
    "build_resnet_cifar",
    "compress",
    "cosine",
    "first_step_similarity",
    "inflate",
    "load_checkpoint",
    "load_dataset",
    "one_epoch_similarity",
    "save_checkpoint",
    "static_model",
    "synthetic_cifar",
    "train",
]
