"""Sample reconstruction against federated learning protected by local
differential privacy, at desk scale.

The package builds a malicious global model (zero-gradient convolution,
weight/bias separation layers, metric layer, small target classifier),
simulates clipped and perturbed local training, and recovers the victim's
masked samples from a single round of protected gradients.
"""

from ldprecon.attack import AttackResult, SampleReconstructor, run_attack
from ldprecon.core import SeededRng
from ldprecon.data import ImageBatch, gen_synthetic_batch
from ldprecon.ldp import LdpConfig, protect
from ldprecon.model import GradientBundle, InferenceStructure, build_structure
from ldprecon.optimize import MetricDescent, ObjectiveWeights

__version__ = "0.1.0"

__all__ = [
    "AttackResult",
    "GradientBundle",
    "ImageBatch",
    "InferenceStructure",
    "LdpConfig",
    "MetricDescent",
    "ObjectiveWeights",
    "SampleReconstructor",
    "SeededRng",
    "build_structure",
    "gen_synthetic_batch",
    "protect",
    "run_attack",
]
