"""Low-rank adaptation trained under filter-scaled random weight perturbations."""
from ._accel import backend
from .model import ModelSpec, build_model, lora_init, merge_weights
from .perturb import PerturbationRecord, SigmaSchedule, sigma_at
from .rng import RngStream, seeded_normal
from .tensor import Tensor, backward

__version__ = "0.1.0"
