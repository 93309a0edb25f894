"""mflab: finite-width mean-field networks, their particle MF limit, and coupling diagnostics."""

from importlib.metadata import PackageNotFoundError, version

from .core import (ActivationSpec, DataModel, LossSpec, Panel, Sample, Schedule, ScheduleSpec,
                   make_rng, split_seed)
from .diagnostics import (coupling_distance, convergence_metrics, diversity_roundtrip, esssup_dwL,
                          grad_check, population_loss, weighted_l1)
from .embedding import (LatentCodes, build_embedding, instantiate_coupled, instantiate_tracked,
                        sample_codes)
from .errors import (ConfigurationError, DomainError, HorizonError, MflabError,
                     NumericalOverflowError, StructuralError)
from .finite import FiniteWeights, NetworkArch, backward_finite, forward_finite, train_finite
from .mf import AuxPairState, MfTrajectory, ParticleSystem, aux_flow, integrate_mf

try:
    __version__ = version("mflab")
except PackageNotFoundError:  # pragma: no cover
    __version__ = "0.0.0"

__all__ = [
    "ActivationSpec", "AuxPairState", "ConfigurationError", "DataModel", "DomainError",
    "FiniteWeights", "HorizonError", "LatentCodes", "LossSpec", "MflabError", "MfTrajectory",
    "NetworkArch", "NumericalOverflowError", "Panel", "ParticleSystem", "Sample", "Schedule",
    "ScheduleSpec", "StructuralError", "aux_flow", "backward_finite", "build_embedding",
    "convergence_metrics", "coupling_distance", "diversity_roundtrip", "esssup_dwL",
    "forward_finite", "grad_check", "instantiate_coupled", "instantiate_tracked", "integrate_mf",
    "make_rng", "population_loss", "sample_codes", "split_seed", "train_finite", "weighted_l1",
]
