"""Continuous-time hidden Markov models for irregular trip telematics."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .distributions import FAMILIES, Gamma, Laplace, LogNormal, Normal, VonMises, ZeroInflatedGamma, ZeroInflatedLogNormal
from .em import FitConfig, fit, fit_pooled
from .model import CTHMM

__all__ = [
    "CTHMM",
    "FAMILIES",
    "FitConfig",
    "Gamma",
    "Laplace",
    "LogNormal",
    "Normal",
    "VonMises",
    "ZeroInflatedGamma",
    "ZeroInflatedLogNormal",
    "fit",
    "fit_pooled",
]
