"""Multi-view 2D/3D X-ray to CT pose registration on synthetic volumes."""

from __future__ import annotations

from .errors import MvregError
from .evaluation import MetricReport, mtre, smrsr
from .imaging import Image, LandmarkSet, Volume, make_phantom
from .projector import DetectorGeometry, render
from .register import RefineConfig, RegistrationResult, fine_register, fine_register_coupled
from .se3 import Pose, TwistDistribution

__version__ = "0.1.0"

__all__ = [
    "DetectorGeometry",
    "Image",
    "LandmarkSet",
    "MetricReport",
    "MvregError",
    "Pose",
    "RefineConfig",
    "RegistrationResult",
    "TwistDistribution",
    "Volume",
    "fine_register",
    "fine_register_coupled",
    "make_phantom",
    "mtre",
    "render",
    "smrsr",
]
