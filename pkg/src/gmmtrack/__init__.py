"""Hand and rigid-object pose tracking from depth and colour frames with Gaussian mixtures."""

from .depth import ColorFrame, DepthFrame, Intrinsics
from .energy import EnergyWeights, TermSwitches
from .kinematics import N_POSE, load_kinematic_model
from .optimizer import Tracker, TrackerConfig, track_frame

__version__ = "0.1.0"
