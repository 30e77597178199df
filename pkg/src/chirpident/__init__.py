"""Delay/Doppler identification of linear time-varying channels from chirp pulse trains."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .denoise import ASTConfig, ASTResult, ast_denoise, default_eta
from .estimators import ASTDenoiser, KTEstimator, LTVIdentifier
from .matcher import MatchResult, match_noiseless, match_noisy
from .model import (ChirpProfile, ChirpSchedule, Scene, TargetParams, TimingPlan, ValidationError,
                    plan_timing)
from .pipeline import IdentifyOptions, identify, identify_adaptive
from .specest import EstimationError, PredictorConfig, estimate_sinusoids
from .synth import NoiseSpec, PulseSamples, synth_dechirped, synth_fullrate, synth_pulses

__all__ = [
    "__version__", "ASTConfig", "ASTResult", "ast_denoise", "default_eta", "ASTDenoiser", "KTEstimator",
    "LTVIdentifier", "MatchResult", "match_noiseless", "match_noisy", "ChirpProfile", "ChirpSchedule",
    "Scene", "TargetParams", "TimingPlan", "ValidationError", "plan_timing", "IdentifyOptions", "identify",
    "identify_adaptive", "EstimationError", "PredictorConfig", "estimate_sinusoids", "NoiseSpec",
    "PulseSamples", "synth_dechirped", "synth_fullrate", "synth_pulses",
]
