"""Anonymization of VR head and hand telemetry with noise-conditioned motion rewriting."""
from .bundle import ModelBundle, load_bundle, save_bundle
from .core import MotionFrame, MotionSequence, Pose, resample, window
from .runtime import anonymize_recording, stream_open, stream_step

__version__ = "0.1.0"

__all__ = ["ModelBundle", "MotionFrame", "MotionSequence", "Pose", "anonymize_recording", "load_bundle",
           "resample", "save_bundle", "stream_open", "stream_step", "window"]
