"""Synthetic static-camera world, frozen surrogate extractor, detector and training."""

from .extractor import ExtractorConfig, SurrogateExtractor, surrogate_extract
from .model import DetectorModel, detect, majority_vote, read_model, st_spatial_features, write_model
from .pipeline import (CameraData, TrainParams, TrainingError, build_camera_bank, prepare_camera,
                       run_baseline, run_detector, train)
from .world import CameraTrace, TraceConfig, generate_trace, read_traces, write_traces

__all__ = [
    "CameraData", "CameraTrace", "DetectorModel", "ExtractorConfig", "SurrogateExtractor", "TraceConfig",
    "TrainParams", "TrainingError", "build_camera_bank", "detect", "generate_trace", "majority_vote",
    "prepare_camera", "read_model", "read_traces", "run_baseline", "run_detector", "st_spatial_features",
    "surrogate_extract", "train", "write_model", "write_traces",
]
