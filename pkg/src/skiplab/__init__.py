"""Detached skip-link fusion toolkit: autograd, fusion models, gradient probes, theory checks."""

__version__ = "0.1.0"

from .fusion import DetachedFusionClassifier, FusionConfig, FusionNet, fuse, select_skip_layers
from .glyphs import DatasetSpec, ReconSample, downstream_task_batch, probe_samples
from .pathwise import decompose, transition_step, window_stats
from .probe import ProbeConfig, ReconstructionProbe

__all__ = [
    "DatasetSpec", "DetachedFusionClassifier", "FusionConfig", "FusionNet", "ProbeConfig",
    "ReconSample", "ReconstructionProbe", "decompose", "downstream_task_batch", "fuse",
    "probe_samples", "select_skip_layers", "transition_step", "window_stats",
]
