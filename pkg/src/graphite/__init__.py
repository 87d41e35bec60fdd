"""Hierarchical multiscale graph attention saliency for tissue-core patch
embeddings: MIL classification, graph-attention refinement, confidence-based
saliency fusion and the pixel-level evaluation suite."""

from . import autodiff, checkpoint, data, gatsan, graphs, metrics, mil, pipeline, saliency

__all__ = ["autodiff", "checkpoint", "data", "gatsan", "graphs", "metrics",
           "mil", "pipeline", "saliency"]

__version__ = "0.1.0"
