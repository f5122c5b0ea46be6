"""Visual attention model for imitation learning: top-down queries fused with
bottom-up saliency, a hierarchical LSTM, and reconstruction-based training
on a small synthetic pick task."""

__version__ = "0.1.0"
