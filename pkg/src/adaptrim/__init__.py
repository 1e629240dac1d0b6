"""Input-adaptive token and attention-head pruning for a two-stream
cross-modal transformer, with training, FLOPs accounting, and analysis
tooling at desk scale."""

from .config import DataConfig, ModelConfig, RunConfig, TrainConfig

__version__ = "0.1.0"

__all__ = ["DataConfig", "ModelConfig", "RunConfig", "TrainConfig", "__version__"]
