"""Word-to-pixel visual grounding on a small numpy autodiff engine."""

__version__ = "0.1.0"

from .model import GroundingModel, ModelConfig  # noqa: E402
from .train import TrainSchedule, evaluate, train  # noqa: E402

__all__ = ["GroundingModel", "ModelConfig", "TrainSchedule", "evaluate", "train", "__version__"]
