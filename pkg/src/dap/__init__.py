"""Disease-aware prompting for vision-language grounding, at desk scale on synthetic scans."""

from .config import TrainConfig, load_config
from .model import DAPModel, build_model, load_model, save_model
from .synthdata import SynthConfig, generate_dataset

__all__ = ["DAPModel", "SynthConfig", "TrainConfig", "build_model", "generate_dataset", "load_config",
           "load_model", "save_model"]
__version__ = "0.1.0"
