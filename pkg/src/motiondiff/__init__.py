"""Video synthesis by diffusing sequences of latent motion codes.

An image animator maps frames to low-dimensional motion codes and warps a
starting frame to follow a code sequence. Diffusion models generate the code
sequences, the starting code and the starting frame.
"""
from .data import Video, make_sprite_dataset, render_sprite_video
from .errors import (ConfigurationError, NumericError, ParameterError, TrainingDivergedError,
                     VideoIOError)

__version__ = "0.1.0"

__all__ = ["Video", "make_sprite_dataset", "render_sprite_video", "ConfigurationError",
           "NumericError", "ParameterError", "TrainingDivergedError", "VideoIOError", "__version__"]
