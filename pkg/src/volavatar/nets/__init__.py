from . import tape
from .adam import Adam, constant, exponential, halving
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .mlp import Mlp, ShapeError, backward, forward
from .tape import Tape, TapeError, Var

__all__ = [
    "Adam", "CheckpointError", "Mlp", "ShapeError", "Tape", "TapeError", "Var",
    "backward", "constant", "exponential", "forward", "halving", "load_checkpoint",
    "save_checkpoint", "tape",
]
