from . import configs, modules, utils
from .exemplar2image import ExbI2I
from .trainer import ExbTrainer, NumericAbort, Stage, StageError
