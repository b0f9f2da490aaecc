from .attention import attention
from .bridge import BridgeDraw, forward_sample, loss_target, posterior_mean
from .model import ExbModel
from .schedule import BridgeSchedule, build_schedule, loss_weight, pair_coefficients

__all__ = [
    'ExbModel',
    'BridgeSchedule',
    'BridgeDraw',
    'build_schedule',
    'pair_coefficients',
    'loss_weight',
    'forward_sample',
    'loss_target',
    'posterior_mean',
    'attention',
]
