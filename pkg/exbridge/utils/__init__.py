from .bkt import load_tensor, load_weights, save_tensor, save_weights
from .bridge_solver import ExemplarContext, InferencePlan, generate, make_plan, reverse_step
from .rng import RngStream, set_seed
from .utils import cache_json

__all__ = [
    'InferencePlan', 'ExemplarContext', 'make_plan', 'reverse_step', 'generate',
    'RngStream', 'set_seed', 'save_tensor', 'load_tensor', 'save_weights', 'load_weights',
    'cache_json'
]
