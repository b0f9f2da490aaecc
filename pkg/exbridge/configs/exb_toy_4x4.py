import copy

from .exb_toy_8x8 import toy_8x8

#------------------------ ExBridge toy 4x4 ------------------------#

# only used for gradient checks and fast tests
toy_4x4 = copy.deepcopy(toy_8x8)
toy_4x4.__name__ = 'Config: ExBridge toy 4x4'
toy_4x4.preset = 'toy-4x4'
toy_4x4.grid_h = 4
toy_4x4.grid_w = 4
toy_4x4.width = 8
toy_4x4.blocks = 1
toy_4x4.heads = 2
toy_4x4.token_dim = 4
toy_4x4.time_dim = 8
toy_4x4.context_tokens = 2
