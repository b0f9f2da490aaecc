from easydict import EasyDict

from .shared_config import exb_shared_cfg

#------------------------ ExBridge toy 8x8 ------------------------#

toy_8x8 = EasyDict(__name__='Config: ExBridge toy 8x8')
toy_8x8.update(exb_shared_cfg)
toy_8x8.preset = 'toy-8x8'

# grid
toy_8x8.grid_h = 8
toy_8x8.grid_w = 8
toy_8x8.channels = 3

# denoiser
toy_8x8.width = 32
toy_8x8.blocks = 2
toy_8x8.heads = 4
toy_8x8.token_dim = 16
toy_8x8.time_dim = 32
toy_8x8.context_tokens = 4
