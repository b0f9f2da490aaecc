from easydict import EasyDict

from .shared_config import exb_shared_cfg

#------------------------ ExBridge toy 16x16 ------------------------#

toy_16x16 = EasyDict(__name__='Config: ExBridge toy 16x16')
toy_16x16.update(exb_shared_cfg)
toy_16x16.preset = 'toy-16x16'

# grid
toy_16x16.grid_h = 16
toy_16x16.grid_w = 16
toy_16x16.channels = 3

# denoiser
toy_16x16.width = 48
toy_16x16.blocks = 3
toy_16x16.heads = 4
toy_16x16.token_dim = 32
toy_16x16.time_dim = 48
toy_16x16.context_tokens = 4
toy_16x16.batch_size = 4
