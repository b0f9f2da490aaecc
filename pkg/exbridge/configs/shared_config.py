import torch
from easydict import EasyDict

#------------------------ ExBridge shared config ------------------------#
exb_shared_cfg = EasyDict()

# bridge
exb_shared_cfg.num_train_timesteps = 200
exb_shared_cfg.variance_factor = 1.0
exb_shared_cfg.sample_steps = 200

# numerics
exb_shared_cfg.dtype = 'float32'

# optimizer
exb_shared_cfg.lr = 1e-5
# stage 2 trains a zero-initialised branch against a frozen backbone
exb_shared_cfg.stage2_lr = 1e-3
exb_shared_cfg.weight_decay = 1e-2
exb_shared_cfg.batch_size = 8
exb_shared_cfg.grad_accum = 2
exb_shared_cfg.ema_decay = 0.999

# plateau decay (gamma = 0.2)
exb_shared_cfg.val_every = 100
exb_shared_cfg.val_size = 16
exb_shared_cfg.plateau_factor = 0.2
exb_shared_cfg.plateau_patience = 3
exb_shared_cfg.min_lr = 1e-7

# two-stage budgets
exb_shared_cfg.stage1_steps = 2000
exb_shared_cfg.stage2_steps = 2000

# loop
exb_shared_cfg.num_workers = 0
exb_shared_cfg.log_every = 50
exb_shared_cfg.save_every = 500

# synthetic data
exb_shared_cfg.dataset_size = 2048
exb_shared_cfg.val_fraction = 0.125
exb_shared_cfg.noise_std = 0.0

# run
exb_shared_cfg.seed = 0
exb_shared_cfg.data_dir = ''
exb_shared_cfg.out_dir = 'runs/exbridge'

DTYPES = {
    'float32': torch.float32,
    'float64': torch.float64,
}

MAX_GRID = 16
