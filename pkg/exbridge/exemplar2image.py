import logging
import math
import os
import statistics

import torch
from tqdm import tqdm

from .configs import DTYPES, load_run_config
from .modules.model import ExbModel
from .modules.schedule import build_schedule
from .utils.bkt import load_weights, save_tensor
from .utils.bridge_solver import ExemplarContext, generate, make_plan
from .utils.rng import RngStream
from .utils.synthdata import style_recover, texture_recover


class ExbI2I:

    def __init__(self, checkpoint_dir, device='cpu', use_ema=True):
        r"""
        Initializes the exemplar-guided translation pipeline from a training
        checkpoint.

        Args:
            checkpoint_dir (`str`):
                Checkpoint directory written by `ExbTrainer.save_checkpoint`
            device (`str`, *optional*, defaults to 'cpu'):
                Torch device
            use_ema (`bool`, *optional*, defaults to True):
                Load the EMA shadow weights instead of the raw weights
        """
        self.device = torch.device(device)
        self.config = load_run_config(os.path.join(checkpoint_dir, 'config.txt'))
        self.dtype = DTYPES[self.config.dtype]
        self.num_train_timesteps = self.config.num_train_timesteps
        self.sched = build_schedule(self.num_train_timesteps, self.config.variance_factor)

        logging.info(f"Creating ExbModel from {checkpoint_dir}")
        self.model = ExbModel.from_config(ExbModel.load_config(checkpoint_dir))
        weights = load_weights(checkpoint_dir, 'ema' if use_ema else 'weights')
        self.model.load_state_dict(weights)
        self.model.to(device=self.device, dtype=self.dtype)
        self.model.eval().requires_grad_(False)

        state = torch.load(
            os.path.join(checkpoint_dir, 'train_state.pt'), weights_only=False)['state']
        self.stage = state['stage']
        self.use_exemplar = self.stage == 'stage2'
        logging.info(f"Loaded {self.stage} checkpoint, "
                     f"{'EMA' if use_ema else 'raw'} weights, "
                     f"exemplar attention {'on' if self.use_exemplar else 'bypassed'}")

    def _denoise(self, x_t, t, token, feats):
        return self.model.denoise(x_t, t, token, feats)

    @torch.no_grad()
    def generate(self,
                 control,
                 exemplar,
                 sampling_steps=None,
                 seed=0,
                 dump_every=0,
                 trajectory_dir=None,
                 progress=False):
        r"""
        Translates a control grid into the style of an exemplar.

        Args:
            control (`torch.Tensor`):
                Control grid [C, H, W] or a batch [B, C, H, W]
            exemplar (`torch.Tensor`):
                Exemplar grid with the shape of `control`
            sampling_steps (`int`, *optional*):
                Inference steps S. Defaults to the config's `sample_steps`
            seed (`int`, *optional*, defaults to 0):
                Root seed; batch element i draws from the stream ('sample', i)
            dump_every (`int`, *optional*, defaults to 0):
                Write every k-th intermediate state to `trajectory_dir`. 0 disables
            trajectory_dir (`str`, *optional*):
                Directory for trajectory dumps
            progress (`bool`, *optional*, defaults to False):
                Show a progress bar

        Returns:
            torch.Tensor with the shape of `control`
        """
        unbatched = control.dim() == 3
        if unbatched:
            control, exemplar = control.unsqueeze(0), exemplar.unsqueeze(0)
        if control.shape != exemplar.shape:
            raise ValueError(
                f"control {tuple(control.shape)} and exemplar {tuple(exemplar.shape)} differ")
        y = control.to(self.device, self.dtype)
        exemplar = exemplar.to(self.device, self.dtype)

        steps = sampling_steps if sampling_steps is not None else self.config.sample_steps
        plan = make_plan(self.num_train_timesteps, steps)
        stream = RngStream(seed).split('sample')
        generators = [stream.split(i).generator() for i in range(y.size(0))]

        token = self.model.global_encode(exemplar)
        feats = self.model.exemplar_forward(exemplar, token) if self.use_exemplar else None

        callback = None
        if dump_every > 0:
            assert trajectory_dir is not None, "dump_every needs a trajectory_dir"
            os.makedirs(trajectory_dir, exist_ok=True)

            def callback(i, t_next, x):
                if (i + 1) % dump_every == 0 or t_next == 0:
                    save_tensor(
                        x[0] if unbatched else x,
                        os.path.join(trajectory_dir, f"step_{i + 1:04d}_t{t_next:04d}.bkt"))

        x0 = generate(
            self.sched,
            plan,
            self._denoise,
            y,
            context=ExemplarContext(token, feats),
            generator=generators,
            callback=callback,
            progress=progress)
        return x0[0] if unbatched else x0

    def evaluate(self, dataset, n=64, sampling_steps=None, seed=0):
        r"""
        Style consistency on held-out triples: for every control the output is
        sampled with the paired exemplar and its amplitude, hue and texture
        frequency are recovered on the control mask and compared with the
        exemplar's. Diversity is the mean distance between two samples of the
        same control drawn with different seeds.
        """
        n = min(n, len(dataset))
        amp_err, hue_cos, tex_hits, diversity = [], [], [], []
        for i in tqdm(range(n), disable=None):
            item = dataset[i]
            control, exemplar = item['control'], item['exemplar']
            out = self.generate(control, exemplar, sampling_steps, seed=seed + i).double()
            other = self.generate(
                control, exemplar, sampling_steps, seed=seed + i + n).double()

            a_ex = float(item['amplitude'])
            hue_ex = item['hue'].double()
            a_out, hue_out = style_recover(out, control)
            amp_err.append(abs(a_out - a_ex) / a_ex)
            hue_cos.append(float(torch.tensor(hue_out, dtype=torch.float64) @ hue_ex))
            tex_hits.append(texture_recover(out, control) == int(item['freq']))
            diversity.append(float((out - other).norm()) / math.sqrt(out.numel()))

        report = {
            'n': n,
            'stage': self.stage,
            'sampling_steps': sampling_steps or self.config.sample_steps,
            'median_amplitude_error': statistics.median(amp_err),
            'mean_hue_cosine': statistics.fmean(hue_cos),
            'texture_accuracy': sum(tex_hits) / n,
            'diversity': statistics.fmean(diversity),
        }
        logging.info(f"Evaluation: {report}")
        return report
