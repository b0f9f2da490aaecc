import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import torch
from torch.utils.data import DataLoader, Sampler
from tqdm import tqdm

from .configs import DTYPES, ConfigError, dump_run_config, load_run_config
from .modules.bridge import forward_sample, loss_target
from .modules.model import ExbModel
from .modules.schedule import build_schedule
from .modules.tensor import backward
from .utils.bkt import load_weights, save_weights
from .utils.rng import RngStream, set_seed
from .utils.synthdata import (
    DiskPairDataset,
    SynthPairDataset,
    SynthParams,
    split_indices,
)

__all__ = [
    'Stage',
    'StageError',
    'NumericAbort',
    'TrainState',
    'EMA',
    'ExbTrainer',
]


class Stage(str, Enum):
    STAGE1 = 'stage1'
    STAGE2 = 'stage2'


class StageError(RuntimeError):
    pass


class NumericAbort(RuntimeError):
    r"""
    Non-finite training loss. Carries what is needed to replay the batch.
    """

    def __init__(self, message, step, item_seeds, timesteps):
        super().__init__(message)
        self.step = step
        self.item_seeds = list(item_seeds)
        self.timesteps = list(timesteps)

    def dump(self):
        return {
            'error': str(self),
            'step': self.step,
            'item_seeds': self.item_seeds,
            'timesteps': self.timesteps,
        }


class EMA:
    r"""
    Shadow copy of the trainable parameters:
    shadow <- d_k * shadow + (1 - d_k) * param, with the warmup decay
    d_k = min(decay, (1 + k) / (10 + k)) at the k-th update of a stage.
    """

    def __init__(self, model, decay):
        self.model = model
        self.decay = decay
        self.shadow = {}
        self.backup = {}

    def decay_at(self, step):
        return min(self.decay, (1 + step) / (10 + step))

    def register(self):
        for name, param in self.model.named_parameters():
            self.shadow[name] = param.detach().clone()

    def reset(self, names):
        params = dict(self.model.named_parameters())
        for name in names:
            self.shadow[name] = params[name].detach().clone()

    @torch.no_grad()
    def update(self, step):
        decay = self.decay_at(step)
        for name, param in self.model.named_parameters():
            if param.requires_grad:
                assert name in self.shadow
                self.shadow[name].mul_(decay).add_(param.detach(), alpha=1.0 - decay)
        return decay

    @torch.no_grad()
    def copy_to_model(self):
        for name, param in self.model.named_parameters():
            param.copy_(self.shadow[name])

    def apply_shadow(self):
        for name, param in self.model.named_parameters():
            assert name in self.shadow
            self.backup[name] = param.data
            param.data = self.shadow[name].clone()

    def restore(self):
        for name, param in self.model.named_parameters():
            assert name in self.backup
            param.data = self.backup[name]
        self.backup = {}

    def state_dict(self):
        return dict(self.shadow)

    def load_state_dict(self, shadow):
        params = dict(self.model.named_parameters())
        for name, value in shadow.items():
            assert name in params, f"unknown EMA entry {name}"
            self.shadow[name] = value.to(params[name].dtype).clone()


@dataclass
class TrainState:
    step: int = 0
    stage_step: int = 0
    micro_step: int = 0
    item_counter: int = 0
    stage: Stage = Stage.STAGE1
    stage1_checkpoint: Optional[str] = None
    window_loss: float = 0.0
    history: list = field(default_factory=list)

    def to_dict(self):
        return {
            'step': self.step,
            'stage_step': self.stage_step,
            'micro_step': self.micro_step,
            'item_counter': self.item_counter,
            'stage': self.stage.value,
            'stage1_checkpoint': self.stage1_checkpoint,
            'window_loss': self.window_loss,
            'history': list(self.history),
        }

    @classmethod
    def from_dict(cls, raw):
        raw = dict(raw)
        raw['stage'] = Stage(raw['stage'])
        return cls(**raw)


class EpochSampler(Sampler):
    r"""
    Yields dataset indices from a fresh seeded permutation per epoch, starting
    at a global item position, so a run resumes mid-epoch exactly.
    """

    def __init__(self, size, stream, start=0):
        self.size = size
        self.stream = stream
        self.start = start

    def __iter__(self):
        position = self.start
        while True:
            epoch, offset = divmod(position, self.size)
            order = torch.randperm(
                self.size, generator=self.stream.split(epoch).generator()).tolist()
            for index in order[offset:]:
                yield index
            position = (epoch + 1) * self.size


class ExbTrainer:

    def __init__(self, config, out_dir=None, device='cpu'):
        r"""
        Initializes the two-stage training pipeline.

        Args:
            config (EasyDict):
                Validated run config from `exbridge.configs.make_run_config`
            out_dir (`str`, *optional*):
                Directory for checkpoints and metrics. Defaults to `config.out_dir`
            device (`str`, *optional*, defaults to 'cpu'):
                Torch device
        """
        self.config = config
        self.out_dir = out_dir if out_dir is not None else config.out_dir
        self.device = torch.device(device)
        self.dtype = DTYPES[config.dtype]

        self.root = RngStream(config.seed)
        self.train_stream = self.root.split('train')
        self.sched = build_schedule(config.num_train_timesteps, config.variance_factor)

        set_seed(self.root.split('init').derived_seed)
        logging.info(f"Creating ExbModel for preset {config.preset}")
        self.model = ExbModel.from_run_config(config).to(device=self.device, dtype=self.dtype)
        self.model.train()

        self.train_set, self.val_set = self._datasets()
        self.state = TrainState()
        self.ema = EMA(self.model, config.ema_decay)
        self.ema.register()
        self._apply_stage(Stage.STAGE1)
        self._val_batch = None

    def _datasets(self):
        cfg = self.config
        if cfg.data_dir:
            logging.info(f"Loading dataset from {cfg.data_dir}")
            return (DiskPairDataset(cfg.data_dir, 'train', self.dtype),
                    DiskPairDataset(cfg.data_dir, 'val', self.dtype))
        params = SynthParams.from_run_config(cfg)
        stream = self.root.split('data')
        train, val = split_indices(cfg.dataset_size, cfg.val_fraction, cfg.seed)
        return (SynthPairDataset(params, stream, train, self.dtype),
                SynthPairDataset(params, stream, val, self.dtype))

    # ------------------------------------------------------------------ stages

    def _trainable_groups(self, stage):
        if stage == Stage.STAGE1:
            return ('global_encoder', 'backbone')
        return ('exemplar_net', 'exemplar_attention')

    def _apply_stage(self, stage):
        groups = self.model.parameter_groups()
        trainable = self._trainable_groups(stage)
        for group, named in groups.items():
            for _, p in named:
                p.requires_grad_(group in trainable)
        self.state.stage = stage
        params = [p for p in self.model.parameters() if p.requires_grad]
        self.optimizer = torch.optim.AdamW(
            params,
            lr=self.config.lr if stage == Stage.STAGE1 else self.config.stage2_lr,
            betas=(0.9, 0.999),
            eps=1e-8,
            weight_decay=self.config.weight_decay)
        self.scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            self.optimizer,
            mode='min',
            factor=self.config.plateau_factor,
            patience=self.config.plateau_patience,
            min_lr=self.config.min_lr)
        self.state.micro_step = 0
        self.state.window_loss = 0.0
        self.optimizer.zero_grad(set_to_none=True)

    def set_stage(self, stage):
        r"""
        Switch the trainable subset.

        Stage 1 trains the global encoder and the denoising backbone with exemplar
        attention bypassed. Stage 2 trains only the exemplar network and the
        exemplar attention modules. The model first takes the stage 1 EMA
        weights, the ones sampling uses, then the exemplar network starts from
        the backbone weights it mirrors.
        """
        stage = Stage(stage)
        current = self.state.stage
        if stage == current:
            return self.state
        if current == Stage.STAGE2:
            raise StageError("cannot return to stage1 after stage2")
        if self.state.stage1_checkpoint is None:
            raise StageError("stage2 requires a saved stage1 checkpoint")
        self.ema.copy_to_model()
        copied = self.model.init_exemplar_from_backbone()
        self._apply_stage(stage)
        self.state.stage_step = 0
        self.ema.reset(name for name, _ in self.model.parameter_groups()['exemplar_net'])
        self._val_batch = None
        logging.info(f"Entered {stage.value}: stage1 EMA weights loaded, exemplar network "
                     f"initialised from {copied} backbone tensors, lr {self.lr:.3g}")
        return self.state

    @property
    def use_exemplar(self):
        return self.state.stage == Stage.STAGE2

    # -------------------------------------------------------------------- loss

    def item_seeds(self, start, count):
        stream = self.train_stream.split('item')
        return [stream.split(start + i).derived_seed for i in range(count)]

    def draw_items(self, start, like):
        r"""
        Timesteps and Gaussian draws for items `start .. start + B - 1`. Each
        item has its own stream, keyed by the global item counter.
        """
        stream = self.train_stream.split('item')
        ts, eps = [], []
        for i in range(like.size(0)):
            generator = stream.split(start + i).generator()
            ts.append(int(torch.randint(1, self.sched.T + 1, (), generator=generator)))
            eps.append(torch.randn(like.shape[1:], generator=generator, dtype=like.dtype))
        return torch.tensor(ts, dtype=torch.long), torch.stack(eps).to(like.device)

    def _batch(self, batch):
        return {
            k: v.to(self.device, self.dtype) if v.is_floating_point() else v.to(self.device)
            for k, v in batch.items()
        }

    def predict(self, x_t, t, batch):
        exemplar = batch['exemplar'] if self.use_exemplar else batch['target']
        return self.model(x_t, t, exemplar, use_exemplar=self.use_exemplar)

    def compute_loss(self, batch, t, eps, predictor=None):
        r"""
        Weighted regression loss mean_i c_eps(t_i) mean((target_i - pred_i)^2).

        Args:
            predictor (`callable`, *optional*):
                predictor(x_t, t, batch) replacing the network.

        Returns:
            (scalar loss, per-item losses)
        """
        x0, y = batch['target'], batch['control']
        draw = forward_sample(self.sched, x0, y, t, eps=eps)
        target = loss_target(self.sched, x0, y, draw)
        predictor = predictor if predictor is not None else self.predict
        pred = predictor(draw.x_t, t, batch)
        weight = self.sched.as_tensor('c_eps', dtype=x0.dtype, device=x0.device)[t]
        per_item = weight * (target - pred).pow(2).flatten(1).mean(dim=1)
        return per_item.mean(), per_item

    # -------------------------------------------------------------------- step

    def train_step(self, batch):
        r"""
        One training micro-batch: forward bridge draws, weighted loss, backward.
        The optimizer steps once every `grad_accum` micro-batches.

        Returns:
            float, the micro-batch loss
        """
        batch = self._batch(batch)
        b = batch['target'].size(0)
        assert b > 0, "empty batch"
        start = self.state.item_counter
        t, eps = self.draw_items(start, batch['target'])
        loss, _ = self.compute_loss(batch, t, eps)
        if not bool(torch.isfinite(loss)):
            raise NumericAbort(
                f"non-finite loss {loss.item()} at step {self.state.step}",
                self.state.step, self.item_seeds(start, b), t.tolist())

        backward(loss / self.config.grad_accum)
        value = loss.item()
        self.state.item_counter += b
        self.state.micro_step += 1
        self.state.window_loss += value / self.config.grad_accum
        if self.state.micro_step % self.config.grad_accum == 0:
            self.optimizer_step()
        return value

    def grad_norms(self):
        norms = {}
        for group, named in self.model.parameter_groups().items():
            total = 0.0
            for _, p in named:
                if p.grad is not None:
                    total += float(p.grad.detach().pow(2).sum())
            norms[group] = math.sqrt(total)
        return norms

    def optimizer_step(self):
        params = [p for p in self.model.parameters() if p.requires_grad]
        grad_norm = math.sqrt(
            sum(float(p.grad.detach().pow(2).sum()) for p in params if p.grad is not None))
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        ema_decay = self.ema.update(self.state.stage_step)
        self.state.step += 1
        self.state.stage_step += 1
        record = {
            'step': self.state.step,
            'stage': self.state.stage.value,
            'loss': self.state.window_loss,
            'lr': self.lr,
            'grad_norm': grad_norm,
            'ema_decay': ema_decay,
        }
        self.state.window_loss = 0.0
        self.state.history.append(record['loss'])
        self._write_metrics(record)
        return record

    @property
    def lr(self):
        return self.optimizer.param_groups[0]['lr']

    def _write_metrics(self, record):
        if self.out_dir is None:
            return
        os.makedirs(self.out_dir, exist_ok=True)
        with open(os.path.join(self.out_dir, 'metrics.jsonl'), 'a', encoding='utf-8') as f:
            f.write(json.dumps(record) + '\n')

    # -------------------------------------------------------------- validation

    def _validation_batch(self):
        if self._val_batch is None:
            n = min(self.config.val_size, len(self.val_set))
            items = [self.val_set[i] for i in range(n)]
            batch = self._batch({k: torch.stack([u[k] for u in items]) for k in items[0]})
            stream = self.root.split('val')
            generator = stream.generator()
            t = torch.randint(1, self.sched.T + 1, (n,), generator=generator)
            eps = torch.randn(
                batch['target'].shape, generator=generator, dtype=self.dtype).to(self.device)
            self._val_batch = (batch, t, eps)
        return self._val_batch

    @torch.no_grad()
    def validate(self):
        r"""
        Validation loss on a fixed batch with fixed timesteps and draws.
        """
        self.model.eval()
        batch, t, eps = self._validation_batch()
        loss, _ = self.compute_loss(batch, t, eps)
        self.model.train()
        return float(loss)

    def _plateau(self, val_loss):
        before = self.lr
        self.scheduler.step(val_loss)
        if self.lr < before:
            logging.info(f"Validation loss plateaued, lr {before:.3g} -> {self.lr:.3g}")

    # -------------------------------------------------------------------- loop

    def loader(self):
        sampler = EpochSampler(
            len(self.train_set), self.train_stream.split('order'), self.state.item_counter)
        return DataLoader(
            self.train_set,
            batch_size=self.config.batch_size,
            sampler=sampler,
            num_workers=self.config.num_workers)

    def train(self, stage=None, steps=None):
        r"""
        Run optimizer steps for one stage and save the stage checkpoint.

        Args:
            stage (`Stage`, *optional*):
                Stage to train; switches if different from the current one
            steps (`int`, *optional*):
                Optimizer steps. Defaults to what is left of the stage budget

        Returns:
            str, the stage checkpoint directory
        """
        if stage is not None:
            self.set_stage(stage)
        stage = self.state.stage
        if steps is None:
            budget = self.config.stage1_steps if stage == Stage.STAGE1 else self.config.stage2_steps
            steps = max(0, budget - self.state.stage_step)
        cfg = self.config
        target_step = self.state.step + steps
        logging.info(f"Training {stage.value} for {steps} steps, "
                     f"batch {cfg.batch_size} x accumulation {cfg.grad_accum}")

        batches = iter(self.loader())
        progress = tqdm(total=steps, disable=None)
        while self.state.step < target_step:
            step = self.state.step
            self.train_step(next(batches))
            if self.state.step == step:
                continue
            progress.update(1)
            if self.state.step % cfg.log_every == 0:
                logging.info(f"[{stage.value}] step {self.state.step} "
                             f"loss {self.state.history[-1]:.6f} lr {self.lr:.3g}")
            if self.state.step % cfg.val_every == 0:
                val_loss = self.validate()
                logging.info(f"[{stage.value}] step {self.state.step} val loss {val_loss:.6f}")
                self._plateau(val_loss)
            if self.state.step % cfg.save_every == 0:
                self.save_checkpoint()
        progress.close()
        return self.save_checkpoint(stage.value)

    # ------------------------------------------------------------- checkpoints

    def save_checkpoint(self, name=None):
        r"""
        Write config.txt, model_config.json, weights and EMA blobs,
        train_state.pt and rng_state.json into one directory.
        """
        name = name or f"{self.state.stage.value}-step{self.state.step:06d}"
        path = os.path.join(self.out_dir, name)
        os.makedirs(path, exist_ok=True)
        if self.state.stage == Stage.STAGE1:
            self.state.stage1_checkpoint = path
        dump_run_config(self.config, os.path.join(path, 'config.txt'))
        self.model.save_config(path)
        save_weights(self.model.state_dict(), path, 'weights')
        save_weights(self.ema.state_dict(), path, 'ema')
        torch.save({
            'state': self.state.to_dict(),
            'optimizer': self.optimizer.state_dict(),
            'scheduler': self.scheduler.state_dict(),
        }, os.path.join(path, 'train_state.pt'))
        with open(os.path.join(path, 'rng_state.json'), 'w', encoding='utf-8') as f:
            json.dump({
                'seed': self.config.seed,
                'item_counter': self.state.item_counter,
                'streams': [self.train_stream.state(), self.root.split('data').state()],
            }, f, indent=2)
        logging.info(f"Saved checkpoint to {path}")
        return path

    def load_checkpoint(self, path):
        self.model.load_state_dict(
            {k: v.to(self.dtype) for k, v in load_weights(path, 'weights').items()})
        self.ema.load_state_dict(load_weights(path, 'ema', self.dtype))
        blob = torch.load(os.path.join(path, 'train_state.pt'), weights_only=False)
        state = TrainState.from_dict(blob['state'])
        self._check_rng_state(path, state)
        self._apply_stage(state.stage)
        self.optimizer.load_state_dict(blob['optimizer'])
        self.scheduler.load_state_dict(blob['scheduler'])
        self.state = state
        self._val_batch = None
        logging.info(f"Resumed {state.stage.value} at step {state.step} from {path}")
        return self.state

    def _check_rng_state(self, path, state):
        r"""
        Refuse a checkpoint whose rng_state.json disagrees with this run.
        """
        rng_path = os.path.join(path, 'rng_state.json')
        if not os.path.exists(rng_path):
            return
        with open(rng_path, 'r', encoding='utf-8') as f:
            saved = json.load(f)
        expected = {
            'seed': self.config.seed,
            'item_counter': state.item_counter,
            'streams': [self.train_stream.state(), self.root.split('data').state()],
        }
        for key, value in expected.items():
            if saved.get(key) != value:
                raise ConfigError(
                    f"{rng_path}: {key} is {saved.get(key)!r}, the run expects {value!r}")

    @classmethod
    def from_checkpoint(cls, path, out_dir=None, device='cpu'):
        config = load_run_config(os.path.join(path, 'config.txt'))
        trainer = cls(config, out_dir=out_dir, device=device)
        trainer.load_checkpoint(path)
        return trainer
