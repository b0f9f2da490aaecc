import json
import logging
import math
import os
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import torch
from torch.utils.data import Dataset

from .bkt import load_tensor, save_tensor
from .rng import RngStream

__all__ = [
    'SynthParams',
    'StyleParams',
    'PairedSample',
    'FREQUENCIES',
    'AMPLITUDE_RANGE',
    'sample_style',
    'render',
    'gen_sample',
    'style_recover',
    'texture_recover',
    'split_indices',
    'SynthPairDataset',
    'DiskPairDataset',
    'write_dataset',
]

FREQUENCIES = (1, 2, 3)
AMPLITUDE_RANGE = (0.5, 2.0)
RADIUS_RANGE = (0.2, 0.3)


@dataclass(frozen=True)
class SynthParams:
    grid_h: int = 8
    grid_w: int = 8
    channels: int = 3
    noise_std: float = 0.0
    background: float = 0.0

    @classmethod
    def from_run_config(cls, cfg):
        return cls(cfg.grid_h, cfg.grid_w, cfg.channels, cfg.noise_std)


class StyleParams(NamedTuple):
    a: float
    hue: Tuple[float, ...]
    freq: int


class Pose(NamedTuple):
    cy: float
    cx: float
    radius: float


@dataclass
class PairedSample:
    r"""
    control:  [C, H, W] disc mask embedded in [-1, 1], the bridge endpoint y.
    target:   [C, H, W] rendered disc, the bridge endpoint x0.
    exemplar: [C, H, W] same style as `target`, independent pose.
    """
    control: torch.Tensor
    target: torch.Tensor
    exemplar: torch.Tensor
    style: StyleParams
    pose: Pose
    exemplar_pose: Pose

    def to_dict(self):
        return {
            'control': self.control,
            'target': self.target,
            'exemplar': self.exemplar,
            'amplitude': torch.tensor(self.style.a, dtype=self.target.dtype),
            'hue': torch.tensor(self.style.hue, dtype=self.target.dtype),
            'freq': torch.tensor(self.style.freq),
        }


def _uniform(generator, low, high):
    return low + (high - low) * float(torch.rand((), generator=generator, dtype=torch.float64))


def sample_style(params, generator):
    a = _uniform(generator, *AMPLITUDE_RANGE)
    hue = torch.randn(params.channels, generator=generator, dtype=torch.float64).abs()
    hue = hue / hue.norm().clamp(min=1e-12)
    freq = FREQUENCIES[int(torch.randint(len(FREQUENCIES), (), generator=generator))]
    return StyleParams(a, tuple(hue.tolist()), freq)


def sample_pose(params, generator):
    h, w = params.grid_h, params.grid_w
    radius = _uniform(generator, *RADIUS_RANGE) * min(h, w)
    # centre inside the interior so the whole disc fits
    cy = _uniform(generator, min(radius, (h - 1) / 2), max(h - 1 - radius, (h - 1) / 2))
    cx = _uniform(generator, min(radius, (w - 1) / 2), max(w - 1 - radius, (w - 1) / 2))
    return Pose(cy, cx, radius)


def disc_mask(params, pose):
    ii = torch.arange(params.grid_h, dtype=torch.float64).view(-1, 1)
    jj = torch.arange(params.grid_w, dtype=torch.float64).view(1, -1)
    blob = torch.exp(-((ii - pose.cy)**2 + (jj - pose.cx)**2) / (2 * pose.radius**2))
    return (blob >= math.exp(-0.5)).to(torch.float64)


def texture(params, freq):
    jj = torch.arange(params.grid_w, dtype=torch.float64)
    row = 0.75 + 0.25 * torch.cos(2 * math.pi * freq * jj / params.grid_w)
    return row.view(1, -1).expand(params.grid_h, params.grid_w)


def render(params, style, pose, generator=None, dtype=torch.float32):
    r"""
    Returns:
        (target, control), each [C, H, W]
    """
    mask = disc_mask(params, pose)
    hue = torch.tensor(style.hue, dtype=torch.float64).view(-1, 1, 1)
    target = params.background + style.a * hue * (texture(params, style.freq) * mask)
    if params.noise_std > 0:
        target = target + params.noise_std * torch.randn(
            target.shape, generator=generator, dtype=torch.float64)
    control = (2 * mask - 1).expand(params.channels, -1, -1)
    return target.to(dtype), control.to(dtype).clone()


def gen_sample(params, generator, dtype=torch.float32):
    r"""
    Draw one (control, target, exemplar) triple. Deterministic given the
    generator state.
    """
    style = sample_style(params, generator)
    pose = sample_pose(params, generator)
    exemplar_pose = sample_pose(params, generator)
    target, control = render(params, style, pose, generator, dtype)
    exemplar, _ = render(params, style, exemplar_pose, generator, dtype)
    return PairedSample(control, target, exemplar, style, pose, exemplar_pose)


def _mask_from(mask):
    mask = torch.as_tensor(mask)
    if mask.dim() == 3:
        mask = mask[0]
    return mask > 0


def _fit_style(image, mask, background=0.0):
    image = torch.as_tensor(image, dtype=torch.float64) - background
    mask = _mask_from(mask)
    if not bool(mask.any()):
        raise ValueError("style recovery needs a non-empty mask")
    h, w = mask.shape
    params = SynthParams(h, w, image.size(0))
    pixels = image[:, mask]
    best = None
    for freq in FREQUENCIES:
        tex = texture(params, freq)[mask]
        v = pixels @ tex / tex.dot(tex)
        residual = float((pixels - v.view(-1, 1) * tex).pow(2).sum())
        if best is None or residual < best[2] - 1e-12:
            best = (v, freq, residual)
    v, freq, residual = best
    a = float(v.norm())
    hue = (v / a).tolist() if a > 0 else [0.0] * v.numel()
    return StyleParams(a, tuple(hue), freq), residual


def style_recover(image, mask, background=0.0):
    r"""
    Least-squares amplitude and hue of a rendered image on the mask support.

    The texture frequency is selected by the smallest residual over the
    supported frequencies.

    Returns:
        (a, hue) with `hue` a unit vector
    """
    style, _ = _fit_style(image, mask, background)
    return style.a, style.hue


def texture_recover(image, mask, background=0.0):
    style, _ = _fit_style(image, mask, background)
    return style.freq


def split_indices(n, val_fraction, seed):
    r"""
    Disjoint train/validation index lists from a seeded permutation.
    """
    assert 0.0 < val_fraction < 1.0, f"val_fraction must be in (0, 1), got {val_fraction}"
    assert n >= 2, f"need at least 2 samples to split, got {n}"
    n_val = min(n - 1, max(1, int(round(n * val_fraction))))
    perm = torch.randperm(
        n, generator=RngStream(seed).split('split').generator()).tolist()
    return sorted(perm[n_val:]), sorted(perm[:n_val])


class SynthPairDataset(Dataset):
    r"""
    Procedural dataset: item `i` is drawn from its own split of `stream`, so
    items are reproducible in any order and with any number of workers.
    """

    def __init__(self, params, stream, indices, dtype=torch.float32):
        self.params = params
        self.stream = stream
        self.indices = list(indices)
        self.dtype = dtype

    def __len__(self):
        return len(self.indices)

    def sample(self, i):
        generator = self.stream.split(self.indices[i]).generator()
        return gen_sample(self.params, generator, self.dtype)

    def __getitem__(self, i):
        return self.sample(i).to_dict()


def write_dataset(out_dir, n, params, seed, val_fraction=0.125):
    r"""
    Write `n` samples as BKT1 triples with a JSON style sidecar each, plus
    `manifest.json` listing file paths and split labels.
    """
    os.makedirs(out_dir, exist_ok=True)
    train, _ = split_indices(n, val_fraction, seed)
    train = set(train)
    stream = RngStream(seed).split('data')
    records = []
    for i in range(n):
        sample = gen_sample(params, stream.split(i).generator())
        stem = f"sample_{i:05d}"
        entry = {'index': i, 'split': 'train' if i in train else 'val'}
        for key in ('control', 'target', 'exemplar'):
            name = f"{stem}_{key}.bkt"
            save_tensor(getattr(sample, key), os.path.join(out_dir, name))
            entry[key] = name
        sidecar = f"{stem}.json"
        with open(os.path.join(out_dir, sidecar), 'w', encoding='utf-8') as f:
            json.dump({
                'style': sample.style._asdict(),
                'pose': sample.pose._asdict(),
                'exemplar_pose': sample.exemplar_pose._asdict(),
            }, f, indent=2)
        entry['style'] = sidecar
        records.append(entry)
    manifest = {
        'format': 'BKT1',
        'grid': [params.grid_h, params.grid_w],
        'channels': params.channels,
        'noise_std': params.noise_std,
        'seed': seed,
        'val_fraction': val_fraction,
        'samples': records,
    }
    path = os.path.join(out_dir, 'manifest.json')
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, indent=2)
    logging.info(f"Wrote {n} samples to {out_dir}")
    return path


class DiskPairDataset(Dataset):
    r"""
    Dataset written by `write_dataset`, restricted to one split.
    """

    def __init__(self, data_dir, split='train', dtype=torch.float32):
        self.data_dir = data_dir
        self.dtype = dtype
        with open(os.path.join(data_dir, 'manifest.json'), 'r', encoding='utf-8') as f:
            self.manifest = json.load(f)
        self.records = [r for r in self.manifest['samples'] if r['split'] == split]
        if not self.records:
            raise ValueError(f"no '{split}' samples in {data_dir}")

    @property
    def params(self):
        h, w = self.manifest['grid']
        return SynthParams(h, w, self.manifest['channels'], self.manifest['noise_std'])

    def __len__(self):
        return len(self.records)

    def style(self, i):
        with open(os.path.join(self.data_dir, self.records[i]['style']), 'r',
                  encoding='utf-8') as f:
            raw = json.load(f)['style']
        return StyleParams(raw['a'], tuple(raw['hue']), raw['freq'])

    def __getitem__(self, i):
        record = self.records[i]
        item = {
            key: load_tensor(os.path.join(self.data_dir, record[key])).to(self.dtype)
            for key in ('control', 'target', 'exemplar')
        }
        style = self.style(i)
        item['amplitude'] = torch.tensor(style.a, dtype=self.dtype)
        item['hue'] = torch.tensor(style.hue, dtype=self.dtype)
        item['freq'] = torch.tensor(style.freq)
        return item
