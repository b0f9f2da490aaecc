import json
import logging
import os
import struct

import numpy as np
import torch

__all__ = [
    'BKT_MAGIC',
    'BKTFormatError',
    'encode_tensor',
    'decode_tensor',
    'save_tensor',
    'load_tensor',
    'save_weights',
    'load_weights',
]

BKT_MAGIC = b'BKT1'
_U32 = struct.Struct('<I')


class BKTFormatError(ValueError):
    pass


def encode_tensor(tensor):
    r"""
    Serialise a tensor as BKT1: magic, u32 rank, rank x u32 dims, then
    little-endian float32 values in row-major order.
    """
    array = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
    header = BKT_MAGIC + _U32.pack(array.ndim) + b''.join(
        _U32.pack(d) for d in array.shape)
    return header + array.astype('<f4', copy=False).tobytes(order='C')


def decode_tensor(payload, offset=0):
    r"""
    Parse one BKT1 tensor starting at `offset`.

    Returns:
        (torch.Tensor, int), the float32 tensor and the offset just past it.
    """
    if payload[offset:offset + 4] != BKT_MAGIC:
        raise BKTFormatError(f"bad magic {payload[offset:offset + 4]!r} at byte {offset}")
    pos = offset + 4
    if len(payload) < pos + 4:
        raise BKTFormatError("truncated header")
    (rank,) = _U32.unpack_from(payload, pos)
    pos += 4
    if len(payload) < pos + 4 * rank:
        raise BKTFormatError("truncated dims")
    shape = tuple(_U32.unpack_from(payload, pos + 4 * i)[0] for i in range(rank))
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 4 * count
    if len(payload) < end:
        raise BKTFormatError(
            f"truncated payload: need {4 * count} bytes for shape {shape}, got {len(payload) - pos}")
    array = np.frombuffer(payload, dtype='<f4', count=count, offset=pos).reshape(shape)
    return torch.from_numpy(array.astype(np.float32)), end


def save_tensor(tensor, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        f.write(encode_tensor(tensor))
    return path


def load_tensor(path):
    with open(path, 'rb') as f:
        payload = f.read()
    tensor, end = decode_tensor(payload)
    if end != len(payload):
        raise BKTFormatError(f"{path}: {len(payload) - end} trailing bytes")
    return tensor


def save_weights(state_dict, save_dir, prefix='weights'):
    r"""
    Write a weight checkpoint as `<prefix>.json` (name, shape, byte offset per
    entry) plus `<prefix>.bkt`, the concatenated BKT1 tensors.
    """
    os.makedirs(save_dir, exist_ok=True)
    manifest, chunks, offset = [], [], 0
    for name, tensor in state_dict.items():
        chunk = encode_tensor(tensor)
        manifest.append({'name': name, 'shape': list(tensor.shape), 'offset': offset})
        chunks.append(chunk)
        offset += len(chunk)
    with open(os.path.join(save_dir, f"{prefix}.bkt"), 'wb') as f:
        f.write(b''.join(chunks))
    with open(os.path.join(save_dir, f"{prefix}.json"), 'w', encoding='utf-8') as f:
        json.dump({'format': 'BKT1', 'tensors': manifest}, f, indent=2)
    logging.info(f"Saved {len(manifest)} tensors to {save_dir}/{prefix}.bkt")
    return save_dir


def load_weights(save_dir, prefix='weights', dtype=torch.float32):
    with open(os.path.join(save_dir, f"{prefix}.json"), 'r', encoding='utf-8') as f:
        manifest = json.load(f)
    with open(os.path.join(save_dir, f"{prefix}.bkt"), 'rb') as f:
        blob = f.read()
    state_dict = {}
    for entry in manifest['tensors']:
        tensor, _ = decode_tensor(blob, entry['offset'])
        if list(tensor.shape) != entry['shape']:
            raise BKTFormatError(
                f"{entry['name']}: manifest shape {entry['shape']} != stored {list(tensor.shape)}")
        if entry['name'] in state_dict:
            raise BKTFormatError(f"duplicate tensor name {entry['name']}")
        state_dict[entry['name']] = tensor.to(dtype)
    return state_dict
