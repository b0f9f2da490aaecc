import json
import math
import os
import os.path as osp

__all__ = ['cache_json', 'finite_or_none']


def finite_or_none(value):
    r"""
    Replace non-finite floats so reports stay strict JSON.
    """
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: finite_or_none(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [finite_or_none(v) for v in value]
    return value


def cache_json(obj, save_file=None, retry=5):
    r"""
    Write `obj` as indented JSON to `save_file`, or return the text when
    `save_file` is None.
    """
    text = json.dumps(finite_or_none(obj), indent=2, allow_nan=False)
    if save_file is None:
        return text

    error = None
    for _ in range(retry):
        try:
            directory = osp.dirname(osp.abspath(save_file))
            os.makedirs(directory, exist_ok=True)
            with open(save_file, 'w', encoding='utf-8') as f:
                f.write(text + '\n')
            return save_file
        except OSError as e:
            error = e
            continue
    raise OSError(f"cache_json failed for {save_file}: {error}")
