import base64
import zlib

import numpy as np
import torch

__all__ = ['RngStream', 'SUB_STREAMS', 'set_seed']

SUB_STREAMS = ('data', 'init', 'train', 'sample')


def _name_key(name):
    if isinstance(name, int):
        return int(name)
    return zlib.crc32(str(name).encode('utf-8'))


class RngStream:
    r"""
    Named, seedable, splittable random stream.

    A stream is identified by the root seed and its split path; the torch seed
    of every stream is derived through `numpy.random.SeedSequence`, so sibling
    streams are statistically independent and independent of draw order.

    Example:
        root = RngStream(0)
        data = root.split('data')
        item = data.split(17)   # per-index stream
    """

    def __init__(self, seed, path=()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._generator = None

    @property
    def derived_seed(self):
        seq = np.random.SeedSequence(
            entropy=self.seed, spawn_key=tuple(_name_key(u) for u in self.path))
        return int(seq.generate_state(1, dtype=np.uint64)[0]) & ((1 << 63) - 1)

    def split(self, name):
        return RngStream(self.seed, self.path + (name,))

    def generator(self, device='cpu'):
        r"""
        The stream's torch.Generator. Repeated calls return the same, advancing,
        generator.
        """
        if self._generator is None:
            self._generator = torch.Generator(device=device).manual_seed(
                self.derived_seed)
        return self._generator

    def normal(self, shape, dtype=torch.float32):
        return torch.randn(shape, generator=self.generator(), dtype=dtype)

    def uniform(self, shape, low=0.0, high=1.0, dtype=torch.float32):
        u = torch.rand(shape, generator=self.generator(), dtype=dtype)
        return low + (high - low) * u

    def randint(self, low, high, shape):
        return torch.randint(low, high, shape, generator=self.generator())

    def state(self):
        r"""
        JSON-serialisable snapshot of the stream, including the generator state
        when draws have been made.
        """
        snapshot = {'seed': self.seed, 'path': list(self.path)}
        if self._generator is not None:
            snapshot['generator'] = base64.b64encode(
                self._generator.get_state().numpy().tobytes()).decode('ascii')
        return snapshot

    @classmethod
    def from_state(cls, snapshot):
        stream = cls(snapshot['seed'], snapshot.get('path', ()))
        if 'generator' in snapshot:
            raw = np.frombuffer(
                base64.b64decode(snapshot['generator']), dtype=np.uint8).copy()
            stream.generator().set_state(torch.from_numpy(raw))
        return stream

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"


def set_seed(seed):
    r"""
    Seed the global numpy and torch generators. Pipelines draw from explicit
    streams; this only pins stray global draws such as module initialisation.
    """
    np.random.seed(seed % (1 << 32))
    torch.manual_seed(seed)
