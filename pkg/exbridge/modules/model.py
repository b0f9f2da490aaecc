import math

import torch
import torch.nn as nn
from diffusers.configuration_utils import ConfigMixin, register_to_config
from diffusers.models.modeling_utils import ModelMixin

from .attention import attention
from .tensor import ShapeError, chunk, concat, layernorm, silu

__all__ = ['ExbModel', 'sinusoidal_embedding_1d']


def sinusoidal_embedding_1d(dim, position):
    # preprocess
    assert dim % 2 == 0
    half = dim // 2
    position = position.type(torch.float64)

    # calculation
    sinusoid = torch.outer(
        position, torch.pow(10000, -torch.arange(half).to(position).div(half)))
    x = torch.cat([torch.cos(sinusoid), torch.sin(sinusoid)], dim=1)
    return x


def to_tokens(x):
    r"""
    [B, C, H, W] -> [B, H * W, C]
    """
    return x.flatten(2).transpose(1, 2)


def to_grid(x, h, w):
    r"""
    [B, H * W, C] -> [B, C, H, W]
    """
    return x.transpose(1, 2).reshape(x.size(0), x.size(2), h, w)


class ExbLayerNorm(nn.LayerNorm):

    def __init__(self, dim, eps=1e-6, elementwise_affine=False):
        super().__init__(dim, elementwise_affine=elementwise_affine, eps=eps)

    def forward(self, x):
        r"""
        Args:
            x(Tensor): Shape [B, L, C]
        """
        return layernorm(x, self.weight, self.bias, axis=-1, eps=self.eps)


class ExbCrossAttention(nn.Module):

    def __init__(self, dim, num_heads, eps=1e-6):
        assert dim % num_heads == 0
        super().__init__()
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.eps = eps

        # layers
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, x, context):
        r"""
        Args:
            x(Tensor): Shape [B, L1, C]
            context(Tensor): Shape [B, L2, C]
        """
        b, n, d = x.size(0), self.num_heads, self.head_dim

        # compute query, key, value
        q = self.q(x).view(b, -1, n, d)
        k = self.k(context).view(b, -1, n, d)
        v = self.v(context).view(b, -1, n, d)

        # compute attention
        x = attention(q, k, v)

        # output
        x = x.flatten(2)
        x = self.o(x)
        return x


class ExemplarAttention(nn.Module):
    r"""
    Joint spatial attention over exemplar and denoising feature maps.

    The two maps are concatenated along the width axis, attended with 1x1
    query/key/value projections, projected by the zero-initialised output
    layer, added back to the concatenation, and the denoising-aligned half is
    returned.
    """

    def __init__(self, dim, num_heads, eps=1e-6):
        assert dim % num_heads == 0
        super().__init__()
        self.dim = dim
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.eps = eps

        # 1x1 projections
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)
        nn.init.zeros_(self.o.weight)
        nn.init.zeros_(self.o.bias)

    def forward(self, f1, f2, return_weights=False):
        r"""
        Args:
            f1(Tensor): Exemplar branch, shape [B, C, H, W]
            f2(Tensor): Denoising branch, shape [B, C, H, W]
        """
        if f1.shape != f2.shape:
            raise ShapeError(
                f"exemplar attention: branch shapes {tuple(f1.shape)} vs {tuple(f2.shape)}")
        b, c, h, w = f2.shape
        n, d = self.num_heads, self.head_dim

        f_in = concat([f1, f2], axis=-1)
        tokens = to_tokens(f_in)
        q = self.q(tokens).view(b, -1, n, d)
        k = self.k(tokens).view(b, -1, n, d)
        v = self.v(tokens).view(b, -1, n, d)
        x, weights = attention(q, k, v, return_weights=True)
        x = self.o(x.flatten(2))

        f_ea = to_grid(x, h, 2 * w) + f_in
        out = chunk(f_ea, 2, axis=-1)[1]
        if return_weights:
            return out, weights
        return out


class ExbBlock(nn.Module):

    def __init__(self, dim, num_heads, exemplar_attn=True, eps=1e-6):
        super().__init__()
        self.dim = dim
        self.num_heads = num_heads
        self.eps = eps

        # layers
        self.mix = nn.Linear(dim, dim)
        self.time_proj = nn.Linear(dim, dim)
        self.norm = ExbLayerNorm(dim, eps)
        self.cross_attn = ExbCrossAttention(dim, num_heads, eps)
        if exemplar_attn:
            self.exemplar_attn = ExemplarAttention(dim, num_heads, eps)

    def forward(self, x, e, context, grid_size, feat=None):
        r"""
        Args:
            x(Tensor): Shape [B, L, C]
            e(Tensor): Time embedding, shape [B, C]
            context(Tensor): Global context tokens, shape [B, K, C]
            grid_size(Tuple): (H, W) with H * W = L
            feat(Tensor, *optional*): Exemplar feature map, shape [B, C, H, W].
                None bypasses exemplar attention.
        """
        y = self.mix(x) + self.time_proj(silu(e)).unsqueeze(1)
        y = y + self.cross_attn(self.norm(y), context)
        if feat is not None:
            y = to_tokens(self.exemplar_attn(feat, to_grid(y, *grid_size)))
        return x + silu(y)


class Head(nn.Module):

    def __init__(self, dim, out_dim, eps=1e-6):
        super().__init__()
        self.dim = dim
        self.out_dim = out_dim
        self.eps = eps

        # layers
        self.norm = ExbLayerNorm(dim, eps)
        self.head = nn.Linear(dim, out_dim)

        # modulation
        self.modulation = nn.Parameter(torch.randn(1, 2, dim) / dim**0.5)

    def forward(self, x, e):
        r"""
        Args:
            x(Tensor): Shape [B, L1, C]
            e(Tensor): Shape [B, C]
        """
        e = (self.modulation + e.unsqueeze(1)).chunk(2, dim=1)
        return self.head(self.norm(x) * (1 + e[1]) + e[0])


class GlobalEncoder(nn.Module):
    r"""
    Patch embedding, mean pool and a linear layer producing one style token.
    """

    def __init__(self, in_dim, token_dim, patch_size=(2, 2)):
        super().__init__()
        self.in_dim = in_dim
        self.token_dim = token_dim
        self.patch_size = tuple(patch_size)
        self.patch_embedding = nn.Linear(in_dim * math.prod(self.patch_size), token_dim)
        self.proj = nn.Linear(token_dim, token_dim)

    def forward(self, x):
        b, c, h, w = x.shape
        p, q = self.patch_size
        x = x.reshape(b, c, h // p, p, w // q, q).permute(0, 2, 4, 1, 3, 5)
        x = x.reshape(b, (h // p) * (w // q), c * p * q)
        x = silu(self.patch_embedding(x)).mean(dim=1)
        return self.proj(x)


class ExemplarNet(nn.Module):
    r"""
    Siamese copy of the denoising backbone without exemplar attention and
    without the output head. Attribute names mirror `ExbModel` so backbone
    weights load into it by name.
    """

    def __init__(self, in_dim, dim, num_heads, num_layers, freq_dim, token_dim,
                 context_tokens, seq_len, eps=1e-6):
        super().__init__()
        self.dim = dim
        self.freq_dim = freq_dim
        self.context_tokens = context_tokens

        self.patch_embedding = nn.Linear(in_dim, dim)
        self.pos_embedding = nn.Parameter(torch.zeros(1, seq_len, dim))
        self.time_embedding = nn.Sequential(
            nn.Linear(freq_dim, dim), nn.SiLU(), nn.Linear(dim, dim))
        self.context_embedding = nn.Linear(token_dim, context_tokens * dim)
        self.blocks = nn.ModuleList([
            ExbBlock(dim, num_heads, exemplar_attn=False, eps=eps)
            for _ in range(num_layers)
        ])

    def forward(self, z, t, token):
        b, _, h, w = z.shape
        x = self.patch_embedding(to_tokens(z)) + self.pos_embedding
        e = self.time_embedding(sinusoidal_embedding_1d(self.freq_dim, t).to(x.dtype))
        context = self.context_embedding(token).view(b, self.context_tokens, self.dim)
        feats = []
        for block in self.blocks:
            x = block(x, e, context, (h, w))
            feats.append(to_grid(x, h, w))
        return feats


class ExbModel(ModelMixin, ConfigMixin):
    r"""
    Exemplar-conditioned bridge denoiser with its global encoder and siamese
    exemplar network.
    """

    config_name = 'model_config.json'
    _no_split_modules = ['ExbBlock']

    @register_to_config
    def __init__(self,
                 grid=(8, 8),
                 channels=3,
                 width=32,
                 blocks=2,
                 heads=4,
                 token_dim=16,
                 time_dim=32,
                 context_tokens=4,
                 patch_size=(2, 2),
                 eps=1e-6):
        r"""
        Initialize the denoiser.

        Args:
            grid (`tuple`, *optional*, defaults to (8, 8)):
                Spatial size (H, W) of the bridge endpoints
            channels (`int`, *optional*, defaults to 3):
                Grid channels (C)
            width (`int`, *optional*, defaults to 32):
                Hidden channel count of every block
            blocks (`int`, *optional*, defaults to 2):
                Number of blocks (N)
            heads (`int`, *optional*, defaults to 4):
                Attention heads, must divide `width`
            token_dim (`int`, *optional*, defaults to 16):
                Global style token dimension (c)
            time_dim (`int`, *optional*, defaults to 32):
                Dimension of the sinusoidal time embedding
            context_tokens (`int`, *optional*, defaults to 4):
                Number of key/value tokens the global token is projected into
            patch_size (`tuple`, *optional*, defaults to (2, 2)):
                Patch size of the global encoder
            eps (`float`, *optional*, defaults to 1e-6):
                Epsilon value for normalization layers
        """

        super().__init__()

        assert blocks >= 1, f"blocks must be >= 1, got {blocks}"
        assert width % heads == 0, f"width {width} not divisible by heads {heads}"
        assert time_dim % 2 == 0, f"time_dim must be even, got {time_dim}"
        assert grid[0] % patch_size[0] == 0 and grid[1] % patch_size[1] == 0, \
            f"grid {tuple(grid)} not divisible by patch size {tuple(patch_size)}"

        self.grid = tuple(grid)
        self.channels = channels
        self.width = width
        self.num_layers = blocks
        self.num_heads = heads
        self.token_dim = token_dim
        self.freq_dim = time_dim
        self.context_tokens = context_tokens
        self.patch_size = tuple(patch_size)
        self.eps = eps
        seq_len = self.grid[0] * self.grid[1]

        # global encoder
        self.global_encoder = GlobalEncoder(channels, token_dim, self.patch_size)

        # embeddings
        self.patch_embedding = nn.Linear(channels, width)
        self.pos_embedding = nn.Parameter(torch.zeros(1, seq_len, width))
        self.time_embedding = nn.Sequential(
            nn.Linear(time_dim, width), nn.SiLU(), nn.Linear(width, width))
        self.context_embedding = nn.Linear(token_dim, context_tokens * width)

        # blocks
        self.blocks = nn.ModuleList([
            ExbBlock(width, heads, exemplar_attn=True, eps=eps)
            for _ in range(blocks)
        ])

        # head
        self.head = Head(width, channels, eps)

        # exemplar network
        self.exemplar_net = ExemplarNet(channels, width, heads, blocks, time_dim,
                                        token_dim, context_tokens, seq_len, eps)

        # initialize weights
        self.init_weights()

    @classmethod
    def from_run_config(cls, cfg):
        grid = (cfg.grid_h, cfg.grid_w)
        patch = tuple(2 if g % 2 == 0 else 1 for g in grid)
        return cls(
            grid=grid,
            channels=cfg.channels,
            width=cfg.width,
            blocks=cfg.blocks,
            heads=cfg.heads,
            token_dim=cfg.token_dim,
            time_dim=cfg.time_dim,
            context_tokens=cfg.context_tokens,
            patch_size=patch)

    def _check_grid(self, x, what):
        if x.dim() != 4 or tuple(x.shape[1:]) != (self.channels, *self.grid):
            raise ShapeError(
                f"{what}: expected [B, {self.channels}, {self.grid[0]}, {self.grid[1]}], "
                f"got {tuple(x.shape)}")

    def _timesteps(self, t, batch, device):
        t = torch.as_tensor(t, device=device).reshape(-1)
        if t.numel() == 1:
            t = t.expand(batch)
        assert t.numel() == batch, f"got {t.numel()} timesteps for a batch of {batch}"
        return t

    def global_encode(self, exemplar):
        r"""
        Args:
            exemplar (Tensor): Shape [B, C, H, W]

        Returns:
            Tensor: style token, shape [B, token_dim]
        """
        self._check_grid(exemplar, 'global_encode')
        return self.global_encoder(exemplar)

    def exemplar_forward(self, z_exemplar, token, t_ref=0):
        r"""
        Run the exemplar network at the reference timestep.

        Returns:
            List[Tensor]: one [B, width, H, W] feature map per block
        """
        self._check_grid(z_exemplar, 'exemplar_forward')
        t = self._timesteps(t_ref, z_exemplar.size(0), z_exemplar.device)
        return self.exemplar_net(z_exemplar, t, token)

    def exemplar_attention(self, l, f1, f2, return_weights=False):
        return self.blocks[l].exemplar_attn(f1, f2, return_weights=return_weights)

    def denoise(self, x_t, t, token, exemplar_feats=None):
        r"""
        Predict the bridge regression target.

        Args:
            x_t (Tensor):
                Noised state, shape [B, C, H, W]
            t (Tensor or int):
                Diffusion timesteps, shape [B] or scalar
            token (Tensor):
                Global style token, shape [B, token_dim]
            exemplar_feats (List[Tensor], *optional*):
                Per-block exemplar feature maps. None bypasses every exemplar
                attention module.

        Returns:
            Tensor: prediction with the shape of `x_t`
        """
        self._check_grid(x_t, 'denoise')
        b, _, h, w = x_t.shape
        if exemplar_feats is not None and len(exemplar_feats) != self.num_layers:
            raise ShapeError(
                f"denoise: {len(exemplar_feats)} exemplar feature maps for {self.num_layers} blocks")

        # embeddings
        x = self.patch_embedding(to_tokens(x_t)) + self.pos_embedding

        # time embeddings
        t = self._timesteps(t, b, x_t.device)
        e = self.time_embedding(sinusoidal_embedding_1d(self.freq_dim, t).to(x.dtype))

        # context
        context = self.context_embedding(token).view(b, self.context_tokens, self.width)

        for i, block in enumerate(self.blocks):
            feat = None if exemplar_feats is None else exemplar_feats[i]
            x = block(x, e, context, (h, w), feat)

        # head
        x = self.head(x, e)
        return to_grid(x, h, w)

    def forward(self, x_t, t, exemplar, use_exemplar=True, t_ref=0):
        token = self.global_encode(exemplar)
        feats = self.exemplar_forward(exemplar, token, t_ref) if use_exemplar else None
        return self.denoise(x_t, t, token, feats)

    def parameter_groups(self):
        r"""
        Named parameters split into 'global_encoder', 'backbone',
        'exemplar_attention' and 'exemplar_net'.
        """
        groups = {
            'global_encoder': [],
            'backbone': [],
            'exemplar_attention': [],
            'exemplar_net': []
        }
        for name, p in self.named_parameters():
            if name.startswith('global_encoder.'):
                groups['global_encoder'].append((name, p))
            elif name.startswith('exemplar_net.'):
                groups['exemplar_net'].append((name, p))
            elif '.exemplar_attn.' in name:
                groups['exemplar_attention'].append((name, p))
            else:
                groups['backbone'].append((name, p))
        return groups

    def init_exemplar_from_backbone(self):
        r"""
        Copy every backbone weight the exemplar network mirrors.
        """
        source = self.state_dict()
        target = self.exemplar_net.state_dict()
        with torch.no_grad():
            for name, value in target.items():
                value.copy_(source[name])
        return len(target)

    def init_weights(self):
        r"""
        Initialize model parameters using Xavier initialization.
        """

        # basic init
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

        # init embeddings
        for net in (self, self.exemplar_net):
            nn.init.normal_(net.pos_embedding, std=.02)
            for m in net.time_embedding.modules():
                if isinstance(m, nn.Linear):
                    nn.init.normal_(m.weight, std=.02)

        # zero-init exemplar attention output and the head
        for block in self.blocks:
            nn.init.zeros_(block.exemplar_attn.o.weight)
            nn.init.zeros_(block.exemplar_attn.o.bias)
        nn.init.zeros_(self.head.head.weight)
