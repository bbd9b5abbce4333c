"""Generator and the three discriminator families.

Every discriminator maps a ``(B, 1, 80, 64)`` mel batch to a
:class:`DiscOutput`: a realness map plus the flattened last hidden layer
used as the feature embedding for the OT loss.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

N_MELS = 80
N_FRAMES = 64
EMBED_MULTIPLE = 4
ARCH_KINDS = ("dcnn", "vit", "conformer")


class DiscOutput(NamedTuple):
    realness: torch.Tensor
    embedding: torch.Tensor


@dataclass(frozen=True)
class GeneratorConfig:
    base_channels: int = 128
    residual_channels: int = 256
    n_residual: int = 6
    bias: bool = True


@dataclass(frozen=True)
class DCNNConfig:
    base_channels: int = 128
    bias: bool = True
    spectral_norm: bool = False


@dataclass(frozen=True)
class ViTConfig:
    patch_size: int = 8
    width: int = 128
    heads: int = 4
    depth: int = 4
    bias: bool = True
    spectral_norm: bool = False

    def __post_init__(self):
        if N_MELS % self.patch_size or N_FRAMES % self.patch_size:
            raise ValueError(f"patch size {self.patch_size} does not tile an 80x64 mel")
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")


@dataclass(frozen=True)
class ConformerConfig:
    width: int = 128
    heads: int = 4
    depth: int = 4
    conv_kernel: int = 15
    frontend_channels: int = 16
    bias: bool = True
    spectral_norm: bool = False


@dataclass(frozen=True)
class NetsConfig:
    generator: GeneratorConfig = GeneratorConfig()
    dcnn: DCNNConfig = DCNNConfig()
    vit: ViTConfig = ViTConfig()
    conformer: ConformerConfig = ConformerConfig()
    discriminators: tuple = ARCH_KINDS

    def __post_init__(self):
        kinds = tuple(self.discriminators)
        object.__setattr__(self, "discriminators", kinds)
        if not kinds or any(k not in ARCH_KINDS for k in kinds):
            raise ValueError(f"discriminators must be drawn from {ARCH_KINDS}")

    def arch_hash(self):
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _check_mel(x, channels=1):
    if x.dim() != 4 or x.shape[1:] != (channels, N_MELS, N_FRAMES):
        raise ValueError(f"expected (B, {channels}, {N_MELS}, {N_FRAMES}) input, got {tuple(x.shape)}")


def _pad_flat(h, length):
    flat = h.flatten(1)
    if flat.shape[1] < length:
        flat = F.pad(flat, (0, length - flat.shape[1]))
    return flat


def _padded_length(n):
    return EMBED_MULTIPLE * math.ceil(n / EMBED_MULTIPLE)


def _maybe_sn(module, enabled):
    return nn.utils.parametrizations.spectral_norm(module) if enabled else module


# --------------------------------------------------------------------------
# generator
# --------------------------------------------------------------------------

class _GLUBlock2d(nn.Module):
    """Conv -> InstanceNorm -> GLU, halving 2*out channels to out."""

    def __init__(self, cin, cout, kernel, stride, padding, bias=True):
        super().__init__()
        self.conv = nn.Conv2d(cin, 2 * cout, kernel, stride, padding, bias=bias)
        self.norm = nn.InstanceNorm2d(2 * cout, affine=bias)

    def forward(self, x):
        return F.glu(self.norm(self.conv(x)), dim=1)


class _ResBlock1d(nn.Module):
    def __init__(self, channels, bias=True):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, 2 * channels, 3, padding=1, bias=bias)
        self.norm1 = nn.InstanceNorm1d(2 * channels, affine=bias)
        self.conv2 = nn.Conv1d(channels, channels, 3, padding=1, bias=bias)
        self.norm2 = nn.InstanceNorm1d(channels, affine=bias)

    def forward(self, x):
        h = F.glu(self.norm1(self.conv1(x)), dim=1)
        return x + self.norm2(self.conv2(h))


class _UpBlock2d(nn.Module):
    """Conv -> pixel shuffle x2 -> InstanceNorm -> GLU."""

    def __init__(self, cin, cout, bias=True):
        super().__init__()
        self.conv = nn.Conv2d(cin, 2 * cout * 4, 5, padding=2, bias=bias)
        self.shuffle = nn.PixelShuffle(2)
        self.norm = nn.InstanceNorm2d(2 * cout, affine=bias)

    def forward(self, x):
        return F.glu(self.norm(self.shuffle(self.conv(x))), dim=1)


class Generator(nn.Module):
    """Masked-mel generator: 2-D entry, two downsamples, 1-D residual trunk, two upsamples.

    Input ``(B, 2, 80, 64)`` (masked mel, mask); output ``(B, 1, 80, 64)``.
    """

    def __init__(self, cfg=GeneratorConfig()):
        super().__init__()
        c, r, b = cfg.base_channels, cfg.residual_channels, cfg.bias
        self.cfg = cfg
        self.entry = nn.Conv2d(2, 2 * c, (5, 15), padding=(2, 7), bias=b)
        self.down1 = _GLUBlock2d(c, 2 * c, 5, 2, 2, bias=b)
        self.down2 = _GLUBlock2d(2 * c, 2 * c, 5, 2, 2, bias=b)
        self._lowres = (N_MELS // 4, N_FRAMES // 4)
        flat = 2 * c * self._lowres[0]
        self.to1d = nn.Conv1d(flat, r, 1, bias=b)
        self.to1d_norm = nn.InstanceNorm1d(r, affine=b)
        self.trunk = nn.Sequential(*[_ResBlock1d(r, bias=b) for _ in range(cfg.n_residual)])
        self.to2d = nn.Conv1d(r, flat, 1, bias=b)
        self.to2d_norm = nn.InstanceNorm1d(flat, affine=b)
        self.up1 = _UpBlock2d(2 * c, 2 * c, bias=b)
        self.up2 = _UpBlock2d(2 * c, c, bias=b)
        self.out = nn.Conv2d(c, 1, (5, 15), padding=(2, 7), bias=b)

    def forward(self, x):
        _check_mel(x, channels=2)
        h = F.glu(self.entry(x), dim=1)
        h = self.down2(self.down1(h))
        B, C, H, W = h.shape
        h = self.to1d_norm(self.to1d(h.reshape(B, C * H, W)))
        h = self.trunk(h)
        h = self.to2d_norm(self.to2d(h)).reshape(B, C, H, W)
        h = self.up2(self.up1(h))
        return self.out(h)


# --------------------------------------------------------------------------
# discriminators
# --------------------------------------------------------------------------

def _conv_out(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


class DCNNDiscriminator(nn.Module):
    """Strided GLU conv stack with a patch-level realness head.

    80x64 -> 40x32 -> 20x16 -> 10x8 -> 10x8 -> head (3x3, no freq padding) -> 8x8.
    """

    layer_names = ("entry", "down1", "down2", "down3", "down4")

    def __init__(self, cfg=DCNNConfig()):
        super().__init__()
        c, b, sn = cfg.base_channels, cfg.bias, cfg.spectral_norm
        self.cfg = cfg
        self.entry = _maybe_sn(nn.Conv2d(1, 2 * c, 3, padding=1, bias=b), sn)
        self.down1 = _GLUBlock2d(c, 2 * c, 3, 2, 1, bias=b)
        self.down2 = _GLUBlock2d(2 * c, 4 * c, 3, 2, 1, bias=b)
        self.down3 = _GLUBlock2d(4 * c, 8 * c, 3, 2, 1, bias=b)
        self.down4 = _GLUBlock2d(8 * c, 8 * c, (1, 5), 1, (0, 2), bias=b)
        if sn:
            for blk in (self.down1, self.down2, self.down3, self.down4):
                blk.conv = _maybe_sn(blk.conv, True)
        self.head = _maybe_sn(nn.Conv2d(8 * c, 1, 3, padding=(0, 1), bias=b), sn)
        self.hidden_shape = (8 * c, N_MELS // 8, N_FRAMES // 8)
        self.embed_dim = _padded_length(math.prod(self.hidden_shape))

    def features(self, x):
        h = F.glu(self.entry(x), dim=1)
        h = self.down2(self.down1(h))
        return self.down4(self.down3(h))

    def forward(self, x):
        _check_mel(x)
        h = self.features(x)
        return DiscOutput(self.head(h), _pad_flat(h, self.embed_dim))


class _TransformerBlock(nn.Module):
    def __init__(self, width, heads, bias=True):
        super().__init__()
        self.norm1 = nn.LayerNorm(width, elementwise_affine=bias)
        self.attn = nn.MultiheadAttention(width, heads, bias=bias, batch_first=True)
        self.norm2 = nn.LayerNorm(width, elementwise_affine=bias)
        self.mlp = nn.Sequential(
            nn.Linear(width, 4 * width, bias=bias), nn.GELU(), nn.Linear(4 * width, width, bias=bias))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class ViTDiscriminator(nn.Module):
    """Patch-embedding transformer with a class token realness head."""

    def __init__(self, cfg=ViTConfig()):
        super().__init__()
        p, d, b = cfg.patch_size, cfg.width, cfg.bias
        self.cfg = cfg
        self.grid = (N_MELS // p, N_FRAMES // p)
        self.n_patches = self.grid[0] * self.grid[1]
        self.patch = _maybe_sn(nn.Conv2d(1, d, p, stride=p, bias=b), cfg.spectral_norm)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.randn(1, self.n_patches + 1, d) * 0.02)
        self.blocks = nn.ModuleList([_TransformerBlock(d, cfg.heads, bias=b) for _ in range(cfg.depth)])
        self.norm = nn.LayerNorm(d, elementwise_affine=b)
        self.head = _maybe_sn(nn.Linear(d, 1, bias=b), cfg.spectral_norm)
        self.embed_dim = _padded_length((self.n_patches + 1) * d)

    def tokens(self, x):
        t = self.patch(x).flatten(2).transpose(1, 2)
        t = torch.cat([self.cls_token.expand(t.shape[0], -1, -1), t], dim=1) + self.pos_embed
        for blk in self.blocks:
            t = blk(t)
        return self.norm(t)

    def forward(self, x):
        _check_mel(x)
        t = self.tokens(x)
        return DiscOutput(self.head(t[:, 0]), _pad_flat(t, self.embed_dim))


class _FeedForward(nn.Module):
    def __init__(self, width, bias=True):
        super().__init__()
        self.net = nn.Sequential(
            nn.LayerNorm(width, elementwise_affine=bias),
            nn.Linear(width, 4 * width, bias=bias), nn.SiLU(),
            nn.Linear(4 * width, width, bias=bias))

    def forward(self, x):
        return self.net(x)


class _ConvModule(nn.Module):
    """Pointwise -> GLU -> depthwise -> norm -> SiLU -> pointwise, on (B, T, D)."""

    def __init__(self, width, kernel, bias=True):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=bias)
        self.pw1 = nn.Conv1d(width, 2 * width, 1, bias=bias)
        self.dw = nn.Conv1d(width, width, kernel, padding=kernel // 2, groups=width, bias=bias)
        self.dw_norm = nn.GroupNorm(1, width, affine=bias)
        self.pw2 = nn.Conv1d(width, width, 1, bias=bias)

    def forward(self, x):
        h = self.norm(x).transpose(1, 2)
        h = F.glu(self.pw1(h), dim=1)
        h = F.silu(self.dw_norm(self.dw(h)))
        return self.pw2(h).transpose(1, 2)


class _ConformerBlock(nn.Module):
    def __init__(self, width, heads, kernel, bias=True):
        super().__init__()
        self.ff1 = _FeedForward(width, bias)
        self.attn_norm = nn.LayerNorm(width, elementwise_affine=bias)
        self.attn = nn.MultiheadAttention(width, heads, bias=bias, batch_first=True)
        self.conv = _ConvModule(width, kernel, bias)
        self.ff2 = _FeedForward(width, bias)
        self.out_norm = nn.LayerNorm(width, elementwise_affine=bias)

    def forward(self, x):
        x = x + 0.5 * self.ff1(x)
        h = self.attn_norm(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.out_norm(x)


class ConformerDiscriminator(nn.Module):
    """Conv front end (2x time subsampling), conformer blocks, mean-pooled realness."""

    def __init__(self, cfg=ConformerConfig()):
        super().__init__()
        d, s, b = cfg.width, cfg.frontend_channels, cfg.bias
        self.cfg = cfg
        self.frontend = _maybe_sn(nn.Conv2d(1, s, 3, stride=(1, 2), padding=1, bias=b), cfg.spectral_norm)
        self.n_steps = N_FRAMES // 2
        self.proj = nn.Linear(s * N_MELS, d, bias=b)
        self.pos_embed = nn.Parameter(torch.randn(1, self.n_steps, d) * 0.02)
        self.blocks = nn.ModuleList(
            [_ConformerBlock(d, cfg.heads, cfg.conv_kernel, bias=b) for _ in range(cfg.depth)])
        self.head = _maybe_sn(nn.Linear(d, 1, bias=b), cfg.spectral_norm)
        self.embed_dim = _padded_length(self.n_steps * d)

    def sequence(self, x):
        h = F.silu(self.frontend(x))  # (B, S, 80, 32)
        B, S, H, T = h.shape
        h = self.proj(h.permute(0, 3, 1, 2).reshape(B, T, S * H)) + self.pos_embed
        for blk in self.blocks:
            h = blk(h)
        return h

    def forward(self, x):
        _check_mel(x)
        h = self.sequence(x)
        return DiscOutput(self.head(h.mean(dim=1)), _pad_flat(h, self.embed_dim))


def build_discriminator(kind, cfg=NetsConfig()):
    if kind == "dcnn":
        return DCNNDiscriminator(cfg.dcnn)
    if kind == "vit":
        return ViTDiscriminator(cfg.vit)
    if kind == "conformer":
        return ConformerDiscriminator(cfg.conformer)
    raise ValueError(f"unknown discriminator kind {kind!r}")


def build_discriminators(cfg=NetsConfig()):
    return nn.ModuleList([build_discriminator(k, cfg) for k in cfg.discriminators])


def toy_nets_config(discriminators=ARCH_KINDS):
    """Narrow widths for tests and CPU smoke runs."""
    return NetsConfig(
        generator=GeneratorConfig(base_channels=8, residual_channels=16, n_residual=2),
        dcnn=DCNNConfig(base_channels=4),
        vit=ViTConfig(patch_size=8, width=16, heads=2, depth=1),
        conformer=ConformerConfig(width=16, heads=2, depth=1, conv_kernel=7, frontend_channels=2),
        discriminators=tuple(discriminators),
    )


def small_nets_config(discriminators=ARCH_KINDS):
    """Reduced widths that keep every block of the default stack; CPU-trainable."""
    return NetsConfig(
        generator=GeneratorConfig(base_channels=32, residual_channels=64, n_residual=3),
        dcnn=DCNNConfig(base_channels=16),
        vit=ViTConfig(patch_size=8, width=64, heads=4, depth=2),
        conformer=ConformerConfig(width=64, heads=4, depth=2, conv_kernel=15, frontend_channels=8),
        discriminators=tuple(discriminators),
    )


def param_digest(module):
    """SHA-256 over all parameter bytes, for before/after update checks."""
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
