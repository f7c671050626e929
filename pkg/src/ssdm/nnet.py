"""1D U-Net noise predictor eps_theta(x_t, t).

Encoder levels run ResBlock -> Attention -> stride-2 conv; the decoder mirrors
them with nearest-neighbour upsampling, concatenated skips, ResBlock and
Attention.  ResBlocks use adaptive group normalization driven by the time
embedding.  Attention output projections start at zero, so every attention
block is the identity at initialization.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class NetConfig:
    base_channels: int = 32
    channel_mults: tuple[int, ...] = (1, 2, 4, 8)
    heads: int = 4
    norm_groups: int = 16
    time_embed_dim: int | None = None
    input_len: int = 1000
    padded_len: int = 1024
    T: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "channel_mults", tuple(int(m) for m in self.channel_mults))
        if self.time_embed_dim is None:
            object.__setattr__(self, "time_embed_dim", 4 * self.base_channels)
        if self.padded_len % (2**self.depth):
            raise ValueError(f"padded_len {self.padded_len} not divisible by 2**{self.depth}")
        if self.padded_len < self.input_len:
            raise ValueError("padded_len must be >= input_len")
        if self.base_channels % self.heads:
            raise ValueError("base_channels must be divisible by heads")
        for c in self.channels:
            if c % self.norm_groups:
                raise ValueError(f"channel count {c} not divisible by norm_groups={self.norm_groups}")
        if self.base_channels % 2:
            raise ValueError("base_channels must be even for the sinusoidal embedding")

    @property
    def depth(self) -> int:
        return len(self.channel_mults)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mults]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**{**d, "channel_mults": tuple(d["channel_mults"])})


FULL_CONFIG = NetConfig(base_channels=192)
DESK_CONFIG = NetConfig()
TINY_CONFIG = NetConfig(base_channels=8, channel_mults=(1, 2), norm_groups=4, input_len=64, padded_len=64)


def sinusoidal_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    """sin/cos features over periods spaced geometrically from 1 to 10*T."""
    half = dim // 2
    k = torch.arange(half, dtype=torch.float64)
    periods = (10.0 * T) ** (k / max(half - 1, 1))
    ang = 2 * math.pi * t.to(torch.float64)[:, None] / periods[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class TimeEmbedding(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.dim = cfg.base_channels
        self.T = cfg.T
        self.fc1 = nn.Linear(cfg.base_channels, cfg.time_embed_dim)
        self.fc2 = nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        e = sinusoidal_embedding(t, self.dim, self.T).to(self.fc1.weight.dtype)
        return self.fc2(F.silu(self.fc1(e)))


class ResBlock(nn.Module):
    """conv3 -> SiLU -> adaptive GroupNorm(temb) -> conv3, plus skip path."""

    def __init__(self, c_in: int, c_out: int, temb_dim: int, groups: int):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.conv1 = nn.Conv1d(c_in, c_out, 3, padding=1)
        self.norm = nn.GroupNorm(groups, c_out)
        self.emb = nn.Linear(temb_dim, 2 * c_out)
        self.conv2 = nn.Conv1d(c_out, c_out, 3, padding=1)
        self.skip = nn.Identity() if c_in == c_out else nn.Conv1d(c_in, c_out, 1)

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        if x.shape[1] != self.c_in:
            raise ValueError(f"ResBlock expects {self.c_in} channels, got {x.shape[1]}")
        h = F.silu(self.conv1(x))
        scale, shift = self.emb(F.silu(temb)).chunk(2, dim=1)
        h = self.norm(h) * (1 + scale[:, :, None]) + shift[:, :, None]
        return self.skip(x) + self.conv2(h)


class AttentionBlock(nn.Module):
    def __init__(self, channels: int, heads: int, groups: int):
        super().__init__()
        if channels % heads or channels % groups:
            raise ValueError(f"{channels} channels not divisible by heads={heads} and groups={groups}")
        self.heads = heads
        self.norm = nn.GroupNorm(groups, channels)
        self.qkv = nn.Conv1d(channels, 3 * channels, 1)
        self.proj = nn.Conv1d(channels, channels, 1)

    def _qkv(self, x: torch.Tensor):
        B, C, L = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        d = C // self.heads
        # (B, heads, L, d)
        return [u.reshape(B, self.heads, d, L).transpose(2, 3).contiguous() for u in (q, k, v)]

    def weights(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax attention weights, shape (B, heads, L, L); rows sum to 1."""
        q, k, _ = self._qkv(x)
        return torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]), dim=-1)

    def mix(self, x: torch.Tensor) -> torch.Tensor:
        """Attention output before the projection and residual add."""
        B, C, L = x.shape
        q, k, v = self._qkv(x)
        a = F.scaled_dot_product_attention(q, k, v)
        return a.transpose(2, 3).reshape(B, C, L)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.proj(self.mix(x))


class UNet1D(nn.Module):
    def __init__(self, cfg: NetConfig, attention: bool = True):
        super().__init__()
        self.cfg = cfg
        self.attention = attention
        g, temb = cfg.norm_groups, cfg.time_embed_dim
        chs = cfg.channels
        self.time = TimeEmbedding(cfg)
        self.stem = nn.Conv1d(1, cfg.base_channels, 3, padding=1)

        self.enc_res = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        self.down = nn.ModuleList()
        c = cfg.base_channels
        for ch in chs:
            self.enc_res.append(ResBlock(c, ch, temb, g))
            self.enc_attn.append(AttentionBlock(ch, cfg.heads, g))
            self.down.append(nn.Conv1d(ch, ch, 3, stride=2, padding=1))
            c = ch
        self.mid_res = ResBlock(c, c, temb, g)
        self.mid_attn = AttentionBlock(c, cfg.heads, g)

        self.up = nn.ModuleList()
        self.dec_res = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        for ch in reversed(chs):
            self.up.append(nn.Conv1d(c, c, 3, padding=1))
            self.dec_res.append(ResBlock(c + ch, ch, temb, g))
            self.dec_attn.append(AttentionBlock(ch, cfg.heads, g))
            c = ch
        self.head_norm = nn.GroupNorm(g, c)
        self.head = nn.Conv1d(c, 1, 3, padding=1)

    def padded_length(self, L: int) -> int:
        if L == self.cfg.input_len:
            return self.cfg.padded_len
        m = 2**self.cfg.depth
        return -(-L // m) * m

    def _attn(self, block: AttentionBlock, h: torch.Tensor) -> torch.Tensor:
        return block(h) if self.attention else h

    def forward(self, x: torch.Tensor, t, check_finite: bool = False) -> torch.Tensor:
        """``x``: (B, 1, L) or (B, L); ``t``: int or (B,) integer tensor."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x[:, None, :]
        B, _, L = x.shape
        if not torch.is_tensor(t):
            t = torch.full((B,), int(t), dtype=torch.long)
        P = self.padded_length(L)
        left = (P - L) // 2
        h = F.pad(x, (left, P - L - left), mode="reflect") if P > L else x

        def guard(name, v):
            if check_finite and not torch.isfinite(v).all():
                raise FloatingPointError(f"non-finite activation after {name}")
            return v

        temb = guard("time_embedding", self.time(t))
        h = guard("stem", self.stem(h))
        skips = []
        for i in range(self.cfg.depth):
            h = guard(f"enc{i}.res", self.enc_res[i](h, temb))
            h = guard(f"enc{i}.attn", self._attn(self.enc_attn[i], h))
            skips.append(h)
            h = guard(f"enc{i}.down", self.down[i](h))
        h = guard("mid.res", self.mid_res(h, temb))
        h = guard("mid.attn", self._attn(self.mid_attn, h))
        for j in range(self.cfg.depth):
            h = guard(f"dec{j}.up", self.up[j](F.interpolate(h, scale_factor=2, mode="nearest")))
            h = torch.cat([h, skips.pop()], dim=1)
            h = guard(f"dec{j}.res", self.dec_res[j](h, temb))
            h = guard(f"dec{j}.attn", self._attn(self.dec_attn[j], h))
        out = guard("head", self.head(F.silu(self.head_norm(h))))
        out = out[:, :, left : left + L]
        return out[:, 0, :] if squeeze else out

    def attention_blocks(self) -> list[AttentionBlock]:
        return [m for m in self.modules() if isinstance(m, AttentionBlock)]


def init_params(cfg: NetConfig, seed: int = 0, dtype=torch.float32) -> UNet1D:
    """Build a U-Net with deterministic fan-in Gaussian weights.

    Group-norm scales are 1 and shifts 0; attention output projections are
    exactly zero.  Biases of all other layers start at zero.
    """
    net = UNet1D(cfg)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, mod in net.named_modules():
            if isinstance(mod, (nn.Conv1d, nn.Linear)):
                fan_in = mod.weight[0].numel()
                mod.weight.copy_(torch.randn(mod.weight.shape, generator=gen) / math.sqrt(fan_in))
                mod.bias.zero_()
            elif isinstance(mod, nn.GroupNorm):
                mod.weight.fill_(1.0)
                mod.bias.zero_()
        for blk in net.attention_blocks():
            blk.proj.weight.zero_()
            blk.proj.bias.zero_()
    return net.to(dtype)


def param_store(net: UNet1D) -> dict[str, torch.Tensor]:
    """Named parameter tensors (the ParamStore view of a network)."""
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


def count_params(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


def unet_forward(x, t, net: UNet1D):
    """Evaluate the network on a 1-D trace or a (B, L) batch; returns the same shape."""
    single = False
    if not torch.is_tensor(x):
        x = torch.as_tensor(x)
    if x.dim() == 1:
        x, single = x[None, :], True
    x = x.to(next(net.parameters()).dtype)
    with torch.no_grad():
        out = net(x, t, check_finite=True)
    return out[0] if single else out


def as_predictor(net: UNet1D, batch_size: int = 64):
    """Wrap a network as a numpy ``model(x_t, t)`` callable for the reverse chain."""
    import numpy as np

    dtype = next(net.parameters()).dtype
    net.eval()

    def model(x, t):
        x = np.atleast_2d(np.asarray(x))
        outs = []
        with torch.no_grad():
            for i in range(0, x.shape[0], batch_size):
                xb = torch.as_tensor(x[i : i + batch_size], dtype=dtype)
                outs.append(net(xb, int(t)).to(torch.float64).numpy())
        return np.concatenate(outs, axis=0)

    return model
