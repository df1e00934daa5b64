"""Shared neural building blocks for the deblurring model families.

Everything here is a plain ``nn.Module`` operating on NCHW float tensors.
Blocks preserve spatial shape except the pixel shuffles, and all of them are
pure functions of (input, parameters), so they are safe for concurrent
inference with shared read-only weights.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class BlockConfig:
    """Configuration of a single gated conv block."""

    channels: int
    sca_mode: str = "global"  # "global" | "local"
    local_window: int = 16
    dw_expand: int = 2
    ffn_expand: int = 2

    def __post_init__(self) -> None:
        if self.channels % 2 != 0:
            raise ValueError(f"channels must be even, got {self.channels}")
        if self.sca_mode not in ("global", "local"):
            raise ValueError(f"unknown sca_mode {self.sca_mode!r}")
        if self.local_window < 1:
            raise ValueError("local_window must be >= 1")


@dataclass(frozen=True)
class AttentionConfig:
    """Configuration of a transposed-attention transformer block."""

    channels: int
    heads: int
    gdfn_gamma: float = 2.2

    def __post_init__(self) -> None:
        if self.channels % self.heads != 0:
            raise ValueError(
                f"channels {self.channels} not divisible by heads {self.heads}"
            )
        if self.gdfn_gamma <= 0:
            raise ValueError("gdfn_gamma must be positive")


class LayerNorm2d(nn.Module):
    """Per-position channel normalization with learnable affine."""

    def __init__(self, channels: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight.view(1, -1, 1, 1) + self.bias.view(1, -1, 1, 1)


def simple_gate(x: torch.Tensor) -> torch.Tensor:
    """Split channels in half and multiply the halves elementwise."""
    if x.shape[1] % 2 != 0:
        raise ValueError(f"simple_gate needs an even channel count, got {x.shape[1]}")
    x1, x2 = x.chunk(2, dim=1)
    return x1 * x2


class SimpleGate(nn.Module):
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return simple_gate(x)


def local_mean(x: torch.Tensor, window: int) -> torch.Tensor:
    """Per-position mean over a ``window``x``window`` neighborhood.

    The window is clipped at the image border and each position is normalized
    by the number of pixels actually covered, so a window at least as large as
    the image reproduces the global mean at every position exactly.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    n, c, h, w = x.shape
    lo = (window - 1) // 2
    hi = window // 2

    # Integral image with a zero row/column prepended.  Accumulate in float64:
    # the subtractive box evaluation cancels catastrophically in float32.
    acc = x.double() if x.dtype in (torch.float16, torch.bfloat16, torch.float32) else x
    s = torch.cumsum(torch.cumsum(acc, dim=-1), dim=-2)
    s = F.pad(s, (1, 0, 1, 0))

    i = torch.arange(h, device=x.device)
    j = torch.arange(w, device=x.device)
    i0 = (i - lo).clamp(min=0)
    i1 = (i + hi + 1).clamp(max=h)
    j0 = (j - lo).clamp(min=0)
    j1 = (j + hi + 1).clamp(max=w)

    r0 = i0.view(-1, 1)
    r1 = i1.view(-1, 1)
    c0 = j0.view(1, -1)
    c1 = j1.view(1, -1)
    box = (
        s[..., r1, c1] - s[..., r0, c1] - s[..., r1, c0] + s[..., r0, c0]
    )
    count = ((i1 - i0).view(-1, 1) * (j1 - j0).view(1, -1)).to(s.dtype)
    return (box / count).to(x.dtype)


class GlobalChannelAttention(nn.Module):
    """Channel attention from globally pooled statistics.

    One scalar per channel: pointwise conv of the global spatial mean, then a
    channelwise rescale of the input.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = x.mean(dim=(-2, -1), keepdim=True)
        return x * self.conv(pooled)

    def init_identity(self) -> None:
        # Makes the module a no-op at insertion time (scale == 1 everywhere).
        nn.init.zeros_(self.conv.weight)
        nn.init.ones_(self.conv.bias)


class LocalChannelAttention(nn.Module):
    """Channel attention from windowed local statistics.

    Same pointwise conv as the global variant, but applied per position to the
    clipped-window local mean, yielding a spatially varying channel scale.
    As the window grows to cover the image this converges to the global form.
    """

    def __init__(self, channels: int, window: int):
        super().__init__()
        if window < 1:
            raise ValueError("window must be >= 1")
        self.conv = nn.Conv2d(channels, channels, kernel_size=1)
        self.window = window

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        stats = local_mean(x, self.window)
        return x * self.conv(stats)


class SpatialAttention(nn.Module):
    """Spatial gate from channel mean+max maps, conv, and a sigmoid.

    Replicate padding keeps the attention map spatially uniform on constant
    inputs.
    """

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        self.conv = nn.Conv2d(
            2, 1, kernel_size, padding=kernel_size // 2, padding_mode="replicate"
        )

    def attention_map(self, x: torch.Tensor) -> torch.Tensor:
        mean_map = x.mean(dim=1, keepdim=True)
        max_map = x.amax(dim=1, keepdim=True)
        return torch.sigmoid(self.conv(torch.cat([mean_map, max_map], dim=1)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.attention_map(x)


def _make_channel_attention(channels: int, mode: str, window: int) -> nn.Module:
    if mode == "global":
        return GlobalChannelAttention(channels)
    if mode == "local":
        return LocalChannelAttention(channels, window)
    raise ValueError(f"unknown sca_mode {mode!r}")


class NAFBlock(nn.Module):
    """Activation-free residual block: gated conv stage plus gated FFN stage.

    Both residual branches are scaled by zero-initialized per-channel weights,
    so a freshly built block is exactly the identity map.
    """

    def __init__(
        self,
        channels: int,
        sca_mode: str = "global",
        local_window: int = 16,
        dw_expand: int = 2,
        ffn_expand: int = 2,
        use_spatial_attention: bool = False,
    ):
        super().__init__()
        cfg = BlockConfig(channels, sca_mode, local_window, dw_expand, ffn_expand)
        dw_channels = channels * dw_expand
        ffn_channels = channels * ffn_expand

        self.norm1 = LayerNorm2d(channels)
        self.conv1 = nn.Conv2d(channels, dw_channels, 1)
        self.conv2 = nn.Conv2d(
            dw_channels, dw_channels, 3, padding=1, groups=dw_channels
        )
        self.gate = SimpleGate()
        self.sca = _make_channel_attention(dw_channels // 2, sca_mode, local_window)
        self.spatial = SpatialAttention() if use_spatial_attention else None
        self.conv3 = nn.Conv2d(dw_channels // 2, channels, 1)

        self.norm2 = LayerNorm2d(channels)
        self.conv4 = nn.Conv2d(channels, ffn_channels, 1)
        self.conv5 = nn.Conv2d(ffn_channels // 2, channels, 1)

        self.beta = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.gamma = nn.Parameter(torch.zeros(1, channels, 1, 1))
        self.config = cfg

    def forward(self, inp: torch.Tensor) -> torch.Tensor:
        if inp.shape[1] != self.config.channels:
            raise ValueError(
                f"expected {self.config.channels} channels, got {inp.shape[1]}"
            )
        x = self.norm1(inp)
        x = self.conv1(x)
        x = self.conv2(x)
        x = self.gate(x)
        x = self.sca(x)
        if self.spatial is not None:
            x = self.spatial(x)
        x = self.conv3(x)
        y = inp + x * self.beta

        x = self.conv4(self.norm2(y))
        x = self.gate(x)
        x = self.conv5(x)
        return y + x * self.gamma


class TransposedAttention(nn.Module):
    """Multi-head attention over the channel dimension (MDTA).

    The attention matrix is (C/heads)x(C/heads) per head, so the cost grows
    linearly with the number of pixels.
    """

    def __init__(self, channels: int, heads: int, bias: bool = False):
        super().__init__()
        if channels % heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {heads}")
        self.heads = heads
        self.temperature = nn.Parameter(torch.ones(heads, 1, 1))
        self.qkv = nn.Conv2d(channels, channels * 3, 1, bias=bias)
        self.qkv_dwconv = nn.Conv2d(
            channels * 3, channels * 3, 3, padding=1, groups=channels * 3, bias=bias
        )
        self.project_out = nn.Conv2d(channels, channels, 1, bias=bias)
        self.store_attention = False
        self.last_attention: torch.Tensor | None = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        head_dim = c // self.heads

        q, k, v = self.qkv_dwconv(self.qkv(x)).chunk(3, dim=1)
        q = q.reshape(b, self.heads, head_dim, h * w)
        k = k.reshape(b, self.heads, head_dim, h * w)
        v = v.reshape(b, self.heads, head_dim, h * w)

        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)

        attn = (q @ k.transpose(-2, -1)) * self.temperature
        attn = attn.softmax(dim=-1)
        if self.store_attention:
            self.last_attention = attn.detach()

        out = (attn @ v).reshape(b, c, h, w)
        return self.project_out(out)


class GatedFeedForwardLite(nn.Module):
    """Gated feed-forward with a single depthwise conv on the gate branch.

    Both branches are pointwise projections to the expanded width; only the
    gate branch gets the 3x3 depthwise conv and the SiLU before the product.
    """

    def __init__(self, channels: int, gamma: float = 2.2, bias: bool = False):
        super().__init__()
        hidden = int(channels * gamma)
        self.project_in = nn.Conv2d(channels, hidden * 2, 1, bias=bias)
        self.dwconv = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden, bias=bias)
        self.project_out = nn.Conv2d(hidden, channels, 1, bias=bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        gate, value = self.project_in(x).chunk(2, dim=1)
        return self.project_out(F.silu(self.dwconv(gate)) * value)


class TransformerBlock(nn.Module):
    """Pre-norm transposed-attention block with the lite gated feed-forward."""

    def __init__(self, channels: int, heads: int, gdfn_gamma: float = 2.2):
        super().__init__()
        self.norm1 = LayerNorm2d(channels)
        self.attn = TransposedAttention(channels, heads)
        self.norm2 = LayerNorm2d(channels)
        self.ffn = GatedFeedForwardLite(channels, gdfn_gamma)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.ffn(self.norm2(x))


def pixel_shuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Rearrange (N, C*r^2, H, W) -> (N, C, H*r, W*r).

    Layout rule: output[n, c, h*r + i, w*r + j] == input[n, c*r*r + i*r + j, h, w].
    """
    if x.shape[1] % (r * r) != 0:
        raise ValueError(f"channels {x.shape[1]} not divisible by r^2={r * r}")
    return F.pixel_shuffle(x, r)


def pixel_unshuffle(x: torch.Tensor, r: int) -> torch.Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    if x.shape[-2] % r != 0 or x.shape[-1] % r != 0:
        raise ValueError(f"spatial dims {tuple(x.shape[-2:])} not divisible by r={r}")
    return F.pixel_unshuffle(x, r)
