"""Model families assembled from the shared blocks.

Four families are provided behind one declarative :class:`ModelConfig`:

* ``nafnet`` -- the U-shaped gated-conv baseline grid (C{width}-L{blocks}).
* ``nafreplocal`` -- width-32 variant with windowed channel attention in every
  block, an extra global channel-attention module after the middle block, and
  reparameterized first/last convolutions.
* ``restormerl`` -- slimmed channel-attention transformer with the lite gated
  feed-forward and a global residual.
* ``sa_nafnet`` -- the baseline topology with spatial attention in the
  outermost blocks, sized to fit the efficiency budgets.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import yaml

from .arch_core import (
    GlobalChannelAttention,
    NAFBlock,
    TransformerBlock,
    pixel_shuffle,
)
from .reparam import RepConv, RepConvSpec

FAMILIES = ("nafnet", "nafreplocal", "restormerl", "sa_nafnet")
SCALE_MULTIPLE = 16  # 4 resolution halvings


class ConfigError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Declarative description of one architecture instance.

    For the conv families ``enc_blocks``/``dec_blocks`` list blocks per
    encoder/decoder level (4 levels) and ``middle_blocks`` sits at the
    bottleneck.  For ``restormerl`` the three paired levels are listed and
    ``middle_blocks`` is the latent (fourth-scale) depth.
    """

    family: str = "nafnet"
    width: int = 16
    enc_blocks: tuple[int, ...] = (1, 1, 1, 28)
    middle_blocks: int = 1
    dec_blocks: tuple[int, ...] = (1, 1, 1, 1)
    heads: tuple[int, ...] = (1, 2, 4, 8)
    gdfn_gamma: float = 2.2
    sca_mode: str = "global"
    local_window: int = 768
    first_conv_kernel: int = 3
    use_middle_scag: bool = False
    use_reparam: bool = False
    reparam_branch_norm: bool = True
    use_refinement: bool = False
    refinement_blocks: int = 4
    global_residual: bool = True
    spatial_attention_levels: tuple[int, ...] = ()

    def validate(self) -> list[str]:
        problems = []
        if self.family not in FAMILIES:
            problems.append(f"unknown family {self.family!r}")
            return problems
        if self.width < 2 or self.width % 2 != 0:
            problems.append(f"width must be an even integer >= 2, got {self.width}")
        if self.family == "restormerl":
            if len(self.enc_blocks) != 3 or len(self.dec_blocks) != 3:
                problems.append(
                    "restormerl uses 3 paired levels plus the latent; "
                    f"got enc={self.enc_blocks}, dec={self.dec_blocks}"
                )
            if len(self.heads) != 4:
                problems.append(f"restormerl needs 4 head counts, got {self.heads}")
            else:
                for i, h in enumerate(self.heads):
                    if (self.width * 2**i) % h != 0:
                        problems.append(
                            f"level {i}: {self.width * 2 ** i} channels not "
                            f"divisible by {h} heads"
                        )
            if self.gdfn_gamma <= 0:
                problems.append("gdfn_gamma must be positive")
        else:
            if len(self.enc_blocks) != 4 or len(self.dec_blocks) != 4:
                problems.append(
                    "conv families use 4 encoder and 4 decoder levels; "
                    f"got enc={self.enc_blocks}, dec={self.dec_blocks}"
                )
            if self.first_conv_kernel % 2 != 1:
                problems.append("first_conv_kernel must be odd")
            if self.sca_mode not in ("global", "local"):
                problems.append(f"unknown sca_mode {self.sca_mode!r}")
            if any(lv < 0 or lv > 3 for lv in self.spatial_attention_levels):
                problems.append("spatial_attention_levels must lie in 0..3")
        if any(b < 0 for b in self.enc_blocks + self.dec_blocks) or (
            self.middle_blocks < 0
        ):
            problems.append("block counts must be non-negative")
        return problems

    def validated(self) -> "ModelConfig":
        problems = self.validate()
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        coerced = dict(data)
        for key in (
            "enc_blocks",
            "dec_blocks",
            "heads",
            "spatial_attention_levels",
        ):
            if key in coerced and coerced[key] is not None:
                coerced[key] = tuple(coerced[key])
        return cls(**coerced)


def _rep_or_conv(
    in_ch: int, out_ch: int, kernel: int, use_reparam: bool, branch_norm: bool = True
) -> nn.Module:
    if use_reparam:
        return RepConv(RepConvSpec(in_ch, out_ch, kernel, use_branch_norm=branch_norm))
    return nn.Conv2d(in_ch, out_ch, kernel, padding=kernel // 2)


class NAFNetFamily(nn.Module):
    """4-scale U-shaped network of gated conv blocks with a global residual."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        config = config.validated()
        self.config = config
        w = config.width

        def block(channels: int, level: int) -> NAFBlock:
            return NAFBlock(
                channels,
                sca_mode=config.sca_mode,
                local_window=config.local_window,
                use_spatial_attention=level in config.spatial_attention_levels,
            )

        self.intro = _rep_or_conv(
            3, w, config.first_conv_kernel, config.use_reparam, config.reparam_branch_norm
        )

        self.encoders = nn.ModuleList()
        self.downs = nn.ModuleList()
        chan = w
        for level, num in enumerate(config.enc_blocks):
            self.encoders.append(
                nn.Sequential(*[block(chan, level) for _ in range(num)])
            )
            self.downs.append(nn.Conv2d(chan, chan * 2, 2, stride=2))
            chan *= 2

        self.middle = nn.Sequential(
            *[block(chan, len(config.enc_blocks)) for _ in range(config.middle_blocks)]
        )
        self.middle_scag = (
            GlobalChannelAttention(chan) if config.use_middle_scag else None
        )

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for level in reversed(range(len(config.dec_blocks))):
            self.ups.append(nn.Conv2d(chan, chan * 2, 1, bias=False))
            chan //= 2
            num = config.dec_blocks[level]
            self.decoders.append(
                nn.Sequential(*[block(chan, level) for _ in range(num)])
            )

        self.ending = _rep_or_conv(
            w, 3, 3, config.use_reparam, config.reparam_branch_norm
        )

    def forward(self, inp: torch.Tensor) -> torch.Tensor:
        h, w = inp.shape[-2:]
        if h % SCALE_MULTIPLE or w % SCALE_MULTIPLE:
            raise ValueError(
                f"input {h}x{w} not divisible by {SCALE_MULTIPLE}; pad first"
            )
        x = self.intro(inp)
        skips = []
        for encoder, down in zip(self.encoders, self.downs):
            x = encoder(x)
            skips.append(x)
            x = down(x)
        x = self.middle(x)
        if self.middle_scag is not None:
            x = self.middle_scag(x)
        for up, decoder, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = pixel_shuffle(up(x), 2)
            x = x + skip
            x = decoder(x)
        x = self.ending(x)
        if self.config.global_residual:
            x = x + inp
        return x


class _Downsample(nn.Module):
    """Halve resolution: 3x3 conv to half the channels, then unshuffle."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels // 2, 3, padding=1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.nn.functional.pixel_unshuffle(self.conv(x), 2)


class _Upsample(nn.Module):
    """Double resolution: 3x3 conv to twice the channels, then shuffle."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels * 2, 3, padding=1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return pixel_shuffle(self.conv(x), 2)


class RestormerL(nn.Module):
    """Slim transposed-attention encoder-decoder emitting a residual image.

    Skip connections concatenate encoder features and reduce them back with a
    pointwise conv, except at the outermost level where the decoder simply
    runs at twice the base width, as in the lineage this model descends from.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        config = config.validated()
        self.config = config
        w = config.width
        heads = config.heads
        gamma = config.gdfn_gamma

        def blocks(channels: int, head: int, n: int) -> nn.Sequential:
            return nn.Sequential(
                *[TransformerBlock(channels, head, gamma) for _ in range(n)]
            )

        self.patch_embed = nn.Conv2d(3, w, 3, padding=1, bias=False)

        self.encoder1 = blocks(w, heads[0], config.enc_blocks[0])
        self.down1 = _Downsample(w)
        self.encoder2 = blocks(w * 2, heads[1], config.enc_blocks[1])
        self.down2 = _Downsample(w * 2)
        self.encoder3 = blocks(w * 4, heads[2], config.enc_blocks[2])
        self.down3 = _Downsample(w * 4)

        self.latent = blocks(w * 8, heads[3], config.middle_blocks)

        self.up3 = _Upsample(w * 8)
        self.reduce3 = nn.Conv2d(w * 8, w * 4, 1, bias=False)
        self.decoder3 = blocks(w * 4, heads[2], config.dec_blocks[2])
        self.up2 = _Upsample(w * 4)
        self.reduce2 = nn.Conv2d(w * 4, w * 2, 1, bias=False)
        self.decoder2 = blocks(w * 2, heads[1], config.dec_blocks[1])
        self.up1 = _Upsample(w * 2)
        self.decoder1 = blocks(w * 2, heads[0], config.dec_blocks[0])

        self.refinement = (
            blocks(w * 2, heads[0], config.refinement_blocks)
            if config.use_refinement
            else None
        )
        self.output = nn.Conv2d(w * 2, 3, 3, padding=1, bias=False)

    def forward(self, inp: torch.Tensor) -> torch.Tensor:
        h, w = inp.shape[-2:]
        if h % SCALE_MULTIPLE or w % SCALE_MULTIPLE:
            raise ValueError(
                f"input {h}x{w} not divisible by {SCALE_MULTIPLE}; pad first"
            )
        e1 = self.encoder1(self.patch_embed(inp))
        e2 = self.encoder2(self.down1(e1))
        e3 = self.encoder3(self.down2(e2))
        x = self.latent(self.down3(e3))

        x = self.decoder3(self.reduce3(torch.cat([self.up3(x), e3], dim=1)))
        x = self.decoder2(self.reduce2(torch.cat([self.up2(x), e2], dim=1)))
        x = self.decoder1(torch.cat([self.up1(x), e1], dim=1))
        if self.refinement is not None:
            x = self.refinement(x)
        residual = self.output(x)
        if self.config.global_residual:
            return inp + residual
        return residual


NAFREPLOCAL_CONFIG = ModelConfig(
    family="nafreplocal",
    width=32,
    enc_blocks=(1, 1, 1, 1),
    middle_blocks=1,
    dec_blocks=(1, 1, 1, 1),
    sca_mode="local",
    local_window=768,
    first_conv_kernel=3,
    use_middle_scag=True,
    use_reparam=True,
)

RESTORMERL_CONFIG = ModelConfig(
    family="restormerl",
    width=16,
    enc_blocks=(2, 2, 2),
    middle_blocks=4,
    dec_blocks=(2, 2, 2),
    heads=(1, 2, 4, 8),
    gdfn_gamma=2.2,
    use_refinement=False,
)

# Widest spatial-attention variant that stays inside both efficiency budgets;
# frozen from the search in scripts/calibrate_configs.py.
SA_NAFNET_CONFIG = ModelConfig(
    family="sa_nafnet",
    width=30,
    enc_blocks=(1, 1, 1, 2),
    middle_blocks=1,
    dec_blocks=(1, 1, 1, 1),
    sca_mode="global",
    spatial_attention_levels=(0, 1),
)


def build_nafnet(width: int = 16, last_enc_blocks: int = 28) -> NAFNetFamily:
    if not 4 <= width <= 64:
        raise ConfigError(f"width must lie in 4..64, got {width}")
    if last_enc_blocks < 1:
        raise ConfigError("last_enc_blocks must be >= 1")
    cfg = ModelConfig(
        family="nafnet",
        width=width,
        enc_blocks=(1, 1, 1, last_enc_blocks),
        middle_blocks=1,
        dec_blocks=(1, 1, 1, 1),
    )
    return NAFNetFamily(cfg)


def build_nafreplocal(config: ModelConfig | None = None) -> NAFNetFamily:
    cfg = config or NAFREPLOCAL_CONFIG
    if cfg.family != "nafreplocal":
        raise ConfigError(f"expected family 'nafreplocal', got {cfg.family!r}")
    return NAFNetFamily(cfg)


def build_restormerl(config: ModelConfig | None = None) -> RestormerL:
    cfg = config or RESTORMERL_CONFIG
    if cfg.family != "restormerl":
        raise ConfigError(f"expected family 'restormerl', got {cfg.family!r}")
    return RestormerL(cfg)


def build_sa_nafnet(config: ModelConfig | None = None) -> NAFNetFamily:
    cfg = config or SA_NAFNET_CONFIG
    if cfg.family != "sa_nafnet":
        raise ConfigError(f"expected family 'sa_nafnet', got {cfg.family!r}")
    return NAFNetFamily(cfg)


def build_model(config: ModelConfig) -> nn.Module:
    config.validated()
    if config.family == "restormerl":
        return RestormerL(config)
    return NAFNetFamily(config)


PRESETS: dict[str, ModelConfig] = {
    "nafnet-c16-l14": ModelConfig(family="nafnet", width=16, enc_blocks=(1, 1, 1, 14)),
    "nafnet-c16-l28": ModelConfig(family="nafnet", width=16, enc_blocks=(1, 1, 1, 28)),
    "nafnet-c24-l14": ModelConfig(family="nafnet", width=24, enc_blocks=(1, 1, 1, 14)),
    "nafnet-c32-l14": ModelConfig(family="nafnet", width=32, enc_blocks=(1, 1, 1, 14)),
    "nafnet-c32-l28": ModelConfig(family="nafnet", width=32, enc_blocks=(1, 1, 1, 28)),
    "nafreplocal": NAFREPLOCAL_CONFIG,
    "restormerl": RESTORMERL_CONFIG,
    "sa-nafnet": SA_NAFNET_CONFIG,
}


def load_model_config(source: str | Path) -> ModelConfig:
    """Resolve a preset name or a YAML config file into a ModelConfig."""
    if str(source) in PRESETS:
        return PRESETS[str(source)]
    path = Path(source)
    if not path.exists():
        known = ", ".join(sorted(PRESETS))
        raise ConfigError(
            f"{source!r} is neither a preset ({known}) nor an existing config file"
        )
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path} does not hold a config mapping")
    return ModelConfig.from_dict(data).validated()


def dump_model_config(config: ModelConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


CHECKPOINT_FORMAT = 1


def save_checkpoint(
    model: nn.Module,
    path: str | Path,
    ema_state: dict[str, torch.Tensor] | None = None,
) -> Path:
    """Write a self-describing checkpoint: config, weights, optional EMA shadow."""
    path = Path(path)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "state_dict": model.state_dict(),
        "ema_state_dict": ema_state,
        "fused": bool(getattr(model, "reparam_fused", False)),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def read_checkpoint(path: str | Path) -> dict:
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format" not in payload:
        raise CheckpointError(f"{path} is not a model checkpoint")
    if payload["format"] != CHECKPOINT_FORMAT:
        raise CheckpointError(
            f"checkpoint format {payload['format']} != supported {CHECKPOINT_FORMAT}"
        )
    return payload


def load_checkpoint(path: str | Path, prefer_ema: bool = False) -> nn.Module:
    """Rebuild the model from a checkpoint, optionally with the EMA weights."""
    payload = read_checkpoint(path)
    config = ModelConfig.from_dict(payload["config"])
    if payload.get("fused"):
        config = dataclasses.replace(config, use_reparam=False)
    model = build_model(config)
    state = dict(payload["state_dict"])
    if prefer_ema:
        if payload.get("ema_state_dict") is None:
            raise CheckpointError(f"checkpoint {path} carries no EMA weights")
        # The EMA shadow tracks parameters; buffers come from the raw state.
        state.update(payload["ema_state_dict"])
    model.load_state_dict(state)
    if payload.get("fused"):
        model.reparam_fused = True
    model.eval()
    return model
