"""Encoder with two output branches: T2 reconstruction and vessel synthesis.

The encoder is four blocks of ``convs_per_block`` convolutions (each followed
by instance normalisation) and a 2x2 max-pool, then a latent space of residual
blocks. Each output branch mirrors the encoder with nearest-neighbour
upsampling in place of pooling and skip connections from the matching encoder
block. The first block of the synthesis branch also receives the feature map
of the first decoder block.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

N_LEVELS = 4
SYNTHESIS = "synthesis"


@dataclass
class ArchitectureConfig:
    input_hw: tuple[int, int] = (96, 96)
    base_channels: int = 8
    channel_multipliers: tuple[int, ...] = (1, 2, 4, 8)
    latent_residual_blocks: int = 3
    convs_per_block: int = 3
    kernel_size: int = 3
    negative_slope: float = 0.2
    modalities: tuple[str, ...] = ("t2",)
    seg_output_activation: str = "sigmoid"
    recon_output_activation: str = "sigmoid"

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.channel_multipliers = tuple(int(v) for v in self.channel_multipliers)
        self.modalities = tuple(self.modalities)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_multipliers]

    def validate(self) -> None:
        if len(self.channel_multipliers) != N_LEVELS:
            raise ValueError(f"need {N_LEVELS} channel multipliers, got {len(self.channel_multipliers)}")
        h, w = self.input_hw
        step = 2**N_LEVELS
        if h % step or w % step or h < step or w < step:
            raise ValueError(
                f"input {h}x{w} is not compatible with {N_LEVELS} pooling stages "
                f"(height and width must be positive multiples of {step})"
            )
        if self.kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        if self.convs_per_block < 1 or self.latent_residual_blocks < 0:
            raise ValueError("convs_per_block must be >= 1 and latent_residual_blocks >= 0")
        if not self.modalities:
            raise ValueError("at least one input modality is required")
        for act in (self.seg_output_activation, self.recon_output_activation):
            if act != "sigmoid":
                raise ValueError(f"unsupported output activation {act!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_hw"] = list(self.input_hw)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["modalities"] = list(self.modalities)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureConfig":
        return cls(**d)


def full_scale_config() -> ArchitectureConfig:
    """400x400 input with a channel plan that lands close to 26.7M parameters."""
    return ArchitectureConfig(input_hw=(400, 400), base_channels=46)


def desk_scale_config() -> ArchitectureConfig:
    return ArchitectureConfig(input_hw=(96, 96), base_channels=8)


class ConvBlock(nn.Sequential):
    def __init__(self, in_ch: int, out_ch: int, n_convs: int, kernel_size: int, slope: float):
        layers: list[nn.Module] = []
        for i in range(n_convs):
            layers += [
                nn.Conv2d(in_ch if i == 0 else out_ch, out_ch, kernel_size, padding=kernel_size // 2),
                nn.InstanceNorm2d(out_ch, affine=True),
                nn.LeakyReLU(slope),
            ]
        super().__init__(*layers)


class ResidualBlock(nn.Module):
    def __init__(self, ch: int, kernel_size: int, slope: float):
        super().__init__()
        pad = kernel_size // 2
        self.conv1 = nn.Conv2d(ch, ch, kernel_size, padding=pad)
        self.norm1 = nn.InstanceNorm2d(ch, affine=True)
        self.conv2 = nn.Conv2d(ch, ch, kernel_size, padding=pad)
        self.norm2 = nn.InstanceNorm2d(ch, affine=True)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act(x + y)


class Encoder(nn.Module):
    def __init__(self, cfg: ArchitectureConfig, in_ch: int = 1):
        super().__init__()
        chans = cfg.channels
        self.blocks = nn.ModuleList()
        prev = in_ch
        for ch in chans:
            self.blocks.append(ConvBlock(prev, ch, cfg.convs_per_block, cfg.kernel_size, cfg.negative_slope))
            prev = ch
        self.pool = nn.MaxPool2d(2)
        self.latent = nn.Sequential(
            *[ResidualBlock(chans[-1], cfg.kernel_size, cfg.negative_slope) for _ in range(cfg.latent_residual_blocks)]
        )

    def forward(self, x):
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        return self.latent(x), skips


class OutputBranch(nn.Module):
    """Upsampling branch; block 0 works at the coarsest skip resolution.

    ``extra_first`` is the number of additional channels concatenated into the
    first block (decoder features for the synthesis branch).
    """

    def __init__(self, cfg: ArchitectureConfig, extra_first: int = 0):
        super().__init__()
        chans = cfg.channels
        self.blocks = nn.ModuleList()
        prev = chans[-1]
        for i, ch in enumerate(reversed(chans)):
            in_ch = prev + ch + (extra_first if i == 0 else 0)
            self.blocks.append(ConvBlock(in_ch, ch, cfg.convs_per_block, cfg.kernel_size, cfg.negative_slope))
            prev = ch
        self.head = nn.Conv2d(chans[0], 1, 1)

    def forward(self, z, skips, extra=None):
        feats = []
        x = z
        for i, block in enumerate(self.blocks):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            parts = [x, skips[-1 - i]]
            if i == 0 and extra:
                parts.extend(extra)
            x = block(torch.cat(parts, dim=1))
            feats.append(x)
        return torch.sigmoid(self.head(x)), feats


class SynthModel(nn.Module):
    """Shared encoder, one reconstruction branch per modality, one synthesis branch.

    ``log_var_seg`` and ``log_var_loc`` are the log-variances of the
    uncertainty-weighted two-task loss.
    """

    def __init__(self, cfg: ArchitectureConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        top = cfg.channels[-1]
        self.encoder = Encoder(cfg, in_ch=len(cfg.modalities))
        self.decoders = nn.ModuleDict({m: OutputBranch(cfg) for m in cfg.modalities})
        self.synthesis = OutputBranch(cfg, extra_first=top * len(cfg.modalities))
        self.log_var_seg = nn.Parameter(torch.zeros(()))
        self.log_var_loc = nn.Parameter(torch.zeros(()))

    def forward(self, x):
        """Return ``(recon, seg_prob)``; 3D input ``(N, H, W)`` gives 3D outputs.

        With several modalities ``recon`` is the first modality's reconstruction;
        use :meth:`forward_all` for every branch.
        """
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(1)
        recons, seg = self.forward_all(x)
        recon = recons[self.cfg.modalities[0]]
        if squeeze:
            return recon.squeeze(1), seg.squeeze(1)
        return recon, seg

    def forward_all(self, x):
        self._check_input(x)
        z, skips = self.encoder(x)
        recons, first_feats = {}, []
        for name, branch in self.decoders.items():
            recon, feats = branch(z, skips)
            recons[name] = recon
            first_feats.append(feats[0])
        seg, _ = self.synthesis(z, skips, extra=first_feats)
        return recons, seg

    def _check_input(self, x):
        h, w = self.cfg.input_hw
        n_mod = len(self.cfg.modalities)
        if x.dim() != 4 or x.shape[1] != n_mod or tuple(x.shape[-2:]) != (h, w):
            raise ValueError(
                f"expected input of shape (N, {n_mod}, {h}, {w}), got {tuple(x.shape)}"
            )

    def synthesis_parameters(self):
        return list(self.synthesis.parameters())

    def uncertainty_parameters(self):
        return [self.log_var_seg, self.log_var_loc]


def build_model(cfg: ArchitectureConfig, seed: int = 0) -> SynthModel:
    """Build a model whose initial weights depend only on ``(cfg, seed)``."""
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = SynthModel(cfg)
    return model


def freeze_synthesis_branch(model: SynthModel, frozen: bool = True) -> None:
    for p in model.synthesis.parameters():
        p.requires_grad_(not frozen)


def set_uncertainty_trainable(model: SynthModel, trainable: bool) -> None:
    for p in model.uncertainty_parameters():
        p.requires_grad_(trainable)


def parameter_count(model: nn.Module) -> int:
    """Number of scalar parameters, frozen ones included."""
    return sum(p.numel() for p in model.parameters())


def sigma_squares(model: SynthModel) -> tuple[float, float]:
    return torch.exp(model.log_var_seg).item(), torch.exp(model.log_var_loc).item()


@torch.no_grad()
def predict_slices(model: SynthModel, t2: np.ndarray, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Run slice-wise inference on ``(N, H, W)``; returns ``(recon, seg_prob)``."""
    model.eval()
    recons, segs = [], []
    for i in range(0, len(t2), batch_size):
        r, s = model(torch.from_numpy(np.ascontiguousarray(t2[i : i + batch_size])))
        recons.append(r.numpy())
        segs.append(s.numpy())
    return np.concatenate(recons), np.concatenate(segs)


def save_checkpoint(model: SynthModel, path: str | Path, **meta) -> Path:
    """Write ``<path>`` (state dict) and ``<path>.json`` (config + metadata)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), path)
    sidecar = {
        "architecture": model.cfg.to_dict(),
        "log_var_seg": model.log_var_seg.item(),
        "log_var_loc": model.log_var_loc.item(),
        **meta,
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    return path


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path: str | Path) -> tuple[SynthModel, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    meta = json.loads(sidecar_path(path).read_text())
    model = SynthModel(ArchitectureConfig.from_dict(meta["architecture"]))
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    return model, meta
