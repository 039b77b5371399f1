"""Convolutional frame autoencoder producing one compact feature vector per frame."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """Raised when a loss or activation turns non-finite."""


@dataclass
class TokenizerConfig:
    image_size: int = 32
    channels: tuple[int, int] = (32, 64)
    latent_channels: int = 4
    epochs: int = 30
    batch_size: int = 64
    lr: float = 2e-3
    seed: int = 0

    @property
    def feature_dim(self) -> int:
        side = self.image_size // 8
        return self.latent_channels * side * side

    @classmethod
    def large_scale(cls) -> "TokenizerConfig":
        # 9x9 map with 16 channels gives 1296-dim features
        return cls(image_size=72, latent_channels=16)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TokenizerConfig":
        d = dict(d)
        d["channels"] = tuple(d.get("channels", (32, 64)))
        return cls(**d)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class FrameTokenizer(nn.Module):
    """Three stride-2 stages down to an (image/8)^2 map, flattened to a feature vector."""

    def __init__(self, config: TokenizerConfig | None = None):
        super().__init__()
        self.config = config = config or TokenizerConfig()
        c1, c2 = config.channels
        zc = config.latent_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(3, c1, 4, stride=2, padding=1),
            ResBlock(c1),
            nn.Conv2d(c1, c2, 4, stride=2, padding=1),
            ResBlock(c2),
            nn.Conv2d(c2, c2, 4, stride=2, padding=1),
            ResBlock(c2),
            nn.SiLU(),
            nn.Conv2d(c2, zc, 1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(zc, c2, 1),
            ResBlock(c2),
            nn.ConvTranspose2d(c2, c2, 4, stride=2, padding=1),
            ResBlock(c2),
            nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1),
            ResBlock(c1),
            nn.ConvTranspose2d(c1, c1, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(c1, 3, 3, padding=1),
        )
        self.frozen = False

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def _check_images(self, images: torch.Tensor) -> None:
        s = self.config.image_size
        if images.shape[-3:] != (s, s, 3):
            raise ValueError(f"expected (..., {s}, {s}, 3) images, got {tuple(images.shape)}")

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        """(..., H, W, 3) images in [0, 1] -> (..., D) features."""
        self._check_images(images)
        lead = images.shape[:-3]
        x = images.reshape(-1, *images.shape[-3:]).permute(0, 3, 1, 2) * 2 - 1
        z = self.encoder(x)
        return z.reshape(*lead, self.feature_dim)

    def decode_raw(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim}-dim features, got {features.shape[-1]}")
        lead = features.shape[:-1]
        side = self.config.image_size // 8
        z = features.reshape(-1, self.config.latent_channels, side, side)
        x = self.decoder(z)
        return ((x + 1) / 2).permute(0, 2, 3, 1).reshape(*lead, *x.shape[2:], 3)

    def decode(self, features: torch.Tensor) -> torch.Tensor:
        """(..., D) features -> (..., H, W, 3) images clamped to [0, 1]."""
        return self.decode_raw(features).clamp(0, 1)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        return self.decode_raw(self.encode(images))

    def freeze(self) -> "FrameTokenizer":
        self.frozen = True
        self.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        return super().train(mode and not getattr(self, "frozen", False))


def _to_tensor(frames) -> torch.Tensor:
    if isinstance(frames, torch.Tensor):
        return frames.float() if frames.dtype != torch.uint8 else frames.float() / 255
    arr = np.asarray(frames)
    if arr.dtype == np.uint8:
        return torch.from_numpy(arr.astype(np.float32) / 255.0)
    return torch.from_numpy(arr.astype(np.float32))


@torch.no_grad()
def reconstruction_psnr(tok: FrameTokenizer, frames, batch_size: int = 256) -> float:
    x = _to_tensor(frames)
    errs = []
    for i in range(0, len(x), batch_size):
        xb = x[i:i + batch_size]
        errs.append(((tok.decode(tok.encode(xb)) - xb) ** 2).flatten(1).mean(1))
    mse = torch.cat(errs).mean().item()
    return 100.0 if mse == 0 else min(100.0, 10 * math.log10(1.0 / mse))


def train_tokenizer(frames, config: TokenizerConfig | None = None, val_frames=None,
                    history: list | None = None) -> FrameTokenizer:
    """Fit the autoencoder with an MSE objective on (N, H, W, 3) frames.

    ``history`` (if given) receives one dict per epoch with train/val losses.
    """
    config = config or TokenizerConfig()
    torch.manual_seed(config.seed)
    tok = FrameTokenizer(config)
    x = _to_tensor(frames)
    xv = _to_tensor(val_frames) if val_frames is not None else None
    opt = torch.optim.Adam(tok.parameters(), lr=config.lr)
    steps_per_epoch = max(1, math.ceil(len(x) / config.batch_size))
    sched = torch.optim.lr_scheduler.OneCycleLR(
        opt, max_lr=config.lr, total_steps=config.epochs * steps_per_epoch, pct_start=0.1)
    g = torch.Generator().manual_seed(config.seed)
    for epoch in range(config.epochs):
        tok.train()
        perm = torch.randperm(len(x), generator=g)
        total = 0.0
        for i in range(steps_per_epoch):
            xb = x[perm[i * config.batch_size:(i + 1) * config.batch_size]]
            loss = F.mse_loss(tok(xb), xb)
            if not torch.isfinite(loss):
                raise NumericalError(f"tokenizer loss became {loss.item()} at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            total += loss.item()
        rec = {"epoch": epoch + 1, "train_mse": total / steps_per_epoch}
        if xv is not None:
            tok.eval()
            with torch.no_grad():
                rec["val_mse"] = F.mse_loss(tok(xv[:1024]), xv[:1024]).item()
        log.info("tokenizer %s", rec)
        if history is not None:
            history.append(rec)
    tok.eval()
    return tok


def arch_hash(config: TokenizerConfig) -> str:
    blob = json.dumps({k: v for k, v in config.to_dict().items() if k not in ("epochs", "lr", "seed", "batch_size")},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_tokenizer(tok: FrameTokenizer, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    torch.save(tok.state_dict(), path / "blob.pt")
    c = tok.config
    sidecar = {"D": c.feature_dim, "image_dims": [c.image_size, c.image_size, 3],
               "arch_hash": arch_hash(c), "training_seed": c.seed, "config": c.to_dict()}
    (path / "sidecar.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_tokenizer(path: str | Path) -> FrameTokenizer:
    path = Path(path)
    sidecar = json.loads((path / "sidecar.json").read_text())
    tok = FrameTokenizer(TokenizerConfig.from_dict(sidecar["config"]))
    tok.load_state_dict(torch.load(path / "blob.pt", weights_only=True))
    return tok.freeze()
