"""Generative branch: EDM-preconditioned next-frame denoiser.

The denoiser sees the last K frames (stacked on channels) and a conditioning
vector made of two independently processed halves: long-context features and
noised action embeddings. Images live in [-1, 1] inside this module.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

K_FRAMES = 4
PAD_ACTION = 4  # extra embedding row for history slots before the first frame


@dataclass
class EDMConfig:
    sigma_data: float = 0.5
    sigma_min: float = 0.002
    sigma_max: float = 5.0
    rho: float = 7.0
    p_mean: float = -0.4
    p_std: float = 1.2
    steps: int = 5

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler needs at least one step")


@dataclass
class DenoiserConfig:
    feature_dim: int = 64
    image_size: int = 32
    window: int = K_FRAMES
    action_dim: int = 512
    cond_hidden: int = 256
    channels: tuple[int, int, int] = (64, 128, 128)
    emb_dim: int = 256
    action_noise: float = 0.05
    edm: EDMConfig = field(default_factory=EDMConfig)

    def __post_init__(self):
        if self.window != K_FRAMES:
            raise ValueError("the generative branch uses exactly 4 history frames")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["edm"] = EDMConfig(**d.get("edm", {}))
        return cls(**d)


def edm_precondition(sigma, sigma_data: float = 0.5):
    """(c_skip, c_out, c_in, c_noise) for noise level sigma (float or tensor)."""
    if isinstance(sigma, torch.Tensor):
        if (sigma <= 0).any():
            raise ValueError("sigma must be positive")
        s2 = sigma ** 2 + sigma_data ** 2
        return sigma_data ** 2 / s2, sigma * sigma_data / s2.sqrt(), 1 / s2.sqrt(), sigma.log() / 4
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    s2 = sigma ** 2 + sigma_data ** 2
    return sigma_data ** 2 / s2, sigma * sigma_data / math.sqrt(s2), 1 / math.sqrt(s2), math.log(sigma) / 4


def loss_weight(sigma, sigma_data: float = 0.5):
    return (sigma ** 2 + sigma_data ** 2) / (sigma * sigma_data) ** 2


def sigma_ladder(steps: int, sigma_min: float, sigma_max: float, rho: float) -> torch.Tensor:
    """Karras schedule with a trailing zero; length steps + 1."""
    if steps == 1:
        return torch.tensor([sigma_max, 0.0])
    i = torch.arange(steps, dtype=torch.float64)
    s = (sigma_max ** (1 / rho) + i / (steps - 1) * (sigma_min ** (1 / rho) - sigma_max ** (1 / rho))) ** rho
    return torch.cat([s, torch.zeros(1, dtype=torch.float64)]).float()


# ----------------------------------------------------------------------------
# conditioning


def mlp(d_in: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d_in), nn.SiLU(), nn.Linear(d_in, d_out))


class FusionModule(nn.Module):
    """Normalised long-context features and noised action embeddings, each through its own MLP."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        w = config.window
        self.window = w
        self.memory_mlp = mlp(w * config.feature_dim, config.cond_hidden)
        self.action_mlp = mlp(w * config.action_dim, config.cond_hidden)
        self.register_buffer("feat_mean", torch.zeros(config.feature_dim))
        self.register_buffer("feat_std", torch.ones(config.feature_dim))

    @property
    def out_dim(self) -> int:
        return 2 * self.memory_mlp[-1].out_features

    def set_feature_stats(self, feats: torch.Tensor) -> None:
        flat = feats.reshape(-1, feats.shape[-1])
        self.feat_mean.copy_(flat.mean(0))
        self.feat_std.copy_(flat.std(0).clamp_min(1e-4))

    def normalize(self, feats: torch.Tensor) -> torch.Tensor:
        return (feats - self.feat_mean) / self.feat_std

    def forward(self, lcb_feats: torch.Tensor, action_embeds: torch.Tensor, ablate_state: bool = False):
        """lcb_feats: (B, 4, D) already-normalised; action_embeds: (B, 4, E)."""
        if lcb_feats.shape[1] != self.window or action_embeds.shape[1] != self.window:
            raise ValueError(f"fusion expects exactly {self.window} features and action embeddings")
        if ablate_state:
            lcb_feats = torch.zeros_like(lcb_feats)
        m = self.memory_mlp(lcb_feats.flatten(1))
        a = self.action_mlp(action_embeds.flatten(1))
        return torch.cat([m, a], dim=-1)


def fuse_conditioning(fusion: FusionModule, lcb_feats, action_embeds, ablate_state: bool = False):
    return fusion(lcb_feats, action_embeds, ablate_state)


@dataclass
class Conditioning:
    history: torch.Tensor   # (B, K, 3, H, W) in [-1, 1]
    vector: torch.Tensor    # (B, 2 * cond_hidden)


# ----------------------------------------------------------------------------
# network


class FourierEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.register_buffer("freqs", torch.randn(dim // 2, generator=torch.Generator().manual_seed(0)) * 4)

    def forward(self, x):
        x = x[:, None] * self.freqs[None] * 2 * math.pi
        return torch.cat([x.cos(), x.sin()], dim=1)


class AdaGroupNorm(nn.Module):
    def __init__(self, ch: int, emb_dim: int, groups: int = 8):
        super().__init__()
        self.norm = nn.GroupNorm(groups, ch, affine=False)
        self.proj = nn.Linear(emb_dim, 2 * ch)

    def forward(self, x, emb):
        scale, shift = self.proj(emb)[:, :, None, None].chunk(2, dim=1)
        return self.norm(x) * (1 + scale) + shift


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int):
        super().__init__()
        self.norm1 = AdaGroupNorm(c_in, emb_dim)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.norm2 = AdaGroupNorm(c_out, emb_dim)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x, emb)))
        h = self.conv2(F.silu(self.norm2(h, emb)))
        return self.skip(x) + h


class UNet(nn.Module):
    """Small UNet on 2x2 patches; the conditioning vector drives every AdaGN and is
    also projected onto the two coarsest feature maps."""

    def __init__(self, config: DenoiserConfig, cond_dim: int):
        super().__init__()
        c0, c1, c2 = config.channels
        e = config.emb_dim
        in_ch = 3 * (config.window + 1)
        self.side = config.image_size // 2
        self.noise_emb = FourierEmbedding(e)
        self.emb = nn.Sequential(nn.Linear(e + cond_dim, e), nn.SiLU(), nn.Linear(e, e))
        self.patch_in = nn.Conv2d(in_ch, c0, 2, stride=2)
        self.enc0 = ResBlock(c0, c0, e)
        self.down1 = nn.Conv2d(c0, c1, 3, stride=2, padding=1)
        self.enc1 = ResBlock(c1, c1, e)
        self.down2 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.mid1 = ResBlock(c2, c2, e)
        self.mid2 = ResBlock(c2, c2, e)
        self.cond_map2 = nn.Linear(cond_dim, c2 * (self.side // 4) ** 2)
        self.cond_map1 = nn.Linear(cond_dim, c1 * (self.side // 2) ** 2)
        self.up2 = nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1)
        self.dec1 = ResBlock(2 * c1, c1, e)
        self.up1 = nn.ConvTranspose2d(c1, c0, 4, stride=2, padding=1)
        self.dec0 = ResBlock(2 * c0, c0, e)
        self.out_norm = nn.GroupNorm(8, c0)
        self.patch_out = nn.Conv2d(c0, 3 * 4, 3, padding=1)
        nn.init.zeros_(self.patch_out.weight)
        nn.init.zeros_(self.patch_out.bias)

    def forward(self, x, c_noise, history, cond):
        B = x.shape[0]
        emb = self.emb(torch.cat([self.noise_emb(c_noise), cond], dim=1))
        h = self.patch_in(torch.cat([x, history.flatten(1, 2)], dim=1))
        h0 = self.enc0(h, emb)
        h1 = self.enc1(self.down1(h0), emb)
        h1 = h1 + self.cond_map1(cond).view(B, -1, *h1.shape[-2:])
        h2 = self.down2(h1)
        h2 = h2 + self.cond_map2(cond).view(B, -1, *h2.shape[-2:])
        h2 = self.mid2(self.mid1(h2, emb), emb)
        u1 = self.dec1(torch.cat([self.up2(h2), h1], dim=1), emb)
        u0 = self.dec0(torch.cat([self.up1(u1), h0], dim=1), emb)
        return F.pixel_shuffle(self.patch_out(F.silu(self.out_norm(u0))), 2)


class NextFrameDenoiser(nn.Module):
    def __init__(self, config: DenoiserConfig | None = None):
        super().__init__()
        self.config = c = config or DenoiserConfig()
        self.action_embed = nn.Embedding(5, c.action_dim)
        self.fusion = FusionModule(c)
        self.net = UNet(c, self.fusion.out_dim)
        self.ablate_state_trained = False

    def conditioning(self, history: torch.Tensor, lcb_feats: torch.Tensor, actions: torch.Tensor,
                     ablate_state: bool = False, generator: torch.Generator | None = None) -> Conditioning:
        """history: (B, K, H, W, 3) in [0, 1]; lcb_feats: (B, K, D) raw; actions: (B, K) codes."""
        emb = self.action_embed(actions)
        if self.training and self.config.action_noise > 0:
            emb = emb + self.config.action_noise * torch.randn(emb.shape, generator=generator)
        feats = self.fusion.normalize(lcb_feats)
        vec = self.fusion(feats, emb, ablate_state)
        hist = history.permute(0, 1, 4, 2, 3) * 2 - 1
        return Conditioning(hist, vec)

    def denoise(self, x: torch.Tensor, sigma: torch.Tensor, cond: Conditioning) -> torch.Tensor:
        """D(x; sigma) = c_skip x + c_out F(c_in x, c_noise, cond); x: (B, 3, H, W) in [-1, 1] space."""
        if not torch.isfinite(x).all():
            raise ValueError("non-finite input to denoiser")
        sigma = torch.as_tensor(sigma, dtype=x.dtype).expand(x.shape[0])
        c_skip, c_out, c_in, c_noise = edm_precondition(sigma, self.config.edm.sigma_data)
        v = lambda t: t[:, None, None, None]  # noqa: E731
        return v(c_skip) * x + v(c_out) * self.net(v(c_in) * x, c_noise, cond.history, cond.vector)

    forward = denoise


def diffusion_loss(model: NextFrameDenoiser, target: torch.Tensor, cond: Conditioning,
                   generator: torch.Generator | None = None, sigma: torch.Tensor | None = None,
                   noise: torch.Tensor | None = None, denoiser=None) -> torch.Tensor:
    """EDM objective; target (B, 3, H, W) in [-1, 1].

    ``denoiser`` overrides the network call (used for oracle checks).
    """
    edm = model.config.edm
    B = target.shape[0]
    if sigma is None:
        sigma = torch.exp(edm.p_mean + edm.p_std * torch.randn(B, generator=generator))
    if noise is None:
        noise = torch.randn(target.shape, generator=generator)
    noisy = target + sigma[:, None, None, None] * noise
    fn = denoiser or model.denoise
    out = fn(noisy, sigma, cond)
    per = ((out - target) ** 2).flatten(1).mean(1)
    return (loss_weight(sigma, edm.sigma_data) * per).mean()


@torch.no_grad()
def heun_sample(model: NextFrameDenoiser, cond: Conditioning, seed: int, steps: int | None = None) -> torch.Tensor:
    """Deterministic EDM Heun sampler; returns (B, H, W, 3) in [0, 1]."""
    edm = model.config.edm
    steps = steps or edm.steps
    sig = sigma_ladder(steps, edm.sigma_min, edm.sigma_max, edm.rho)
    B = cond.vector.shape[0]
    s = model.config.image_size
    g = torch.Generator().manual_seed(int(seed) % (2 ** 63))
    x = torch.randn((B, 3, s, s), generator=g) * sig[0]
    for i in range(steps):
        t, t_next = sig[i], sig[i + 1]
        d = (x - model.denoise(x, t, cond)) / t
        x_next = x + (t_next - t) * d
        if t_next > 0:
            d2 = (x_next - model.denoise(x_next, t_next, cond)) / t_next
            x_next = x + (t_next - t) * (d + d2) / 2
        x = x_next
    return ((x + 1) / 2).clamp(0, 1).permute(0, 2, 3, 1)


def pad_window(x: torch.Tensor, t: int, k: int = K_FRAMES, fill=None) -> torch.Tensor:
    """Slots t-k+1..t along dim 1; indices before 0 repeat ``fill`` (default: element 0)."""
    idx = torch.arange(t - k + 1, t + 1)
    out = x[:, idx.clamp_min(0)]
    if fill is not None and (idx < 0).any():
        out = out.clone()
        out[:, idx < 0] = fill
    return out


def sample_next_frame(model: NextFrameDenoiser, history: torch.Tensor, actions: torch.Tensor,
                      lcb_feats: torch.Tensor, seed: int, steps: int | None = None,
                      ablate_state: bool = False) -> torch.Tensor:
    """history (B, 4, H, W, 3), actions (B, 4), lcb_feats (B, 4, D) -> (B, H, W, 3)."""
    model.eval()
    with torch.no_grad():
        cond = model.conditioning(history, lcb_feats, actions, ablate_state)
    return heun_sample(model, cond, seed, steps)


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1, np.uint64)[0] >> 1)
