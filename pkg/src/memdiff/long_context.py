"""Long-context branch: a recurrent world model over per-frame features.

Input at step t is ``[f_t, emb(a_t)]``; output t is the predicted feature of
frame t + 1. The same module, decoded through the tokenizer, is the stand-alone
feature-space world model baseline.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .ssm import SSMConfig, make_backbone
from .tokenizer import FrameTokenizer, NumericalError

log = logging.getLogger(__name__)

N_ACTIONS = 4


@dataclass
class LCBConfig:
    feature_dim: int = 64
    action_dim: int = 16
    backbone: str = "mamba"
    ssm: SSMConfig = field(default_factory=SSMConfig)
    seq_len: int = 16
    lr: float = 5e-5
    weight_decay: float = 0.0
    batch_size: int = 136
    iterations: int = 70_000
    grad_clip: float = 10.0
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LCBConfig":
        d = dict(d)
        d["ssm"] = SSMConfig(**d.get("ssm", {}))
        return cls(**d)


class LongContextBranch(nn.Module):
    def __init__(self, config: LCBConfig):
        super().__init__()
        self.config = c = config
        self.action_embed = nn.Embedding(N_ACTIONS, c.action_dim)
        self.in_proj = nn.Linear(c.feature_dim + c.action_dim, c.ssm.model_dim)
        self.norm_in = nn.LayerNorm(c.ssm.model_dim)
        self.backbone = make_backbone(c.backbone, c.ssm)
        self.norm_out = nn.LayerNorm(c.ssm.model_dim)
        self.head = nn.Linear(c.ssm.model_dim, c.feature_dim)
        # input/target standardisation, filled from the training set
        self.register_buffer("feat_mean", torch.zeros(c.feature_dim))
        self.register_buffer("feat_std", torch.ones(c.feature_dim))

    def set_feature_stats(self, feats: torch.Tensor) -> None:
        flat = feats.reshape(-1, feats.shape[-1])
        self.feat_mean.copy_(flat.mean(0))
        self.feat_std.copy_(flat.std(0).clamp_min(1e-4))

    def _inputs(self, feats, actions):
        if feats.shape[-1] != self.config.feature_dim:
            raise ValueError(f"expected {self.config.feature_dim}-dim features, got {feats.shape[-1]}")
        z = (feats - self.feat_mean) / self.feat_std
        return self.in_proj(torch.cat([z, self.action_embed(actions)], dim=-1))

    def _readout(self, u, y):
        return self.head(self.norm_out(u + y)) * self.feat_std + self.feat_mean

    def forward(self, feats: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        """(B, T, D) features and (B, T) action codes -> (B, T, D) next-feature predictions."""
        if feats.shape[:2] != actions.shape[:2]:
            raise ValueError("features and actions must have the same (B, T)")
        u = self._inputs(feats, actions)
        return self._readout(u, self.backbone(self.norm_in(u)))

    def init_state(self, batch: int, device=None):
        return self.backbone.init_state(batch, device)

    def step(self, state, feat_t: torch.Tensor, action_t: torch.Tensor):
        u = self._inputs(feat_t, action_t)
        state, y = self.backbone.step(state, self.norm_in(u))
        return state, self._readout(u, y)

    def stream(self, feats: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        state = self.init_state(feats.shape[0], feats.device)
        outs = []
        for t in range(feats.shape[1]):
            state, y = self.step(state, feats[:, t], actions[:, t])
            outs.append(y)
        return torch.stack(outs, dim=1)


def lcb_loss(predicted: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(predicted.shape)} vs {tuple(target.shape)}")
    return F.mse_loss(predicted, target)


def train_lcb(feats: torch.Tensor, actions: torch.Tensor, config: LCBConfig,
              val: tuple[torch.Tensor, torch.Tensor] | None = None,
              history: list | None = None, eval_every: int = 250) -> LongContextBranch:
    """Teacher-forced next-feature regression.

    ``feats``: (N, L + 1, D) tokenizer features of mirrored windows;
    ``actions``: (N, L) action codes. Input is frames 0..L-1, target frames 1..L.
    """
    torch.manual_seed(config.seed)
    model = LongContextBranch(config)
    model.set_feature_stats(feats)
    opt = torch.optim.AdamW(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=config.lr, total_steps=config.iterations,
                                                pct_start=0.05)
    g = torch.Generator().manual_seed(config.seed)
    n = feats.shape[0]
    for it in range(1, config.iterations + 1):
        model.train()
        idx = torch.randint(0, n, (config.batch_size,), generator=g)
        f, a = feats[idx], actions[idx]
        loss = lcb_loss(model(f[:, :-1], a), f[:, 1:])
        if not torch.isfinite(loss):
            raise NumericalError(f"long-context loss became {loss.item()} at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
        opt.step()
        sched.step()
        if history is not None and (it % eval_every == 0 or it == 1):
            rec = {"iteration": it, "train_loss": loss.item()}
            if val is not None:
                rec.update(evaluate_lcb(model, *val))
            history.append(rec)
            log.info("lcb %s", rec)
    model.eval()
    return model


@torch.no_grad()
def evaluate_lcb(model: LongContextBranch, feats: torch.Tensor, actions: torch.Tensor) -> dict:
    model.eval()
    pred = model(feats[:, :-1], actions)
    err = ((pred - feats[:, 1:]) ** 2).mean(dim=(0, 2))
    half = actions.shape[1] // 2
    return {"val_loss": err.mean().item(), "val_first_half": err[:half].mean().item(),
            "val_second_half": err[half:].mean().item(),
            "val_final": err[-1].item()}


@torch.no_grad()
def lcb_rollout_images(model: LongContextBranch, tokenizer: FrameTokenizer, frames: torch.Tensor,
                       actions: torch.Tensor, mode: str = "next") -> torch.Tensor:
    """Decode long-context predictions to images.

    ``frames``: (B, P, H, W, 3) prefix in [0, 1]; ``actions``: (B, A) codes with
    A >= P - 1. ``mode="next"`` decodes teacher-forced predictions for frames
    1..P (needs A >= P); ``mode="imagine"`` consumes the prefix and then feeds
    its own predicted features back for the remaining A - P + 1 actions
    (known to drift, kept for inspection).
    """
    if actions.shape[1] == 0:
        return frames.new_zeros(frames.shape[0], 0, *frames.shape[2:])
    feats = tokenizer.encode(frames)
    if mode == "next":
        T = min(frames.shape[1], actions.shape[1])
        return tokenizer.decode(model(feats[:, :T], actions[:, :T]))
    if mode != "imagine":
        raise ValueError(f"unknown rollout mode {mode!r}")
    state = model.init_state(frames.shape[0])
    P = frames.shape[1]
    for t in range(P):
        state, pred = model.step(state, feats[:, t], actions[:, t])
    outs = [pred]
    for t in range(P, actions.shape[1]):
        state, pred = model.step(state, pred, actions[:, t])
        outs.append(pred)
    return tokenizer.decode(torch.stack(outs, dim=1))
