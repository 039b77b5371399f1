"""Predictors that turn an observed prefix into the next frame.

Every predictor implements ``predict_next(frames, actions, seed, lcb_frames=None)``
with ``frames`` (B, t+1, H, W, 3) in [0, 1] and ``actions`` (B, t+1) codes, where
``actions[:, t]`` leads from the last frame to the one being predicted.
``lcb_frames`` optionally replaces the frames seen by the long-context branch
(the diffusion window still reads ``frames``).
"""
from __future__ import annotations

import torch

from .diffusion import K_FRAMES, PAD_ACTION, NextFrameDenoiser, derive_seed, heun_sample, pad_window
from .long_context import LongContextBranch
from .tokenizer import FrameTokenizer


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x)


class FeatureWorldModel:
    """Long-context branch alone: decode its next-feature prediction."""

    def __init__(self, tokenizer: FrameTokenizer, lcb: LongContextBranch):
        self.tokenizer = tokenizer
        self.lcb = lcb

    @torch.no_grad()
    def predict_next(self, frames, actions, seed: int = 0, lcb_frames=None):
        frames = _tensor(lcb_frames if lcb_frames is not None else frames).float()
        feats = self.tokenizer.encode(frames)
        pred = self.lcb(feats, _tensor(actions).long())[:, -1]
        return self.tokenizer.decode(pred)


class DiffusionWorldModel:
    """Diffusion next-frame model conditioned on long-context features.

    With ``ablate_state`` the long-context features are zeroed before fusion.
    ``lcb`` may be swapped for any independently trained branch of the same
    feature width without retraining the denoiser.
    """

    def __init__(self, tokenizer: FrameTokenizer, lcb: LongContextBranch, denoiser: NextFrameDenoiser,
                 ablate_state: bool = False, steps: int | None = None):
        self.tokenizer = tokenizer
        self.lcb = lcb
        self.denoiser = denoiser
        self.ablate_state = ablate_state or denoiser.ablate_state_trained
        self.steps = steps

    @torch.no_grad()
    def lcb_features(self, frames: torch.Tensor, actions: torch.Tensor) -> torch.Tensor:
        feats = self.tokenizer.encode(frames)
        return self.lcb(feats, actions)

    @torch.no_grad()
    def conditioning(self, frames, actions, lcb_frames=None):
        frames = _tensor(frames).float()
        actions = _tensor(actions).long()
        t = frames.shape[1] - 1
        src = frames if lcb_frames is None else _tensor(lcb_frames).float()
        lcb_out = self.lcb_features(src, actions)
        feats = pad_window(lcb_out, t, K_FRAMES, fill=self.denoiser.fusion.feat_mean)
        hist = pad_window(frames, t, K_FRAMES)
        acts = pad_window(actions, t, K_FRAMES, fill=PAD_ACTION)
        self.denoiser.eval()
        return self.denoiser.conditioning(hist, feats, acts, self.ablate_state)

    @torch.no_grad()
    def predict_next(self, frames, actions, seed: int = 0, lcb_frames=None):
        cond = self.conditioning(frames, actions, lcb_frames)
        return heun_sample(self.denoiser, cond, seed, self.steps)


def autoregressive_rollout(model, frames, actions, horizon: int, seed: int = 0) -> torch.Tensor:
    """Generate ``horizon`` frames, appending each to the history.

    ``frames``: (B, P, H, W, 3) ground-truth prefix; ``actions``: (B, >= P - 1 + horizon).
    Step i uses seed ``derive_seed(seed, P - 1 + i)`` so that a horizon-1 rollout
    matches a single next-frame prediction at the same position.
    """
    frames = _tensor(frames).float()
    actions = _tensor(actions).long()
    P = frames.shape[1]
    if horizon <= 0:
        return frames.new_zeros(frames.shape[0], 0, *frames.shape[2:])
    if actions.shape[1] < P - 1 + horizon:
        raise ValueError("not enough actions for the requested horizon")
    out = []
    for i in range(horizon):
        t = P - 1 + i
        nxt = model.predict_next(frames, actions[:, :t + 1], seed=derive_seed(seed, t))
        out.append(nxt)
        frames = torch.cat([frames, nxt.unsqueeze(1)], dim=1)
    return torch.stack(out, dim=1)
