"""Two-stage training orchestration: tokenizer, long-context branch, then denoiser."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .diffusion import K_FRAMES, PAD_ACTION, DenoiserConfig, EDMConfig, NextFrameDenoiser, diffusion_loss, pad_window
from .gridworld import Episode, slice_context
from .long_context import LCBConfig, LongContextBranch, train_lcb
from .ssm import SSMConfig
from .tokenizer import FrameTokenizer, NumericalError, TokenizerConfig, load_tokenizer, save_tokenizer, train_tokenizer

log = logging.getLogger(__name__)

STAGES = ("tokenizer", "lcb", "diffuser")


class StageOrderError(RuntimeError):
    """An upstream checkpoint required by this stage is missing."""


class FreezeViolation(RuntimeError):
    pass


@dataclass
class RunConfig:
    stage: str = "lcb"
    dataset: str = ""
    seq_len: int = 16
    batch_size: int = 64
    lr: float = 1e-4
    weight_decay: float = 1e-2
    grad_clip: float = 10.0
    iterations: int = 5000
    seed: int = 0
    eval_every: int = 500
    tokenizer_ckpt: str = ""
    lcb_ckpt: str = ""
    backbone: str = "mamba"
    ablate_state: bool = False
    profile: str = "desk"

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


# ----------------------------------------------------------------------------
# profiles


def desk_ssm() -> SSMConfig:
    return SSMConfig(model_dim=96, state_dim=16, expand=2, conv_width=4)


def tokenizer_config(profile: str = "desk", seed: int = 0) -> TokenizerConfig:
    if profile == "large":
        return TokenizerConfig.large_scale()
    return TokenizerConfig(latent_channels=8, epochs=15, lr=3e-3, seed=seed)


def lcb_config(run: RunConfig, feature_dim: int) -> LCBConfig:
    if run.profile == "large":
        return LCBConfig(feature_dim=feature_dim, backbone=run.backbone, ssm=SSMConfig(),
                         seq_len=run.seq_len, lr=5e-5, batch_size=136, iterations=70_000, seed=run.seed)
    return LCBConfig(feature_dim=feature_dim, backbone=run.backbone, ssm=desk_ssm(), seq_len=run.seq_len,
                     lr=run.lr, weight_decay=run.weight_decay, batch_size=run.batch_size,
                     iterations=run.iterations, grad_clip=run.grad_clip, seed=run.seed)


def denoiser_config(profile: str, feature_dim: int) -> DenoiserConfig:
    if profile == "large":
        return DenoiserConfig(feature_dim=feature_dim)
    return DenoiserConfig(feature_dim=feature_dim, action_dim=32, cond_hidden=128,
                          channels=(32, 64, 64), emb_dim=128, edm=EDMConfig())


# ----------------------------------------------------------------------------
# checkpoints


def sha256_file(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(module: nn.Module, root: str | Path, stage: str, iteration: int, sidecar: dict) -> Path:
    path = Path(root) / stage / f"{iteration:07d}"
    path.mkdir(parents=True, exist_ok=True)
    torch.save(module.state_dict(), path / "blob.pt")
    meta = dict(sidecar, stage=stage, iteration=iteration, blob_sha256=sha256_file(path / "blob.pt"))
    (path / "sidecar.json").write_text(json.dumps(meta, indent=1, sort_keys=True, default=str))
    return path


def resolve_checkpoint(path: str | Path, stage: str | None = None) -> Path:
    """Accept a checkpoint dir, a stage dir (latest iteration) or a run dir."""
    path = Path(path)
    if stage and (path / stage).is_dir():
        path = path / stage
    if (path / "sidecar.json").exists():
        return path
    # only iteration directories count, so a run dir never resolves to another stage's checkpoint
    subdirs = sorted(p for p in path.glob("*") if p.name.isdigit() and (p / "sidecar.json").exists()) \
        if path.is_dir() else []
    if not subdirs:
        raise StageOrderError(f"missing {stage or 'upstream'} checkpoint at {path}")
    return subdirs[-1]


def read_sidecar(path: str | Path) -> dict:
    path = resolve_checkpoint(path)
    meta = json.loads((path / "sidecar.json").read_text())
    if "blob_sha256" in meta and sha256_file(path / "blob.pt") != meta["blob_sha256"]:
        raise RuntimeError(f"checkpoint blob at {path} does not match its sidecar hash")
    return meta


def load_lcb(path: str | Path) -> LongContextBranch:
    path = resolve_checkpoint(path, "lcb")
    meta = read_sidecar(path)
    model = LongContextBranch(LCBConfig.from_dict(meta["config"]))
    model.load_state_dict(torch.load(path / "blob.pt", weights_only=True))
    return model.eval().requires_grad_(False)


def load_denoiser(path: str | Path) -> NextFrameDenoiser:
    path = resolve_checkpoint(path, "diffuser")
    meta = read_sidecar(path)
    model = NextFrameDenoiser(DenoiserConfig.from_dict(meta["config"]))
    model.load_state_dict(torch.load(path / "blob.pt", weights_only=True))
    model.ablate_state_trained = bool(meta.get("ablate_state_trained", False))
    return model.eval().requires_grad_(False)


def load_tokenizer_ckpt(path: str | Path) -> FrameTokenizer:
    path = Path(path)
    if not (path / "sidecar.json").exists() and (path / "tokenizer").is_dir():
        path = path / "tokenizer"
    if not (path / "sidecar.json").exists():
        raise StageOrderError(f"missing tokenizer checkpoint at {path}")
    return load_tokenizer(path)


# ----------------------------------------------------------------------------
# batches


def window_arrays(episodes: Sequence[Episode], seq_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Centred mirrored windows: frames (N, L+1, H, W, 3) uint8 and actions (N, L) int64."""
    sliced = [ep if len(ep) == seq_len + 1 else slice_context(ep, seq_len) for ep in episodes]
    return np.stack([s.frames for s in sliced]), np.stack([s.action_codes() for s in sliced])


def assemble_batch(episodes: Sequence[Episode], stage: str, seq_len: int, batch_size: int,
                   seed: int) -> dict:
    """Sample (with replacement) a training batch; deterministic in ``seed``."""
    if any(len(ep) < seq_len + 1 for ep in episodes):
        raise ValueError(f"seq_len {seq_len} exceeds episode length")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(episodes), batch_size)
    frames, actions = window_arrays([episodes[i] for i in idx], seq_len)
    if stage == "lcb":
        return {"frames": frames, "actions": actions}
    if stage != "diffuser":
        raise ValueError(f"no batches for stage {stage!r}")
    t = rng.integers(0, seq_len, batch_size)
    hist_idx = np.clip(t[:, None] + np.arange(-K_FRAMES + 1, 1)[None], 0, None)
    rows = np.arange(batch_size)[:, None]
    act_idx = t[:, None] + np.arange(-K_FRAMES + 1, 1)[None]
    window_actions = np.where(act_idx >= 0, actions[rows, np.clip(act_idx, 0, None)], PAD_ACTION)
    return {
        "history": frames[rows, hist_idx],
        "window_actions": window_actions,
        "target": frames[np.arange(batch_size), t + 1],
        "t": t,
        "prefix_frames": frames,
        "prefix_actions": actions,
    }


def _float(frames: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(frames.astype(np.float32) / 255.0)


@torch.no_grad()
def encode_windows(tokenizer: FrameTokenizer, frames: np.ndarray, chunk: int = 64) -> torch.Tensor:
    out = [tokenizer.encode(_float(frames[i:i + chunk])) for i in range(0, len(frames), chunk)]
    return torch.cat(out)


# ----------------------------------------------------------------------------
# stages


def run_tokenizer_stage(train_frames: np.ndarray, val_frames: np.ndarray | None, config: TokenizerConfig,
                        out: str | Path | None = None, history: list | None = None) -> FrameTokenizer:
    tok = train_tokenizer(train_frames, config, val_frames, history)
    tok.freeze()
    if out is not None:
        save_tokenizer(tok, Path(out) / "tokenizer")
    return tok


def train_stage1(run: RunConfig, episodes: Sequence[Episode], tokenizer: FrameTokenizer | None,
                 val_episodes: Sequence[Episode] | None = None, out: str | Path | None = None,
                 history: list | None = None) -> LongContextBranch:
    """Fit the long-context branch on mirrored windows of length ``run.seq_len``."""
    if tokenizer is None:
        raise StageOrderError("stage 'lcb' requires a tokenizer checkpoint (run train-tokenizer first)")
    tokenizer.freeze()
    before = _param_digest(tokenizer)
    frames, actions = window_arrays(episodes, run.seq_len)
    feats = encode_windows(tokenizer, frames)
    val = None
    if val_episodes:
        vf, va = window_arrays(val_episodes, run.seq_len)
        val = (encode_windows(tokenizer, vf), torch.from_numpy(va))
    config = lcb_config(run, tokenizer.feature_dim)
    model = train_lcb(feats, torch.from_numpy(actions), config, val, history, eval_every=run.eval_every)
    if _param_digest(tokenizer) != before:
        raise FreezeViolation("tokenizer parameters changed during long-context training")
    if out is not None:
        save_checkpoint(model, out, "lcb", config.iterations, {
            "config": config.to_dict(), "run": run.to_dict(), "config_hash": run.hash(),
            "backbone": config.backbone, "D": config.feature_dim, "seq_len": run.seq_len, "seed": run.seed,
            "upstream": {"tokenizer": _tokenizer_hash(run)},
        })
    return model


def _tokenizer_hash(run: RunConfig) -> str | None:
    p = Path(run.tokenizer_ckpt) / "blob.pt" if run.tokenizer_ckpt else None
    if p and not p.exists():
        p = Path(run.tokenizer_ckpt) / "tokenizer" / "blob.pt"
    return sha256_file(p) if p and p.exists() else None


def _param_digest(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@torch.no_grad()
def lcb_outputs(lcb: LongContextBranch, feats: torch.Tensor, actions: torch.Tensor, chunk: int = 256) -> torch.Tensor:
    """Outputs at positions 0..L-1 for windows with L + 1 frames."""
    lcb.eval()
    return torch.cat([lcb(feats[i:i + chunk, :-1], actions[i:i + chunk]) for i in range(0, len(feats), chunk)])


def train_stage2(run: RunConfig, episodes: Sequence[Episode], tokenizer: FrameTokenizer | None,
                 lcb: LongContextBranch | None, out: str | Path | None = None,
                 history: list | None = None, config: DenoiserConfig | None = None,
                 callback=None) -> NextFrameDenoiser:
    """Fit the denoiser on 4-frame windows with the long-context branch frozen.

    ``callback(iteration, model)`` runs every ``eval_every`` iterations and may
    return a dict of extra validation numbers for the history.
    """
    if lcb is None:
        raise StageOrderError("stage 'diffuser' requires a long-context checkpoint (run train-lcb first)")
    if tokenizer is None:
        raise StageOrderError("stage 'diffuser' requires a tokenizer checkpoint")
    tokenizer.freeze()
    lcb.eval().requires_grad_(False)
    lcb_before = _param_digest(lcb)
    lcb_blob_before = sha256_file(Path(resolve_checkpoint(run.lcb_ckpt, "lcb")) / "blob.pt") if run.lcb_ckpt else None

    torch.manual_seed(run.seed)
    frames, actions = window_arrays(episodes, run.seq_len)
    feats = encode_windows(tokenizer, frames)
    acts = torch.from_numpy(actions)
    cached = lcb_outputs(lcb, feats, acts)                       # (N, L, D)

    config = config or denoiser_config(run.profile, tokenizer.feature_dim)
    model = NextFrameDenoiser(config)
    model.fusion.set_feature_stats(cached)
    model.ablate_state_trained = run.ablate_state
    opt = torch.optim.AdamW(model.parameters(), lr=run.lr, weight_decay=run.weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=run.lr, total_steps=run.iterations, pct_start=0.05)
    g = torch.Generator().manual_seed(run.seed)
    rng = np.random.default_rng(run.seed)
    N, L = actions.shape
    offsets = np.arange(-K_FRAMES + 1, 1)
    for it in range(1, run.iterations + 1):
        model.train()
        i = rng.integers(0, N, run.batch_size)
        t = rng.integers(0, L, run.batch_size)
        slots = t[:, None] + offsets[None]
        hist = _float(frames[i[:, None], np.clip(slots, 0, None)])
        wa = torch.from_numpy(np.where(slots >= 0, actions[i[:, None], np.clip(slots, 0, None)], PAD_ACTION))
        lf = cached[torch.from_numpy(i[:, None]), torch.from_numpy(np.clip(slots, 0, None))]
        pad = torch.from_numpy(slots < 0)
        lf[pad] = model.fusion.feat_mean
        target = _float(frames[i, t + 1]).permute(0, 3, 1, 2) * 2 - 1
        cond = model.conditioning(hist, lf, wa, run.ablate_state, generator=g)
        loss = diffusion_loss(model, target, cond, generator=g)
        if not torch.isfinite(loss):
            raise NumericalError(f"diffusion loss became {loss.item()} at iteration {it}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), run.grad_clip)
        opt.step()
        sched.step()
        if history is not None and (it % run.eval_every == 0 or it == 1):
            rec = {"iteration": it, "loss": loss.item()}
            if callback is not None and it % run.eval_every == 0:
                model.eval()
                rec.update(callback(it, model) or {})
            history.append(rec)
            log.info("diffuser %s", rec)
        if out is not None and run.eval_every and it % (run.eval_every * 10) == 0 and it < run.iterations:
            save_checkpoint(model, out, "diffuser", it, _denoiser_sidecar(run, config, lcb_before))

    if _param_digest(lcb) != lcb_before:
        raise FreezeViolation("long-context parameters changed during denoiser training")
    if lcb_blob_before is not None:
        after = sha256_file(Path(resolve_checkpoint(run.lcb_ckpt, "lcb")) / "blob.pt")
        if after != lcb_blob_before:
            raise FreezeViolation("long-context checkpoint blob changed during denoiser training")
    model.eval()
    if out is not None:
        save_checkpoint(model, out, "diffuser", run.iterations, _denoiser_sidecar(run, config, lcb_before))
    return model


def _denoiser_sidecar(run: RunConfig, config: DenoiserConfig, lcb_digest: str) -> dict:
    e = config.edm
    return {
        "config": config.to_dict(), "run": run.to_dict(), "config_hash": run.hash(),
        "K": config.window, "steps": e.steps,
        "sigma": {"min": e.sigma_min, "max": e.sigma_max, "data": e.sigma_data, "rho": e.rho},
        "fusion_dims": {"memory": config.cond_hidden, "action": config.cond_hidden},
        "lcb_checkpoint_hash": lcb_digest, "ablate_state_trained": run.ablate_state, "seed": run.seed,
    }
