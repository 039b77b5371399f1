"""Forward/backward evaluation protocols and reports.

An evaluation batch is a list of episodes sliced to context L (L + 1 frames,
mirrored about index L/2). Only the L/2 predictions of the returning half are
scored.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .diffusion import derive_seed
from .gridworld import Episode, slice_context
from .metrics import batch_psnr, batch_ssim
from .world_model import autoregressive_rollout

log = logging.getLogger(__name__)


class ProtocolError(ValueError):
    """Episodes do not satisfy the mirrored forward/backward layout."""


@dataclass
class MetricsReport:
    avg_psnr: float
    fin_psnr: float
    ssim: float
    per_step_psnr: list[float]
    context_len: int
    mode: str
    model_id: str = ""
    seed: int = 0
    per_step_ssim: list[float] = field(default_factory=list)
    per_episode_final_psnr: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text()))


def prepare(episodes: Sequence[Episode], context: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Slice to ``context`` and check the mirror layout; returns float frames and action codes."""
    sliced = [ep if len(ep) == context + 1 else slice_context(ep, context) for ep in episodes]
    frames = np.stack([s.frames for s in sliced])
    mid = context // 2
    for k in range(1, mid + 1):
        if not np.array_equal(frames[:, mid + k], frames[:, mid - k]):
            raise ProtocolError(f"frames {mid + k} and {mid - k} differ: episodes are not mirrored")
    actions = np.stack([s.action_codes() for s in sliced])
    return torch.from_numpy(frames.astype(np.float32) / 255.0), torch.from_numpy(actions)


def _report(preds: torch.Tensor, gt: torch.Tensor, context: int, mode: str, model_id: str, seed: int,
            config: dict | None = None) -> MetricsReport:
    """preds, gt: (B, L/2, H, W, 3)."""
    B, S = gt.shape[:2]
    p = batch_psnr(preds.numpy(), gt.numpy()).reshape(B, S)
    s = batch_ssim(preds.numpy(), gt.numpy()).reshape(B, S)
    return MetricsReport(
        avg_psnr=float(p.mean()), fin_psnr=float(p[:, -1].mean()), ssim=float(s.mean()),
        per_step_psnr=p.mean(0).tolist(), context_len=context, mode=mode, model_id=model_id, seed=seed,
        per_step_ssim=s.mean(0).tolist(), per_episode_final_psnr=p[:, -1].tolist(), config=config or {},
    )


def _batches(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(n, i + size))


def next_frame_predictions(model, frames: torch.Tensor, actions: torch.Tensor, seed: int,
                           lcb_frames: torch.Tensor | None = None, batch_size: int = 64) -> torch.Tensor:
    """Predict every returning-half frame from its ground-truth prefix: (B, L/2, H, W, 3)."""
    L = actions.shape[1]
    mid = L // 2
    out = []
    for t in range(mid, L):
        step = []
        for sl in _batches(len(frames), batch_size):
            kw = {} if lcb_frames is None else {"lcb_frames": lcb_frames[sl, :t + 1]}
            step.append(model.predict_next(frames[sl, :t + 1], actions[sl, :t + 1],
                                           seed=derive_seed(seed, t, sl.start), **kw))
        out.append(torch.cat(step))
    return torch.stack(out, dim=1)


def eval_next_frame(model, episodes: Sequence[Episode], context: int, seed: int = 0, model_id: str = "",
                    batch_size: int = 64) -> MetricsReport:
    frames, actions = prepare(episodes, context)
    preds = next_frame_predictions(model, frames, actions, seed, batch_size=batch_size)
    mid = context // 2
    return _report(preds, frames[:, mid + 1:], context, "next", model_id, seed)


def eval_imagination(model, episodes: Sequence[Episode], context: int, seed: int = 0, model_id: str = "",
                     batch_size: int = 64, horizon: int | None = None) -> MetricsReport:
    """Roll out the returning half autoregressively from the ground-truth first half."""
    frames, actions = prepare(episodes, context)
    mid = context // 2
    horizon = mid if horizon is None else horizon
    chunks = []
    for sl in _batches(len(frames), batch_size):
        chunks.append(autoregressive_rollout(model, frames[sl, :mid + 1], actions[sl], horizon,
                                             seed=derive_seed(seed, sl.start)))
    preds = torch.cat(chunks)
    return _report(preds, frames[:, mid + 1:mid + 1 + horizon], context, "imagination", model_id, seed)


def evaluate(model, episodes, context: int, mode: str = "next", seed: int = 0, model_id: str = "") -> MetricsReport:
    if mode == "next":
        return eval_next_frame(model, episodes, context, seed, model_id)
    if mode == "imagination":
        return eval_imagination(model, episodes, context, seed, model_id)
    raise ValueError(f"unknown evaluation mode {mode!r}")


def recall_curve(report: MetricsReport, out_dir: str | Path, name: str = "recall",
                 others: dict[str, MetricsReport] | None = None) -> tuple[Path, Path]:
    """Write per-step PSNR as CSV (one row per prediction step) and a PNG plot."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = {report.model_id or "model": report, **(others or {})}
    csv_path = out_dir / f"{name}.csv"
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", *curves])
        for i in range(len(report.per_step_psnr)):
            w.writerow([i + 1, *(f"{r.per_step_psnr[i]:.4f}" for r in curves.values())])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for label, r in curves.items():
        ax.plot(np.arange(1, len(r.per_step_psnr) + 1), r.per_step_psnr, marker="o", ms=3, label=label)
    ax.set_xlabel("prediction step")
    ax.set_ylabel("PSNR (dB)")
    ax.set_title(f"context {report.context_len}")
    ax.legend()
    fig.tight_layout()
    png_path = out_dir / f"{name}.png"
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return csv_path, png_path


# ----------------------------------------------------------------------------
# robustness and stability


@dataclass
class NoiseResult:
    per_step_psnr: list[float]
    target_index: list[int]
    noisy_frames: list[int]
    mode: str
    std: float

    def to_dict(self) -> dict:
        return asdict(self)

    def psnr_at(self, frame: int) -> float:
        return self.per_step_psnr[self.target_index.index(frame)]

    def mean_over(self, frames: Sequence[int]) -> float:
        return float(np.mean([self.psnr_at(f) for f in frames]))


def noise_std(std: float, scale: str = "255") -> float:
    """Convert a noise std quoted on another pixel scale to the [0, 1] scale."""
    if scale == "255":
        return std / 255.0
    if scale == "signed":      # std quoted on [-1, 1] images
        return std / 2.0
    if scale == "unit":
        return std
    raise ValueError(f"unknown noise scale {scale!r}")


def noise_robustness(model, episodes: Sequence[Episode], context: int = 50, std: float = 2.5,
                     window: int = 11, scale: str = "255", mode: str = "ssm", seed: int = 0) -> NoiseResult:
    """Gaussian noise on the ``window`` middle context frames.

    ``mode="ssm"`` corrupts only the long-context input; ``mode="full"`` also
    corrupts the frames in the diffusion window. Targets stay clean.
    """
    if mode not in ("ssm", "full"):
        raise ValueError(f"unknown noise mode {mode!r}")
    frames, actions = prepare(episodes, context)
    mid = context // 2
    lo = mid - window // 2
    noisy_idx = list(range(lo, lo + window))
    sigma = noise_std(std, scale)
    g = torch.Generator().manual_seed(seed)
    noisy = frames.clone()
    if sigma > 0:
        noisy[:, noisy_idx] += sigma * torch.randn(noisy[:, noisy_idx].shape, generator=g)
    diff_frames = noisy if mode == "full" else frames
    preds = next_frame_predictions(model, diff_frames, actions, seed, lcb_frames=noisy)
    gt = frames[:, mid + 1:]
    p = batch_psnr(preds.numpy(), gt.numpy()).reshape(gt.shape[:2]).mean(0)
    return NoiseResult(p.tolist(), list(range(mid + 1, context + 1)), noisy_idx, mode, sigma)


def generalization_eval(model, episodes: Sequence[Episode], train_context: int, eval_context: int,
                        seed: int = 0, model_id: str = "", mode: str = "next") -> MetricsReport:
    if eval_context < train_context:
        log.warning("evaluating at a shorter context (%d) than training (%d)", eval_context, train_context)
    rep = evaluate(model, episodes, eval_context, mode, seed, model_id)
    rep.config = dict(rep.config, train_context=train_context)
    return rep


@dataclass
class SeedStability:
    seeds: list[int]
    reports: list[MetricsReport]

    def summary(self) -> dict[str, tuple[float, float]]:
        out = {}
        for key in ("avg_psnr", "fin_psnr", "ssim"):
            v = np.array([getattr(r, key) for r in self.reports])
            out[key] = (float(v.mean()), float(v.std()))
        return out


def seed_stability(eval_fn: Callable[[int], MetricsReport], n_seeds: int = 4, base_seed: int = 0) -> SeedStability:
    seeds = [base_seed + i for i in range(n_seeds)]
    return SeedStability(seeds, [eval_fn(s) for s in seeds])


# ----------------------------------------------------------------------------
# Simple-dataset recall


def classify_cell(image: np.ndarray, cell: tuple[int, int], palette: Sequence[tuple[int, int, int]]) -> int:
    """Nearest colour (palette index, or -1 for the empty-floor colour) of a window cell."""
    from .gridworld import EMPTY_RGB, window_pixels

    rs, cs = window_pixels(*cell)
    mean = np.asarray(image, dtype=np.float64)[rs, cs].reshape(-1, 3).mean(0)
    choices = np.asarray([EMPTY_RGB, *palette], dtype=np.float64) / 255.0
    return int(np.argmin(((choices - mean) ** 2).sum(1))) - 1


def simple_recall(model, episodes: Sequence[Episode], seed: int = 0) -> dict:
    """Predict the last frame of each Simple episode from its ground-truth prefix and
    classify the marker cell. Returns counts and per-episode predictions."""
    from .gridworld import PALETTE

    frames = torch.from_numpy(np.stack([ep.frames for ep in episodes]).astype(np.float32) / 255.0)
    actions = torch.from_numpy(np.stack([ep.action_codes() for ep in episodes]))
    t = frames.shape[1] - 2
    pred = model.predict_next(frames[:, :t + 1], actions[:, :t + 1], seed=derive_seed(seed, t)).numpy()
    guesses, truth = [], []
    for img, ep in zip(pred, episodes):
        guesses.append(classify_cell(img, tuple(ep.meta["marker_cell"]), PALETTE))
        truth.append(int(ep.meta["color"]))
    correct = int(sum(g == c for g, c in zip(guesses, truth)))
    return {"correct": correct, "total": len(episodes), "guesses": guesses, "truth": truth, "frames": pred}
