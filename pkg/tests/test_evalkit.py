import csv

import numpy as np
import pytest
import torch

from memdiff.evalkit import (
    MetricsReport, ProtocolError, SeedStability, classify_cell, eval_imagination, eval_next_frame, evaluate,
    noise_robustness, noise_std, prepare, recall_curve, seed_stability, simple_recall,
)
from memdiff.gridworld import PALETTE, MazeSpec, build_episode, build_simple_dataset
from memdiff.metrics import psnr
from memdiff.world_model import autoregressive_rollout


class MirrorOracle:
    """Perfect recall: in a mirrored window frame t+1 equals frame 2*mid - t - 1."""

    def __init__(self, mid):
        self.mid = mid

    def predict_next(self, frames, actions, seed=0, lcb_frames=None):
        t = frames.shape[1] - 1
        return frames[:, 2 * self.mid - t - 1].clone()


class CopyLast:
    def predict_next(self, frames, actions, seed=0, lcb_frames=None):
        return frames[:, -1].clone()


class NoisyCopy:
    """Copy-last plus seed-dependent noise, to exercise seed plumbing."""

    def predict_next(self, frames, actions, seed=0, lcb_frames=None):
        g = torch.Generator().manual_seed(seed)
        return (frames[:, -1] + 0.05 * torch.randn(frames[:, -1].shape, generator=g)).clamp(0, 1)


@pytest.fixture(scope="module")
def episodes():
    return [build_episode(MazeSpec(15, 20, 3), seed=s, forward_steps=25, tour_markers=6) for s in range(4)]


def test_prepare_rejects_unmirrored(episodes):
    frames, actions = prepare(episodes, 16)
    assert frames.shape == (4, 17, 32, 32, 3) and actions.shape == (4, 16)
    bad = build_episode(MazeSpec(15, 20, 3), seed=9, forward_steps=25, tour_markers=6)
    bad.frames = bad.frames.copy()
    bad.frames[-1] = 0
    with pytest.raises(ProtocolError):
        prepare([bad], 50)


def test_perfect_recall_scores_cap(episodes):
    rep = eval_next_frame(MirrorOracle(8), episodes, 16)
    assert rep.avg_psnr == rep.fin_psnr == 100.0
    assert rep.ssim == pytest.approx(1.0)
    assert len(rep.per_step_psnr) == 8 and len(rep.per_episode_final_psnr) == 4
    imag = eval_imagination(MirrorOracle(8), episodes, 16)
    assert imag.avg_psnr == 100.0 and imag.mode == "imagination"


def test_copy_last_matches_direct_computation(episodes):
    rep = eval_next_frame(CopyLast(), episodes, 16)
    frames, _ = prepare(episodes, 16)
    f = frames.numpy()
    expected = [np.mean([psnr(f[b, t], f[b, t + 1]) for b in range(4)]) for t in range(8, 16)]
    assert np.allclose(rep.per_step_psnr, expected)
    assert rep.fin_psnr == pytest.approx(expected[-1])
    assert rep.avg_psnr == pytest.approx(np.mean(expected))


def test_imagination_feeds_back_predictions(episodes):
    seen = []

    class Recorder(CopyLast):
        def predict_next(self, frames, actions, seed=0, lcb_frames=None):
            seen.append(frames.shape[1])
            return torch.full_like(frames[:, -1], 0.5)

    rep = eval_imagination(Recorder(), episodes, 16)
    assert seen == list(range(9, 17))
    assert len(rep.per_step_psnr) == 8


def test_rollout_horizon_one_matches_next_frame(episodes):
    frames, actions = prepare(episodes, 16)
    model = NoisyCopy()
    roll = autoregressive_rollout(model, frames[:, :9], actions, 1, seed=5)
    from memdiff.diffusion import derive_seed
    direct = model.predict_next(frames[:, :9], actions[:, :9], seed=derive_seed(5, 8))
    assert torch.equal(roll[:, 0], direct)


def test_evaluate_dispatch(episodes):
    with pytest.raises(ValueError):
        evaluate(CopyLast(), episodes, 16, mode="dream")


def test_report_round_trip(tmp_path, episodes):
    rep = eval_next_frame(NoisyCopy(), episodes, 16, seed=3, model_id="m")
    rep.save(tmp_path / "r.json")
    assert MetricsReport.load(tmp_path / "r.json") == rep


def test_recall_curve_files(tmp_path, episodes):
    a = eval_next_frame(MirrorOracle(8), episodes, 16, model_id="oracle")
    b = eval_next_frame(CopyLast(), episodes, 16, model_id="copy")
    csv_path, png_path = recall_curve(a, tmp_path, others={"copy": b})
    rows = list(csv.reader(csv_path.open()))
    assert rows[0] == ["step", "oracle", "copy"] and len(rows) == 9
    assert png_path.stat().st_size > 0


def test_noise_std_scales():
    assert noise_std(2.5, "255") == pytest.approx(2.5 / 255)
    assert noise_std(2.5, "signed") == pytest.approx(1.25)
    assert noise_std(0.1, "unit") == 0.1
    with pytest.raises(ValueError):
        noise_std(1, "percent")


def test_noise_robustness(episodes):
    clean = noise_robustness(CopyLast(), episodes, 50, std=0.0, mode="full")
    ref = eval_next_frame(CopyLast(), episodes, 50)
    assert np.allclose(clean.per_step_psnr, ref.per_step_psnr)
    res = noise_robustness(CopyLast(), episodes, 50, std=0.5, scale="unit", mode="full")
    assert res.noisy_frames == list(range(20, 31))
    assert res.target_index[0] == 26
    noisy_targets = [t for t in res.target_index if t - 1 in res.noisy_frames]
    assert res.psnr_at(35) > res.mean_over(noisy_targets) + 3
    # ssm-only noise leaves a copy predictor untouched
    ssm = noise_robustness(CopyLast(), episodes, 50, std=0.5, scale="unit", mode="ssm")
    assert np.allclose(ssm.per_step_psnr, ref.per_step_psnr)
    with pytest.raises(ValueError):
        noise_robustness(CopyLast(), episodes, 50, mode="pixels")


def test_seed_stability(episodes):
    res = seed_stability(lambda s: eval_next_frame(NoisyCopy(), episodes, 16, seed=s), n_seeds=3, base_seed=10)
    assert res.seeds == [10, 11, 12]
    m, sd = res.summary()["avg_psnr"]
    assert sd < 0.5 and sd > 0
    fixed = SeedStability([0, 1], [MetricsReport(10, 9, .5, [], 16, "next"), MetricsReport(12, 9, .5, [], 16, "next")])
    assert fixed.summary()["avg_psnr"] == (11.0, 1.0)


def test_classify_cell_and_simple_recall():
    ds = build_simple_dataset()
    for ep in ds[:8]:
        img = ep.observations
        assert classify_cell(img[0], tuple(ep.meta["marker_cell"]), PALETTE) == ep.meta["color"]
        assert classify_cell(img[3], tuple(ep.meta["marker_cell"]), PALETTE) == -1
    assert simple_recall(MirrorOracle(3), ds)["correct"] == 34
    # the marker is out of view in frame 5, so copying it can never recover the colour
    assert simple_recall(CopyLast(), ds)["correct"] == 0


def test_oracle_sandwich(episodes):
    class Gray(CopyLast):
        def predict_next(self, frames, actions, seed=0, lcb_frames=None):
            return torch.full_like(frames[:, -1], 0.5)

    top = eval_next_frame(MirrorOracle(8), episodes, 16)
    gray = eval_next_frame(Gray(), episodes, 16)
    assert all(g < t for g, t in zip(gray.per_episode_final_psnr, top.per_episode_final_psnr))
    assert gray.avg_psnr < top.avg_psnr
