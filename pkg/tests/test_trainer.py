import json

import numpy as np
import pytest
import torch

from memdiff.diffusion import DenoiserConfig, PAD_ACTION
from memdiff.gridworld import MazeSpec, build_episode
from memdiff.ssm import SSMConfig
from memdiff.tokenizer import FrameTokenizer, TokenizerConfig
from memdiff.trainer import (
    FreezeViolation, RunConfig, StageOrderError, assemble_batch, load_denoiser, load_lcb, read_sidecar,
    resolve_checkpoint, save_checkpoint, sha256_file, train_stage1, train_stage2, window_arrays,
)
import memdiff.trainer as trainer


@pytest.fixture(scope="module")
def episodes():
    return [build_episode(MazeSpec(15, 20, 3), seed=s, forward_steps=8, tour_markers=4) for s in range(12)]


@pytest.fixture(scope="module")
def tokenizer():
    return FrameTokenizer(TokenizerConfig(latent_channels=1)).freeze()


@pytest.fixture(autouse=True)
def tiny_profile(monkeypatch):
    monkeypatch.setattr(trainer, "desk_ssm", lambda: SSMConfig(model_dim=8, state_dim=4, expand=1))
    monkeypatch.setattr(trainer, "denoiser_config", lambda profile, d: DenoiserConfig(
        feature_dim=d, action_dim=4, cond_hidden=8, channels=(8, 8, 8), emb_dim=8))


def run(stage, **kw):
    base = dict(stage=stage, seq_len=8, batch_size=4, iterations=3, eval_every=1, lr=1e-3)
    base.update(kw)
    return RunConfig(**base)


def test_run_config_rejects_unknown_keys():
    with pytest.raises(KeyError):
        RunConfig.from_dict({"stage": "lcb", "learning_rate": 1.0})
    with pytest.raises(ValueError):
        RunConfig(stage="pretrain")
    assert RunConfig(seed=1).hash() != RunConfig(seed=2).hash()


def test_window_arrays(episodes):
    frames, actions = window_arrays(episodes[:3], 8)
    assert frames.shape == (3, 9, 32, 32, 3) and actions.shape == (3, 8)
    assert np.array_equal(frames[:, 5], frames[:, 3])


def test_assemble_batch(episodes):
    a = assemble_batch(episodes, "diffuser", 8, 6, seed=3)
    b = assemble_batch(episodes, "diffuser", 8, 6, seed=3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert a["history"].shape == (6, 4, 32, 32, 3) and a["window_actions"].shape == (6, 4)
    for i, t in enumerate(a["t"]):
        assert np.array_equal(a["history"][i, -1], a["prefix_frames"][i, t])
        assert np.array_equal(a["target"][i], a["prefix_frames"][i, t + 1])
        assert a["window_actions"][i, -1] == a["prefix_actions"][i, t]
        assert (a["window_actions"][i, :max(0, 3 - t)] == PAD_ACTION).all()
    lcb = assemble_batch(episodes, "lcb", 8, 5, seed=0)
    assert lcb["frames"].shape == (5, 9, 32, 32, 3)
    with pytest.raises(ValueError):
        assemble_batch(episodes, "lcb", 18, 2, seed=0)


def test_stage_order(episodes, tokenizer):
    with pytest.raises(StageOrderError):
        train_stage1(run("lcb"), episodes, None)
    with pytest.raises(StageOrderError):
        train_stage2(run("diffuser"), episodes, tokenizer, None)
    with pytest.raises(StageOrderError):
        resolve_checkpoint("/nonexistent/run", "lcb")


def test_resolve_ignores_other_stages(tmp_path, tokenizer):
    from memdiff.tokenizer import save_tokenizer
    save_tokenizer(tokenizer, tmp_path / "tokenizer")
    with pytest.raises(StageOrderError):
        resolve_checkpoint(tmp_path, "lcb")


def test_checkpoint_sidecar_and_tamper_detection(tmp_path):
    m = torch.nn.Linear(2, 2)
    path = save_checkpoint(m, tmp_path, "lcb", 7, {"config": {}})
    assert path == tmp_path / "lcb" / "0000007"
    meta = read_sidecar(tmp_path / "lcb")
    assert meta["blob_sha256"] == sha256_file(path / "blob.pt") and meta["iteration"] == 7
    (path / "blob.pt").write_bytes(b"tampered")
    with pytest.raises(RuntimeError):
        read_sidecar(path)


def test_two_stage_pipeline_and_freeze(tmp_path, episodes, tokenizer):
    out = tmp_path / "run"
    hist = []
    lcb = train_stage1(run("lcb"), episodes, tokenizer, episodes[:2], out, hist)
    assert hist and "val_second_half" in hist[-1]
    blob = resolve_checkpoint(out, "lcb") / "blob.pt"
    before = blob.read_bytes()
    meta = read_sidecar(out / "lcb")
    assert meta["seq_len"] == 8 and meta["D"] == tokenizer.feature_dim

    loaded = load_lcb(out)
    den = train_stage2(run("diffuser", lcb_ckpt=str(out)), episodes, tokenizer, loaded, out)
    assert blob.read_bytes() == before
    side = read_sidecar(out / "diffuser")
    assert side["K"] == 4 and side["steps"] == den.config.edm.steps and side["ablate_state_trained"] is False
    assert set(side["sigma"]) == {"min", "max", "data", "rho"}
    back = load_denoiser(out)
    for k, v in den.state_dict().items():
        assert torch.equal(v, back.state_dict()[k])


def test_freeze_violation_detected(episodes, tokenizer, monkeypatch):
    lcb = train_stage1(run("lcb"), episodes, tokenizer)
    real = trainer.diffusion_loss

    def sneaky(model, *a, **kw):
        with torch.no_grad():
            next(lcb.parameters()).add_(1.0)
        return real(model, *a, **kw)

    monkeypatch.setattr(trainer, "diffusion_loss", sneaky)
    with pytest.raises(FreezeViolation):
        train_stage2(run("diffuser"), episodes, tokenizer, lcb)


def test_ablate_state_flag_persists(tmp_path, episodes, tokenizer):
    out = tmp_path / "abl"
    train_stage1(run("lcb"), episodes, tokenizer, out=out)
    train_stage2(run("diffuser", ablate_state=True, lcb_ckpt=str(out)), episodes, tokenizer, load_lcb(out), out)
    assert load_denoiser(out).ablate_state_trained
    assert json.loads((resolve_checkpoint(out, "diffuser") / "sidecar.json").read_text())["ablate_state_trained"]
