"""Command line entry point: ``memdiff <subcommand> [--key value ...] [key=value ...]``.

Configuration is resolved as defaults < ``--config`` JSON file < ``MEMDIFF_<KEY>``
environment variables < command line flags and ``key=value`` overrides. Unknown
keys are rejected. Every run writes its resolved configuration next to its outputs
(``<out>/config.<subcommand>.json``), and that file alone reproduces the run via
``--config``.

Exit codes: 0 ok, 2 config error, 3 missing upstream artifact, 4 numeric failure,
5 I/O error. Failures print a single ``error: <Class>: <message>`` line to stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger("memdiff")

ENV_PREFIX = "MEMDIFF_"
EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    pass


class MissingArtifact(RuntimeError):
    pass


# ----------------------------------------------------------------------------
# per-subcommand configuration


@dataclass
class GenData:
    kind: str = "maze"            # maze | simple
    size: int = 21
    markers: int = 60
    difficulty: int = 3
    episodes: int = 100
    forward_steps: int = 50
    tour_markers: int = 40
    seed: int = 0


@dataclass
class TrainTokenizer:
    data: str = ""
    val_data: str = ""
    latent_channels: int = 8
    epochs: int = 15
    lr: float = 3e-3
    batch_size: int = 64
    max_frames: int = 0           # 0 keeps every frame
    seed: int = 0


@dataclass
class TrainLCB:
    data: str = ""
    val_data: str = ""
    tokenizer: str = ""           # default: <out>/tokenizer
    seq_len: int = 16
    batch_size: int = 64
    lr: float = 2e-3
    weight_decay: float = 0.0
    grad_clip: float = 10.0
    iterations: int = 8000
    eval_every: int = 500
    backbone: str = "mamba"
    profile: str = "desk"
    seed: int = 0


@dataclass
class TrainDiffuser:
    data: str = ""
    tokenizer: str = ""           # default: <out>/tokenizer
    lcb: str = ""                 # default: <out>
    seq_len: int = 16
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 1e-2
    grad_clip: float = 10.0
    iterations: int = 4000
    eval_every: int = 500
    ablate_state: bool = False
    profile: str = "desk"
    seed: int = 0


@dataclass
class Eval:
    model: str = ""
    data: str = ""
    context: int = 16
    mode: str = "next"            # next | imagination
    predictor: str = "diffusion"  # diffusion | feature
    ablate_state: bool = False
    lcb: str = ""                 # swap in another long-context checkpoint
    steps: int = 0                # sampler steps, 0 keeps the checkpoint's value
    episodes: int = 0             # 0 evaluates every episode
    seed: int = 0


@dataclass
class RecallCurve(Eval):
    baseline: str = ""            # run dir, or "ablate" for the same model with zeroed state


@dataclass
class NoiseEval(Eval):
    context: int = 50
    std: float = 2.5
    scale: str = "255"            # 255 | signed | unit
    window: int = 11
    noise_mode: str = "full"      # ssm | full


@dataclass
class GenEval(Eval):
    context: int = 50
    baseline: str = "ablate"
    train_context: int = 0        # 0 reads it from the long-context checkpoint


@dataclass
class SeedsEval(Eval):
    n_seeds: int = 4


@dataclass
class Rollout:
    model: str = ""
    episode: str = ""
    prefix: int = 1               # ground-truth frames taken from the episode
    ablate_state: bool = False
    predictor: str = "diffusion"
    steps: int = 0
    seed: int = 0


@dataclass
class Report:
    reports: str = ""             # comma-separated report files or directories


COMMANDS = {
    "gen-data": GenData, "train-tokenizer": TrainTokenizer, "train-lcb": TrainLCB,
    "train-diffuser": TrainDiffuser, "eval": Eval, "recall-curve": RecallCurve, "noise-eval": NoiseEval,
    "gen-eval": GenEval, "seeds-eval": SeedsEval, "rollout": Rollout, "report": Report,
}


def _coerce(value, typ: str, key: str):
    try:
        if typ == "bool":
            if isinstance(value, bool):
                return value
            s = str(value).lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if typ == "float":
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value {value!r} for {key} ({typ})") from None


def resolve_config(command: str, file_values: dict, env: dict, overrides: dict):
    cls = COMMANDS[command]
    types = {f.name: f.type for f in fields(cls)}
    values = {}
    for source, data in (("config file", file_values), ("overrides", overrides)):
        unknown = set(data) - set(types)
        if unknown:
            raise ConfigError(f"unknown {source} keys for {command}: {sorted(unknown)}")
    values.update(file_values)
    for key in types:
        name = ENV_PREFIX + key.upper()
        if name in env:
            values[key] = env[name]
    values.update(overrides)
    return cls(**{k: _coerce(v, types[k], k) for k, v in values.items()})


def _parse_overrides(pairs: list[str]) -> dict:
    out = {}
    for p in pairs:
        if "=" not in p:
            raise ConfigError(f"override {p!r} is not key=value")
        k, v = p.split("=", 1)
        out[k.strip().replace("-", "_")] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="memdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, cls in COMMANDS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON file with config values")
        p.add_argument("--out", default=None, help="output directory (required)")
        for f in fields(cls):
            p.add_argument("--" + f.name.replace("_", "-"), dest="opt_" + f.name, default=None,
                           help=f"default: {f.default!r}")
        p.add_argument("overrides", nargs="*", help="key=value overrides")
    return parser


# ----------------------------------------------------------------------------
# loading helpers


def _require_dir(path: str, what: str) -> Path:
    if not path:
        raise ConfigError(f"missing required option: {what}")
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"{what} not found at {p}")
    return p


def _load_data(path: str, limit: int = 0):
    from .gridworld import load_dataset
    root = _require_dir(path, "data")
    if not (root / "index.json").exists() and (root / "dataset" / "index.json").exists():
        root = root / "dataset"
    if not (root / "index.json").exists():
        raise MissingArtifact(f"no dataset index at {root}")
    eps = load_dataset(root)
    return eps[:limit] if limit else eps


def _tokenizer(path: str, out: Path):
    from .trainer import load_tokenizer_ckpt
    return load_tokenizer_ckpt(path or out)


def load_world_model(model_dir: str, predictor: str = "diffusion", ablate_state: bool = False,
                     lcb: str = "", steps: int = 0):
    from .trainer import StageOrderError, load_denoiser, load_lcb, load_tokenizer_ckpt, read_sidecar
    from .world_model import DiffusionWorldModel, FeatureWorldModel
    root = _require_dir(model_dir, "model")
    # a denoiser trained into its own directory points at its upstream checkpoints
    try:
        upstream = read_sidecar(root / "diffuser")["run"]
    except StageOrderError:
        upstream = {}
    tok_dir = root if (root / "tokenizer").is_dir() else upstream.get("tokenizer_ckpt") or root
    lcb_dir = lcb or (root if (root / "lcb").is_dir() else upstream.get("lcb_ckpt") or root)
    tok = load_tokenizer_ckpt(tok_dir)
    branch = load_lcb(lcb_dir)
    if predictor == "feature":
        return FeatureWorldModel(tok, branch)
    if predictor != "diffusion":
        raise ConfigError(f"unknown predictor {predictor!r}")
    return DiffusionWorldModel(tok, branch, load_denoiser(root), ablate_state, steps or None)


def _model_id(cfg, suffix: str = "") -> str:
    name = Path(cfg.model).name or "model"
    if getattr(cfg, "ablate_state", False):
        name += "+ablate"
    return name + suffix


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=str))


# ----------------------------------------------------------------------------
# subcommands


def cmd_gen_data(cfg: GenData, out: Path) -> None:
    from .gridworld import MazeSpec, build_episode, build_simple_dataset, save_dataset
    if cfg.kind == "simple":
        eps = build_simple_dataset(cfg.episodes if cfg.episodes else 34, cfg.seed)
    elif cfg.kind == "maze":
        spec = MazeSpec(cfg.size, cfg.markers, cfg.difficulty)
        seeds = np.random.SeedSequence(cfg.seed).generate_state(cfg.episodes, np.uint32)
        eps = [build_episode(spec, int(s), cfg.forward_steps, cfg.tour_markers) for s in seeds]
    else:
        raise ConfigError(f"unknown dataset kind {cfg.kind!r}")
    save_dataset(eps, out / "dataset", info=dataclasses.asdict(cfg))
    print(f"wrote {len(eps)} episodes to {out / 'dataset'}")


def cmd_train_tokenizer(cfg: TrainTokenizer, out: Path) -> None:
    from .tokenizer import TokenizerConfig, reconstruction_psnr
    from .trainer import run_tokenizer_stage
    eps = _load_data(cfg.data)
    frames = np.concatenate([ep.frames for ep in eps])
    if cfg.max_frames and len(frames) > cfg.max_frames:
        frames = frames[np.random.default_rng(cfg.seed).choice(len(frames), cfg.max_frames, replace=False)]
    val = np.concatenate([ep.frames for ep in _load_data(cfg.val_data)]) if cfg.val_data else None
    tc = TokenizerConfig(image_size=frames.shape[1], latent_channels=cfg.latent_channels, epochs=cfg.epochs,
                         batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed)
    history = []
    tok = run_tokenizer_stage(frames, val, tc, out, history)
    summary = {"history": history, "train_psnr": reconstruction_psnr(tok, frames[:2048])}
    if val is not None:
        summary["val_psnr"] = reconstruction_psnr(tok, val[:2048])
    _write_json(out / "tokenizer_history.json", summary)
    print(f"tokenizer D={tok.feature_dim} train PSNR {summary['train_psnr']:.2f} dB")


def _run_config(cfg, stage: str, **extra):
    from .trainer import RunConfig
    keys = {f.name for f in fields(RunConfig)}
    d = {k: v for k, v in dataclasses.asdict(cfg).items() if k in keys}
    d.update(stage=stage, dataset=cfg.data, **extra)
    return RunConfig.from_dict(d)


def cmd_train_lcb(cfg: TrainLCB, out: Path) -> None:
    from .trainer import train_stage1
    eps = _load_data(cfg.data)
    val = _load_data(cfg.val_data) if cfg.val_data else None
    tok = _tokenizer(cfg.tokenizer, out)
    run = _run_config(cfg, "lcb", tokenizer_ckpt=str(cfg.tokenizer or out))
    history = []
    train_stage1(run, eps, tok, val, out, history)
    _write_json(out / "lcb_history.json", history)
    print(f"long-context branch trained for {run.iterations} iterations")


def cmd_train_diffuser(cfg: TrainDiffuser, out: Path) -> None:
    from .trainer import load_lcb, train_stage2
    eps = _load_data(cfg.data)
    tok = _tokenizer(cfg.tokenizer, out)
    lcb_path = cfg.lcb or str(out)
    lcb = load_lcb(lcb_path)
    run = _run_config(cfg, "diffuser", tokenizer_ckpt=str(cfg.tokenizer or out), lcb_ckpt=lcb_path)
    history = []
    train_stage2(run, eps, tok, lcb, out, history)
    _write_json(out / "diffuser_history.json", history)
    print(f"denoiser trained for {run.iterations} iterations")


def _evaluate(cfg: Eval, eps, ablate: bool | None = None, seed: int | None = None, context: int | None = None,
              model_dir: str | None = None, suffix: str = ""):
    from .evalkit import evaluate
    ab = cfg.ablate_state if ablate is None else ablate
    model = load_world_model(model_dir or cfg.model, cfg.predictor, ab, cfg.lcb, cfg.steps)
    rep = evaluate(model, eps, context or cfg.context, cfg.mode, cfg.seed if seed is None else seed,
                   Path(model_dir or cfg.model).name + ("+ablate" if ab else "") + suffix)
    rep.config = dataclasses.asdict(cfg)
    return rep


def cmd_eval(cfg: Eval, out: Path) -> None:
    rep = _evaluate(cfg, _load_data(cfg.data, cfg.episodes))
    rep.save(out / "report.json")
    print(f"avg_psnr {rep.avg_psnr:.3f} fin_psnr {rep.fin_psnr:.3f} ssim {rep.ssim:.4f}")


def _baseline_report(cfg, eps, context=None):
    if cfg.baseline in ("", "ablate"):
        return _evaluate(cfg, eps, ablate=True, context=context)
    return _evaluate(cfg, eps, ablate=False, context=context, model_dir=cfg.baseline)


def cmd_recall_curve(cfg: RecallCurve, out: Path) -> None:
    from .evalkit import recall_curve
    eps = _load_data(cfg.data, cfg.episodes)
    rep = _evaluate(cfg, eps)
    base = _baseline_report(cfg, eps)
    rep.save(out / "report.json")
    base.save(out / "baseline_report.json")
    csv_path, png_path = recall_curve(rep, out, "recall", {base.model_id or "baseline": base})
    print(f"wrote {csv_path} and {png_path}")


def cmd_noise_eval(cfg: NoiseEval, out: Path) -> None:
    from .evalkit import noise_robustness
    eps = _load_data(cfg.data, cfg.episodes)
    model = load_world_model(cfg.model, cfg.predictor, cfg.ablate_state, cfg.lcb, cfg.steps)
    res = noise_robustness(model, eps, cfg.context, cfg.std, cfg.window, cfg.scale, cfg.noise_mode, cfg.seed)
    after = res.noisy_frames[-1] + 4
    summary = {"result": res.to_dict(), "noisy_mean_psnr": None, "psnr_4_after": None, "config": dataclasses.asdict(cfg)}
    scored = [f for f in res.noisy_frames if f in res.target_index]
    if scored:
        summary["noisy_mean_psnr"] = res.mean_over(scored)
    if after in res.target_index:
        summary["psnr_4_after"] = res.psnr_at(after)
    _write_json(out / "noise.json", summary)
    print(f"noisy-window PSNR {summary['noisy_mean_psnr']} -> 4 steps after {summary['psnr_4_after']}")


def cmd_gen_eval(cfg: GenEval, out: Path) -> None:
    from .trainer import read_sidecar, resolve_checkpoint
    eps = _load_data(cfg.data, cfg.episodes)
    train_ctx = cfg.train_context or int(read_sidecar(resolve_checkpoint(cfg.lcb or cfg.model, "lcb"))["seq_len"])
    rep = _evaluate(cfg, eps)
    base = _baseline_report(cfg, eps)
    for r in (rep, base):
        r.config = dict(r.config, train_context=train_ctx)
    rep.save(out / "report.json")
    base.save(out / "baseline_report.json")
    _write_json(out / "gen_eval.json", {"train_context": train_ctx, "eval_context": cfg.context,
                                        "avg_psnr": rep.avg_psnr, "baseline_avg_psnr": base.avg_psnr,
                                        "gap": rep.avg_psnr - base.avg_psnr})
    print(f"context {train_ctx}->{cfg.context}: {rep.avg_psnr:.3f} vs baseline {base.avg_psnr:.3f}")


def cmd_seeds_eval(cfg: SeedsEval, out: Path) -> None:
    from .evalkit import seed_stability
    eps = _load_data(cfg.data, cfg.episodes)
    res = seed_stability(lambda s: _evaluate(cfg, eps, seed=s), cfg.n_seeds, cfg.seed)
    for s, r in zip(res.seeds, res.reports):
        r.save(out / f"report_seed{s}.json")
    summary = res.summary()
    _write_json(out / "seeds.json", {"seeds": res.seeds, "summary": summary})
    m, sd = summary["avg_psnr"]
    print(f"avg_psnr {m:.3f} +- {sd:.3f} over {len(res.seeds)} seeds")


def parse_actions(line: str) -> list[int]:
    from .gridworld import Action
    codes = []
    for tok in line.replace(",", " ").split():
        t = tok.strip().upper()
        if t.isdigit() and int(t) < 4:
            codes.append(int(t))
        elif t in Action.__members__:
            codes.append(int(Action[t]))
        elif t[:1] in Action.__members__ and t in ("NORTH", "EAST", "SOUTH", "WEST"):
            codes.append(int(Action[t[0]]))
        else:
            raise ConfigError(f"unknown action {tok!r} (use N/E/S/W or 0-3)")
    return codes


def cmd_rollout(cfg: Rollout, out: Path, stdin=None) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .diffusion import derive_seed
    from .gridworld import load_episode
    stdin = stdin or sys.stdin
    ep = load_episode(_require_dir(cfg.episode, "episode"))
    model = load_world_model(cfg.model, cfg.predictor, cfg.ablate_state, "", cfg.steps)
    if not 1 <= cfg.prefix <= len(ep):
        raise ConfigError(f"prefix must be in 1..{len(ep)}")
    frames = torch.from_numpy(ep.observations[None, :cfg.prefix])
    actions = torch.from_numpy(ep.action_codes()[None, :cfg.prefix - 1])
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for line in stdin:
        for a in parse_actions(line):
            actions = torch.cat([actions, torch.tensor([[a]])], dim=1)
            t = frames.shape[1] - 1
            nxt = model.predict_next(frames, actions, seed=derive_seed(cfg.seed, t))
            frames = torch.cat([frames, nxt[:, None]], dim=1)
            n += 1
            path = out / f"frame_{n:04d}.png"
            plt.imsave(path, (nxt[0].numpy() * 255).round().astype(np.uint8))
            print(path, flush=True)
    _write_json(out / "rollout.json", {"actions": actions[0].tolist(), "frames": n})


def cmd_report(cfg: Report, out: Path) -> None:
    from .evalkit import MetricsReport
    paths = []
    for item in filter(None, (s.strip() for s in cfg.reports.split(","))):
        p = _require_dir(item, "report")
        paths += sorted(p.rglob("report*.json")) if p.is_dir() else [p]
    if not paths:
        raise MissingArtifact("no report files found")
    rows = []
    for p in paths:
        r = MetricsReport.load(p)
        rows.append({"file": str(p), "model": r.model_id, "context": r.context_len, "mode": r.mode, "seed": r.seed,
                     "avg_psnr": r.avg_psnr, "fin_psnr": r.fin_psnr, "ssim": r.ssim})
    lines = ["| model | context | mode | seed | avg PSNR | fin PSNR | SSIM |", "|---|---|---|---|---|---|---|"]
    lines += [f"| {r['model']} | {r['context']} | {r['mode']} | {r['seed']} | {r['avg_psnr']:.2f} | "
              f"{r['fin_psnr']:.2f} | {r['ssim']:.4f} |" for r in rows]
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text("\n".join(lines) + "\n")
    _write_json(out / "summary.json", rows)
    print("\n".join(lines))


HANDLERS = {
    "gen-data": cmd_gen_data, "train-tokenizer": cmd_train_tokenizer, "train-lcb": cmd_train_lcb,
    "train-diffuser": cmd_train_diffuser, "eval": cmd_eval, "recall-curve": cmd_recall_curve,
    "noise-eval": cmd_noise_eval, "gen-eval": cmd_gen_eval, "seeds-eval": cmd_seeds_eval,
    "rollout": cmd_rollout, "report": cmd_report,
}


def _exit_code(exc: BaseException) -> int:
    from .tokenizer import NumericalError
    from .trainer import StageOrderError
    if isinstance(exc, (ConfigError, KeyError, json.JSONDecodeError)):
        return EXIT_CONFIG
    if isinstance(exc, (MissingArtifact, StageOrderError)):
        return EXIT_MISSING
    if isinstance(exc, NumericalError):
        return EXIT_NUMERIC
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    return 1


def main(argv: list[str] | None = None, env: dict | None = None, stdin=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:      # argparse reports its own usage errors
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    env = os.environ if env is None else env
    try:
        file_values = {}
        if args.config:
            try:
                file_values = json.loads(Path(args.config).read_text())
            except FileNotFoundError:
                raise ConfigError(f"config file {args.config} not found") from None
            if not isinstance(file_values, dict):
                raise ConfigError("config file must hold a JSON object")
        flags = {k[4:]: v for k, v in vars(args).items() if k.startswith("opt_") and v is not None}
        cfg = resolve_config(args.command, file_values, env, {**flags, **_parse_overrides(args.overrides)})
        out = args.out or env.get(ENV_PREFIX + "OUT")
        if not out:
            raise ConfigError("--out is required")
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / f"config.{args.command}.json", dataclasses.asdict(cfg))
        handler = HANDLERS[args.command]
        if args.command == "rollout":
            handler(cfg, out, stdin)
        else:
            handler(cfg, out)
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        code = _exit_code(exc)
        msg = str(exc).splitlines()[0] if str(exc) else ""
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        if code == 1:
            log.exception("unexpected failure")
        return code


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
