"""Command-line entry point for the whole workflow.

Subcommands: gen-data, build-codebook, flow2img, img2flow, train-wm,
train-policy, rollout, eval-policy, plot, ablate, efficiency-study.

Every run directory is self-describing: a resolved.json with the merged
configuration, input manifest/codebook hashes and the tool version; running
the same subcommand with --config resolved.json reproduces the outputs
byte-for-byte. Exit codes: 0 ok, 2 config error, 3 data error, 4 training
divergence, 5 train/eval seed contamination.

Heavy imports happen inside the command functions so --threads can pin the
BLAS pool before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import __version__
from .errors import (
    ConfigError, ContaminationError, DataError, DivergenceError, FlowcotError,
)

EXIT_CODES = {
    ConfigError: 2,
    DataError: 3,
    DivergenceError: 4,
    ContaminationError: 5,
}

_CONFIG_SECTIONS = ("world", "codec", "model", "train", "run")


def _load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            cfg = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    for key in cfg:
        if key not in _CONFIG_SECTIONS + ("command", "tool_version", "hashes"):
            raise ConfigError(f"{path}: unknown config section {key!r}")
    return cfg


def _check_keys(section: dict, allowed, name: str):
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in config section {name}")


def _merged(args, config: dict, section: str, key: str, default):
    """Priority: explicit CLI flag > config file > default."""
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    sec = config.get(section, {})
    if key in sec:
        return sec[key]
    return default


def _world_config(args, config):
    from .worldsim import WorldConfig
    section = dict(config.get("world", {}))
    _check_keys(section, WorldConfig().to_dict().keys(), "world")
    return WorldConfig(**{**WorldConfig().to_dict(), **section})


def _codec_config(args, config):
    from .flowcodec import FlowCodecConfig
    section = dict(config.get("codec", {}))
    _check_keys(section, {"sigma"}, "codec")
    sigma = getattr(args, "sigma", None)
    if sigma is None:
        sigma = section.get("sigma", 0.15)
    return FlowCodecConfig(sigma=sigma)


def _train_config(args, config, **overrides):
    from .training import TrainConfig
    base = TrainConfig().to_dict()
    section = dict(config.get("train", {}))
    _check_keys(section, base.keys(), "train")
    merged = {**base, **section}
    for key in base:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    merged.update(overrides)
    env_seed = os.environ.get("FLOWCOT_SEED")
    if env_seed is not None:
        merged["seed"] = int(env_seed)
    return TrainConfig.from_dict(merged)


def _model_config(config, vocab):
    from .arnet import ModelConfig
    section = dict(config.get("model", {}))
    defaults = {"d_model": 128, "n_layers": 4, "n_heads": 4, "d_ff": 512,
                "max_seq_len": 2048}
    _check_keys(section, defaults.keys(), "model")
    return ModelConfig(vocab=vocab, **{**defaults, **section})


def _write_resolved(out_dir, command, args, config, world=None, codec=None,
                    train=None, model=None, run=None):
    from .dataio import dump_json
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    resolved = {"command": command, "tool_version": __version__}
    if world is not None:
        resolved["world"] = world.to_dict()
    if codec is not None:
        resolved["codec"] = {"sigma": codec.sigma}
    if train is not None:
        resolved["train"] = train.to_dict()
    if model is not None:
        resolved["model"] = {k: v for k, v in model.to_dict().items()
                             if k != "vocab"}
    resolved["run"] = run or {}
    hashes = {}
    data_dir = (run or {}).get("data")
    cb_path = (run or {}).get("codebook")
    if data_dir:
        from .dataio import manifest_digest
        hashes["manifest"] = manifest_digest(data_dir)
    if cb_path:
        from .dataio import file_digest
        hashes["codebook"] = file_digest(cb_path)
    resolved["hashes"] = hashes
    dump_json(out / "resolved.json", resolved)
    return resolved


def _load_train_inputs(data_dir, codebook_path, codec):
    from .dataio import load_dataset
    from .tokenizer import load_codebook
    from .training import TrainData
    world_cfg, episodes = load_dataset(data_dir)
    cb = load_codebook(codebook_path)
    return TrainData.prepare(world_cfg, episodes, cb, codec), world_cfg, cb


# ---------------------------------------------------------------- commands

def cmd_gen_data(args):
    from .dataio import write_dataset
    from .worldsim import gen_episode
    config = _load_config(args.config) if args.config else {}
    wcfg = _world_config(args, config)
    base = args.seed if args.seed is not None \
        else config.get("run", {}).get("seed", 0)
    env_seed = os.environ.get("FLOWCOT_SEED")
    if env_seed is not None:
        base = int(env_seed)
    episodes = [gen_episode(wcfg, base + i) for i in range(args.episodes)]
    write_dataset(args.out, wcfg, episodes)
    _write_resolved(args.out, "gen-data", args, config, world=wcfg,
                    run={"out": str(args.out), "episodes": args.episodes,
                         "seed": base})
    print(f"wrote {len(episodes)} episodes to {args.out}")
    return 0


def cmd_build_codebook(args):
    from .dataio import load_dataset
    from .flowcodec import flow_to_rgb
    from .tokenizer import build_codebook, save_codebook
    config = _load_config(args.config) if args.config else {}
    codec = _codec_config(args, config)
    _, episodes = load_dataset(args.data)
    corpus = []
    for ep in episodes:
        corpus.extend(ep.frames)
        corpus.extend(flow_to_rgb(f, codec) for f in ep.flows)
    cb = build_codebook(corpus, patch_size=args.patch_size,
                        max_entries=args.max_entries)
    save_codebook(cb, args.out)
    print(f"codebook: {len(cb)} entries -> {args.out}")
    return 0


def cmd_flow2img(args):
    from .dataio import read_flow, write_ppm
    from .flowcodec import FlowCodecConfig, flow_to_rgb
    flow = read_flow(args.input, args.height, args.width)
    write_ppm(args.output, flow_to_rgb(flow, FlowCodecConfig(args.sigma)))
    return 0


def cmd_img2flow(args):
    from .dataio import read_ppm, write_flow
    from .flowcodec import FlowCodecConfig, rgb_to_flow
    img = read_ppm(args.input)
    write_flow(args.output, rgb_to_flow(img, FlowCodecConfig(args.sigma)))
    return 0


def cmd_train_wm(args):
    from .sequences import SequenceLayout
    from .training import train_world_model
    config = _load_config(args.config) if args.config else {}
    codec = _codec_config(args, config)
    run = {"data": args.data, "codebook": args.codebook, "out": args.out}
    overrides = {}
    if args.layout:
        overrides["layout"] = args.layout
    tcfg = _train_config(args, config, **overrides)
    if tcfg.layout is SequenceLayout.POLICY:
        raise ConfigError("train-wm cannot use the policy layout")
    data, wcfg, cb = _load_train_inputs(args.data, args.codebook, codec)
    from .sequences import default_vocab
    mcfg = _model_config(config, default_vocab(cb))
    _write_resolved(args.out, "train-wm", args, config, world=wcfg,
                    codec=codec, train=tcfg, model=mcfg, run=run)
    train_world_model(data, tcfg, mcfg, out_dir=args.out,
                      log=print if args.verbose else None)
    print(f"world model trained -> {args.out}/model.fvc")
    return 0


def cmd_train_policy(args):
    from .training import finetune_policy
    config = _load_config(args.config) if args.config else {}
    codec = _codec_config(args, config)
    run = {"data": args.data, "codebook": args.codebook, "out": args.out,
           "init": args.init}
    tcfg = _train_config(args, config, layout="policy")
    data, wcfg, cb = _load_train_inputs(args.data, args.codebook, codec)
    _write_resolved(args.out, "train-policy", args, config, world=wcfg,
                    codec=codec, train=tcfg, run=run)
    eval_fn = _make_policy_eval(data, tcfg, codec)
    if args.init:
        init = args.init
        mcfg = None
    else:
        from .arnet import init_params
        from .sequences import default_vocab
        mcfg = _model_config(config, default_vocab(cb))
        init = init_params(mcfg, tcfg.seed)
    finetune_policy(data, tcfg, init, mcfg, out_dir=args.out,
                    log=print if args.verbose else None,
                    eval_success_fn=eval_fn)
    print(f"policy trained -> {args.out}/model.fvc")
    return 0


def _make_policy_eval(data, tcfg, codec):
    from .evalrollout import eval_policy

    seeds = [tcfg.eval_seed_base + i for i in range(tcfg.eval_episodes)]

    def eval_fn(params, mcfg):
        header = {"layout": "POLICY", "train_config": tcfg.to_dict(),
                  "train_seeds": list(data.seeds)}
        report = eval_policy(params, mcfg, header, data.codebook,
                             data.world_cfg, seeds, codec=codec)
        return report.success_rate

    return eval_fn


def cmd_rollout(args):
    import numpy as np

    from .arnet import load_checkpoint
    from .dataio import dump_json, load_dataset, write_ppm
    from .flowcodec import FlowCodecConfig, flow_to_rgb
    from .evalrollout import rollout_wm, score_rollout
    from .tokenizer import load_codebook
    from .worldsim import WorldConfig

    params, mcfg, header = load_checkpoint(args.ckpt)
    cb = load_codebook(args.codebook) if args.codebook else None
    if cb is None:
        raise ConfigError("rollout requires --codebook")
    if cb.content_hash != header.get("codebook_hash", cb.content_hash):
        raise DataError("codebook does not match checkpoint")
    codec = FlowCodecConfig(header.get("sigma", 0.15))
    _, episodes = load_dataset(args.data)
    by_seed = {ep.seed: ep for ep in episodes}
    if args.episode not in by_seed:
        raise DataError(f"episode seed {args.episode} not in dataset")
    ep = by_seed[args.episode]
    horizon = args.horizon if args.horizon is not None else len(ep.actions)
    horizon = min(horizon, len(ep.actions))
    result = rollout_wm(params, mcfg, header, cb, ep.instruction.ids,
                        [ep.frames[0]], horizon, codec=codec,
                        temperature=args.temperature)
    rows = score_rollout(result, ep, cb, codec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(result.predicted_frames):
        write_ppm(out / f"pred_frame_{t}.ppm", frame)
    for t, flow in enumerate(result.predicted_flows):
        write_ppm(out / f"pred_flow_{t}.ppm", flow_to_rgb(flow, codec))
    lines = ["step,frame_token_acc,pixel_match,flow_epe"]
    for r in rows:
        epe = repr(r["flow_epe"]) if "flow_epe" in r else ""
        lines.append(f"{r['step']},{r['frame_token_acc']!r},"
                     f"{r['pixel_match']!r},{epe}")
    (out / "metrics.csv").write_text("\n".join(lines) + "\n")
    dump_json(out / "summary.json", {
        "episode": args.episode, "horizon": horizon,
        "coercions": result.coercion_count,
        "divergence_step": (None if result.divergence_step == float("inf")
                            else result.divergence_step),
        "mean_pixel_match": float(np.mean(result.pixel_match))
        if result.pixel_match else None,
    })
    print(f"rollout -> {out}")
    return 0


def cmd_eval_policy(args):
    from .arnet import load_checkpoint
    from .dataio import dump_json
    from .evalrollout import eval_policy
    from .flowcodec import FlowCodecConfig
    from .tokenizer import load_codebook
    from .worldsim import WorldConfig

    params, mcfg, header = load_checkpoint(args.ckpt)
    cb = load_codebook(args.codebook)
    codec = FlowCodecConfig(header.get("sigma", 0.15))
    seeds = [int(line) for line in
             Path(args.seeds).read_text().split() if line.strip()]
    wcfg = WorldConfig.from_dict(header["world_config"])
    report = eval_policy(params, mcfg, header, cb, wcfg, seeds,
                         max_steps=args.max_steps, codec=codec)
    dump_json(args.out, {
        "n_episodes": report.n_episodes,
        "success_rate": report.success_rate,
        "mean_steps_to_success": report.mean_steps_to_success,
        "outcomes": report.outcomes,
    })
    print(f"success rate {report.success_rate:.3f} over "
          f"{report.n_episodes} episodes -> {args.out}")
    return 0


def cmd_plot(args):
    from .plotting import emit_plot
    emit_plot(args.csvs, args.out, y_col=args.y)
    print(f"plot -> {args.out}")
    return 0


def _ablate_arms():
    from .sequences import SequenceLayout
    return [SequenceLayout.INTERLEAVED_COT, SequenceLayout.NO_FLOW_LOSS,
            SequenceLayout.GROUPED, SequenceLayout.FRAMES_ONLY]


def cmd_ablate(args):
    from dataclasses import replace as dc_replace

    from .training import train_world_model
    config = _load_config(args.config) if args.config else {}
    codec = _codec_config(args, config)
    data, wcfg, cb = _load_train_inputs(args.data, args.codebook, codec)
    from .sequences import default_vocab
    mcfg = _model_config(config, default_vocab(cb))
    tcfg = _train_config(args, config)
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out)
    results = []
    for layout in _ablate_arms():
        accs = []
        for seed in seeds:
            run_dir = out / f"{layout.value}_s{seed}"
            run_cfg = dc_replace(tcfg, layout=layout, seed=seed)
            _write_resolved(run_dir, "train-wm", args, config, world=wcfg,
                            codec=codec, train=run_cfg, model=mcfg,
                            run={"data": args.data,
                                 "codebook": args.codebook,
                                 "out": str(run_dir)})
            _, _, rows = train_world_model(
                data, run_cfg, mcfg, out_dir=run_dir,
                log=print if args.verbose else None)
            accs.append(rows[-1]["eval_token_acc"])
        results.append({"layout": layout.value,
                        "mean_eval_token_acc": sum(accs) / len(accs),
                        "per_seed": accs})
    results.sort(key=lambda r: -r["mean_eval_token_acc"])
    lines = ["layout,mean_eval_token_acc," +
             ",".join(f"seed{s}" for s in seeds)]
    for r in results:
        lines.append(",".join([r["layout"], repr(r["mean_eval_token_acc"])]
                              + [repr(a) for a in r["per_seed"]]))
    (out / "comparison.csv").write_text("\n".join(lines) + "\n")
    print((out / "comparison.csv").read_text())
    return 0


def cmd_efficiency_study(args):
    from dataclasses import replace as dc_replace

    from .plotting import emit_two_panel
    from .sequences import SequenceLayout
    from .training import finetune_policy, train_world_model, \
        write_metrics_csv
    config = _load_config(args.config) if args.config else {}
    codec = _codec_config(args, config)
    data, wcfg, cb = _load_train_inputs(args.data, args.codebook, codec)
    from .sequences import default_vocab
    mcfg = _model_config(config, default_vocab(cb))
    seeds = [int(s) for s in args.seeds.split(",")]
    fractions = [1.0, 0.5]
    arms = [("cot", SequenceLayout.INTERLEAVED_COT),
            ("baseline", SequenceLayout.FRAMES_ONLY)]
    out = Path(args.out)
    pre_cfg = _train_config(args, config)
    ft_cfg = _train_config(args, config, layout="policy")
    if args.finetune_steps is not None:
        ft_cfg = dc_replace(ft_cfg, steps=args.finetune_steps)

    curves = {}  # (arm, fraction) -> list of per-seed rows
    for arm_name, layout in arms:
        for seed in seeds:
            pre_dir = out / f"pre_{arm_name}_s{seed}"
            run_cfg = dc_replace(pre_cfg, layout=layout, seed=seed)
            _write_resolved(pre_dir, "train-wm", args, config, world=wcfg,
                            codec=codec, train=run_cfg, model=mcfg,
                            run={"data": args.data,
                                 "codebook": args.codebook,
                                 "out": str(pre_dir)})
            params, _, _ = train_world_model(
                data, run_cfg, mcfg, out_dir=pre_dir,
                log=print if args.verbose else None)
            for frac in fractions:
                ft_dir = out / f"ft_{arm_name}_f{frac}_s{seed}"
                fcfg = dc_replace(ft_cfg, seed=seed, data_fraction=frac)
                _write_resolved(ft_dir, "train-policy", args, config,
                                world=wcfg, codec=codec, train=fcfg,
                                run={"data": args.data,
                                     "codebook": args.codebook,
                                     "out": str(ft_dir),
                                     "init": str(pre_dir / "model.fvc")})
                eval_fn = _make_policy_eval(data, fcfg, codec)
                _, _, rows = finetune_policy(
                    data, fcfg, pre_dir / "model.fvc", out_dir=ft_dir,
                    log=print if args.verbose else None,
                    eval_success_fn=eval_fn)
                curves.setdefault((arm_name, frac), []).append(rows)

    panels = []
    for frac in fractions:
        files = {}
        for arm_name, _ in arms:
            rows_by_seed = curves[(arm_name, frac)]
            steps = [r["step"] for r in rows_by_seed[0]]
            mean_rows = []
            for i, step_no in enumerate(steps):
                vals = [rs[i]["eval_success"] for rs in rows_by_seed]
                mean_rows.append({"step": step_no,
                                  "eval_success": sum(vals) / len(vals)})
            path = out / f"curve_{arm_name}_f{frac}.csv"
            write_metrics_csv(path, mean_rows)
            files[arm_name] = path
        panels.append((f"data fraction {frac}", files))
    emit_two_panel(panels, out / "fig5.svg", y_col="eval_success")
    print(f"efficiency study -> {out}")
    return 0


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="flowcot",
        description="desk-scale interleaved frame/flow world modeling")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS threads")
        p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("gen-data", help="generate an episode dataset")
    add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("build-codebook", help="exact patch codebook")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--patch-size", type=int, default=4)
    p.add_argument("--max-entries", type=int, default=512)
    p.set_defaults(fn=cmd_build_codebook)

    p = sub.add_parser("flow2img", help="flow .f32 -> PPM")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--sigma", type=float, default=0.15)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.set_defaults(fn=cmd_flow2img)

    p = sub.add_parser("img2flow", help="PPM -> flow .f32")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--sigma", type=float, default=0.15)
    p.set_defaults(fn=cmd_img2flow)

    def add_train_flags(p):
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--batch", dest="batch_size", type=int, default=None)
        p.add_argument("--lambda", dest="lam", type=float, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--eval-every", dest="eval_every", type=int,
                       default=None)
        p.add_argument("--window", dest="window", type=int, default=None)
        p.add_argument("--policy-window", dest="policy_window", type=int,
                       default=None)
        p.add_argument("--data-fraction", dest="data_fraction", type=float,
                       default=None)
        p.add_argument("--held-out", dest="held_out", type=int, default=None)
        p.add_argument("--eval-episodes", dest="eval_episodes", type=int,
                       default=None)
        p.add_argument("--blank-instructions", dest="include_instructions",
                       action="store_const", const=False, default=None)

    p = sub.add_parser("train-wm", help="stage-1 world-model training")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layout", default=None,
                   choices=["interleaved", "grouped", "frames-only",
                            "no-flow-loss"])
    p.add_argument("--sigma", type=float, default=None)
    add_train_flags(p)
    p.set_defaults(fn=cmd_train_wm)

    p = sub.add_parser("train-policy", help="stage-2 policy fine-tuning")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", default=None,
                   help="checkpoint to initialize from (default: fresh)")
    p.add_argument("--sigma", type=float, default=None)
    add_train_flags(p)
    p.set_defaults(fn=cmd_train_policy)

    p = sub.add_parser("rollout", help="autoregressive world-model rollout")
    add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--episode", type=int, required=True)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_rollout)

    p = sub.add_parser("eval-policy", help="closed-loop policy evaluation")
    add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--seeds", required=True, help="file of seeds")
    p.add_argument("--max-steps", dest="max_steps", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval_policy)

    p = sub.add_parser("plot", help="CSV curves -> deterministic SVG")
    p.add_argument("csvs", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--y", default="eval_token_acc")
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("ablate", help="four-layout comparison")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--sigma", type=float, default=None)
    add_train_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("efficiency-study",
                       help="policy fine-tuning efficiency curves")
    add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--codebook", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--sigma", type=float, default=None)
    p.add_argument("--finetune-steps", dest="finetune_steps", type=int,
                   default=None)
    add_train_flags(p)
    p.set_defaults(fn=cmd_efficiency_study)

    return ap


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    # Pin BLAS threads before numpy is imported anywhere.
    if "--threads" in argv:
        idx = argv.index("--threads")
        if idx + 1 < len(argv):
            for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS",
                        "MKL_NUM_THREADS"):
                os.environ[var] = argv[idx + 1]
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except FlowcotError as e:
        print(f"error: {e}", file=sys.stderr)
        for klass, code in EXIT_CODES.items():
            if isinstance(e, klass):
                return code
        return 1


if __name__ == "__main__":
    sys.exit(main())
