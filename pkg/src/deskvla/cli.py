"""Command-line entry point.

Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckio
from . import data, diag, lora, quant, runtime, simarm, train
from .policy import PolicyConfig, VLAPolicy, count_parameters, parse_shape, quantize_policy, trainable_parameters

log = logging.getLogger("deskvla")


class UsageError(Exception):
    pass


# -- config helpers ---------------------------------------------------------------


def read_config(path) -> dict[str, str]:
    if path is None:
        return {}
    return data.parse_key_values(Path(path).read_text(), str(path))


def _known(cls, cfg: dict) -> dict:
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in cfg.items() if k in names}


def _flags(args, mapping: dict[str, str]) -> dict:
    """Explicitly given CLI flags renamed to config fields."""
    return {field_: getattr(args, flag) for flag, field_ in mapping.items() if getattr(args, flag, None) is not None}


def _runtime_config(cfg: dict, args, policy_cfg: PolicyConfig | None = None) -> runtime.RuntimeConfig:
    kw: dict[str, object] = {}
    if policy_cfg is not None:
        kw.update(top_shape=policy_cfg.top_shape, wrist_shape=policy_cfg.wrist_shape, n_chunk=policy_cfg.n_chunk)
    for f in fields(runtime.RuntimeConfig):
        if f.name not in cfg:
            continue
        v = cfg[f.name]
        if f.name in ("control_rate", "tau_max_ms", "preprocess_rate", "smoothing"):
            v = float(v)
        elif f.name in ("n_chunk", "max_ticks"):
            v = int(v)
        elif f.name == "estop":
            v = str(v).lower() in ("1", "true", "yes")
        elif f.name == "task":
            v = str(v)
        elif f.name in ("top_shape", "wrist_shape"):
            v = parse_shape(v)
        else:
            raise UsageError(f"config key {f.name!r} cannot be set from a file")
        kw[f.name] = v
    rc = runtime.RuntimeConfig(**kw)
    over = _flags(args, {"max_ticks": "max_ticks", "smoothing": "smoothing"})
    latencies = [getattr(args, k, None) for k in ("pre_ms", "forward_ms", "post_ms")]
    if getattr(args, "measured_latency", False):
        over["latency_ms"] = None
    elif any(v is not None for v in latencies):
        base = rc.latency_ms or (5.0, 35.0, 5.0)
        over["latency_ms"] = tuple(b if v is None else v for b, v in zip(base, latencies))
    return replace(rc, **over)


def _sim_config(cfg: dict) -> simarm.SimConfig:
    kw = {}
    for name in ("pixel_noise_std", "joint_noise_std", "success_radius", "press_depth", "button_height"):
        if name in cfg:
            kw[name] = float(cfg[name])
    for name in ("top_shape", "wrist_shape"):
        if name in cfg:
            kw[name] = parse_shape(cfg[name])
    return simarm.SimConfig(**kw)


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


# -- subcommands --------------------------------------------------------------------


def cmd_dataset_gen(args, cfg) -> int:
    sim = _sim_config(cfg)
    fps = args.fps if args.fps is not None else float(cfg.get("fps", data.DEFAULT_FPS))
    data.generate_demos(args.episodes, args.out, sim, seed=args.seed, fps=fps)
    print(f"wrote {args.episodes} episodes to {args.out}")
    return 0


def cmd_dataset_stats(args, cfg) -> int:
    stats = data.dataset_stats(args.data)
    text = stats.to_csv()
    if args.out:
        _write(Path(args.out), text)
    print(text, end="")
    return 0


def cmd_dataset_validate(args, cfg) -> int:
    report = data.validate_dataset(args.data)
    for eid, msg in report.violations:
        print(f"episode {eid}: {msg}")
    print("valid" if report.ok else f"{len(report.violations)} violation(s)")
    return 0 if report.ok else 1


def _load_episodes(root, max_episodes=None):
    return data.load_dataset(root, max_episodes=max_episodes)


def cmd_train(args, cfg) -> int:
    pcfg = PolicyConfig.from_dict({**_known(PolicyConfig, cfg), **_flags(args, {"p_drop": "p_drop"})})
    tc = {**_known(train.TrainConfig, cfg), "seed": args.seed}
    tc.update(_flags(args, {"steps": "total_steps", "lr_max": "lr_max", "lr_min": "lr_min",
                            "batch_size": "batch_size", "accum_steps": "accum_steps",
                            "checkpoint_interval": "checkpoint_interval", "freeze_vision": "freeze_vision",
                            "quantize_base": "quantize_base", "clip_norm": "clip_norm"}))
    tcfg = train.TrainConfig.from_dict(tc)
    if "seed" not in cfg:
        pcfg = replace(pcfg, seed=args.seed)
    episodes = _load_episodes(args.episodes, args.max_episodes)
    log.info("training on %d episodes, effective batch %d", len(episodes), tcfg.effective_batch)
    result = train.train_loop(episodes, pcfg, tcfg, out_dir=args.out, progress=True)
    print(f"best step {result.best_step} val_loss {result.best_val:.6g} effective_batch {tcfg.effective_batch}")
    return 0


def _validation_split(root, ck: ckio.Checkpoint):
    tcfg = train.TrainConfig()
    if "meta.train_config" in ck.entries:
        tcfg = train.TrainConfig.from_dict(ckio.text_to_dict(ck.text("meta.train_config")))
    _, val = train.split_episodes(_load_episodes(root), tcfg.val_fraction)
    return val, tcfg


def cmd_eval(args, cfg) -> int:
    rows = ["checkpoint,val_loss"]
    for path in args.checkpoint:
        ck = ckio.load(path)
        policy = ckio.policy_from_checkpoint(ck)
        val, tcfg = _validation_split(args.episodes, ck)
        loss = train.evaluate(policy, val, tcfg, stride=args.stride)
        rows.append(f"{path},{loss:.6g}")
    text = "\n".join(rows) + "\n"
    if args.out:
        _write(Path(args.out), text)
    print(text, end="")
    return 0


def cmd_quantize(args, cfg) -> int:
    ck = ckio.load(args.inp)
    policy = ckio.policy_from_checkpoint(ck)
    quantize_policy(policy, args.block_size, not args.no_double_quant, args.group_size)
    extra = {k: v for k, v in ck.entries.items() if k.startswith("meta.") and k != "meta.policy_config"}
    ckio.save(args.out, ckio.checkpoint_from_policy(policy, extra))
    print(f"wrote {args.out}")
    return 0


def cmd_deploy(args, cfg) -> int:
    ck = ckio.load(args.checkpoint)
    policy = ckio.policy_from_checkpoint(ck)
    rc = _runtime_config(cfg, args, policy.cfg)
    summary = runtime.deploy(policy, args.episodes, _sim_config(cfg), rc, seed=args.seed)
    out = Path(args.out)
    _write(out / "summary.csv", summary.to_csv())
    for i, lg in enumerate(summary.logs):
        _write(out / f"episode_{i:04d}.csv", lg.to_csv())
        trace = ["tick,distance"] + [f"{t.tick},{t.distance:.6g}" for t in lg.ticks]
        _write(out / f"episode_{i:04d}_trace.csv", "\n".join(trace) + "\n")
    print(f"success_rate {summary.success_rate:.6g} over {args.episodes} episodes")
    return 0


def cmd_diagnose_vision(args, cfg) -> int:
    ck = ckio.load(args.checkpoint)
    policy = ckio.policy_from_checkpoint(ck)
    val, _ = _validation_split(args.data, ck)
    label = args.label or Path(args.checkpoint).stem
    n_train = args.train_episodes if args.train_episodes is not None else 0
    rep = diag.influence_over(policy, val, label, n_train, stride=args.stride)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    diag.emit_report([rep], Path(args.out))
    print(f"{label}: delta_mean {rep.delta_mean:.6g} delta_std {rep.delta_std:.6g} {rep.label}")
    return 0


def _read_trace(path: Path) -> np.ndarray:
    lines = path.read_text().splitlines()[1:]
    return np.array([float(line.split(",")[1]) for line in lines if line])


def cmd_diagnose_oscillation(args, cfg) -> int:
    root = Path(args.logs)
    summary = (root / "summary.csv").read_text().splitlines()
    success = {int(r.split(",")[0]): r.split(",")[2] == "1" for r in summary[1:] if not r.startswith("#")}
    rows = ["episode,reversals,oscillatory"]
    for i in sorted(success):
        rep = diag.detect_oscillation(_read_trace(root / f"episode_{i:04d}_trace.csv"), success[i],
                                      threshold=args.threshold)
        rows.append(f"{i},{rep.reversals},{int(rep.oscillatory)}")
    text = "\n".join(rows) + "\n"
    _write(Path(args.out), text)
    flagged = sum(r.endswith(",1") for r in rows[1:])
    print(f"{flagged} of {len(rows) - 1} episodes oscillatory")
    return 0


def cmd_report(args, cfg) -> int:
    out = Path(args.out)
    rows = ["quantity,value"]
    pc = lora.count_trainable(args.d, args.k, args.rank, 4, args.layers)
    rows += [f"lora_params_per_layer,{pc.lora_per_layer}", f"full_params_per_layer,{pc.full_per_layer}",
             f"reduction_ratio,{pc.ratio:.6g}", f"lora_params_total,{pc.lora_total}"]
    for dq in (False, True):
        fp = quant.memory_footprint(args.d, args.k, args.block_size, args.group_size, dq)
        tag = "dq" if dq else "nodq"
        rows += [f"bits_per_weight_{tag},{fp.total_bits:.6g}",
                 f"payload_reduction_{tag},{fp.payload_reduction_vs_fp32:.6g}"]
        if dq:
            rows.append(f"scale_storage_saving,{fp.scale_storage_saving:.6g}")
            rows.append(f"total_saving_from_dq,{fp.total_saving_from_dq:.6g}")
    pol = VLAPolicy(PolicyConfig())
    rows += [f"desk_trainable_frozen,{count_parameters(trainable_parameters(pol, True))}",
             f"desk_trainable_unfrozen,{count_parameters(trainable_parameters(pol, False))}",
             f"desk_total,{sum(p.numel() for p in pol.parameters())}"]
    _write(out / "accounting.csv", "\n".join(rows) + "\n")
    rc = runtime.RuntimeConfig()
    pre, fwd, post = rc.latency_ms
    lat = ["stage,latency_ms", f"preprocess,{pre:.6g}", f"forward,{fwd:.6g}", f"postprocess,{post:.6g}",
           f"total,{pre + fwd + post:.6g}", f"budget,{rc.tau_max_ms:.6g}"]
    _write(out / "latency.csv", "\n".join(lat) + "\n")
    print(f"wrote {out / 'accounting.csv'} and {out / 'latency.csv'}")
    return 0


# -- parser ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--config", help="key = value file overriding config defaults")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="deskvla", description="Desk-scale VLA fine-tuning and deployment pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    ds = sub.add_parser("dataset", help="synthetic demonstration datasets")
    dsub = ds.add_subparsers(dest="action", required=True)
    g = dsub.add_parser("gen", parents=[common], help="record scripted expert episodes")
    g.add_argument("--out", required=True, help="output dataset directory")
    g.add_argument("--episodes", type=int, default=200, help="number of episodes (default 200)")
    g.add_argument("--fps", type=float, help="recording rate in Hz (default 30)")
    g.set_defaults(func=cmd_dataset_gen)
    s = dsub.add_parser("stats", parents=[common], help="per-joint statistics")
    s.add_argument("--data", required=True, help="dataset directory")
    s.add_argument("--out", help="CSV output path")
    s.set_defaults(func=cmd_dataset_stats)
    v = dsub.add_parser("validate", parents=[common], help="check dataset invariants")
    v.add_argument("--data", required=True, help="dataset directory")
    v.set_defaults(func=cmd_dataset_validate)

    t = sub.add_parser("train", parents=[common], help="fine-tune the policy")
    t.add_argument("--episodes", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--steps", type=int, help="optimizer steps")
    t.add_argument("--max-episodes", type=int, help="use only the first N episodes")
    t.add_argument("--lr-max", type=float, help="peak learning rate")
    t.add_argument("--lr-min", type=float, help="final learning rate")
    t.add_argument("--batch-size", type=int, help="micro-batch size B")
    t.add_argument("--accum-steps", type=int, help="accumulation steps G")
    t.add_argument("--checkpoint-interval", type=int, help="steps between checkpoints")
    t.add_argument("--clip-norm", choices=("l2", "inf"), help="gradient clipping norm")
    t.add_argument("--p-drop", type=float, help="visual-token dropout probability")
    vis = t.add_mutually_exclusive_group()
    vis.add_argument("--freeze-vision", dest="freeze_vision", action="store_true", default=None,
                     help="keep vision parameters fixed (default)")
    vis.add_argument("--unfreeze-vision", dest="freeze_vision", action="store_false",
                     help="also train the vision adapter group")
    t.add_argument("--quantize-base", action="store_true", default=None, help="train on NF4 base weights")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="validation loss of checkpoints")
    e.add_argument("--checkpoint", required=True, nargs="+", help="checkpoint file(s)")
    e.add_argument("--episodes", required=True, help="dataset directory")
    e.add_argument("--stride", type=int, default=1, help="evaluate every n-th frame (default 1)")
    e.add_argument("--out", help="CSV output path")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("quantize", parents=[common], help="store base weights as NF4")
    q.add_argument("--in", dest="inp", required=True, help="input checkpoint")
    q.add_argument("--out", required=True, help="output checkpoint")
    q.add_argument("--block-size", type=int, default=quant.DEFAULT_BLOCK_SIZE, help="weights per scale (default 64)")
    q.add_argument("--group-size", type=int, default=quant.DEFAULT_GROUP_SIZE,
                   help="scales per second-level group (default 256)")
    q.add_argument("--no-double-quant", action="store_true", help="keep scales in float32")
    q.set_defaults(func=cmd_quantize)

    d = sub.add_parser("deploy-sim", parents=[common], help="closed-loop simulated deployment")
    d.add_argument("--checkpoint", required=True, help="checkpoint file")
    d.add_argument("--episodes", type=int, default=100, help="number of seeded resets (default 100)")
    d.add_argument("--out", default="deploy", help="output directory (default ./deploy)")
    d.add_argument("--max-ticks", type=int, help="tick limit per episode")
    d.add_argument("--smoothing", type=float, help="action smoothing coefficient")
    d.add_argument("--pre-ms", type=float, help="injected preprocessing latency")
    d.add_argument("--forward-ms", type=float, help="injected forward-pass latency")
    d.add_argument("--post-ms", type=float, help="injected postprocessing latency")
    d.add_argument("--measured-latency", action="store_true", help="use measured wall time instead of injection")
    d.set_defaults(func=cmd_deploy)

    dg = sub.add_parser("diagnose", help="vision influence and failure modes")
    dgs = dg.add_subparsers(dest="action", required=True)
    dv = dgs.add_parser("vision", parents=[common], help="vision influence on held-out episodes")
    dv.add_argument("--checkpoint", required=True, help="checkpoint file")
    dv.add_argument("--data", required=True, help="dataset directory (validation split is used)")
    dv.add_argument("--label", help="configuration name in the report")
    dv.add_argument("--train-episodes", type=int, help="training set size recorded in the report")
    dv.add_argument("--stride", type=int, default=1, help="use every n-th frame (default 1)")
    dv.add_argument("--out", required=True, help="summary CSV path")
    dv.set_defaults(func=cmd_diagnose_vision)
    do = dgs.add_parser("oscillation", parents=[common], help="approach/retreat reversals in deployment traces")
    do.add_argument("--logs", required=True, help="deploy-sim output directory")
    do.add_argument("--threshold", type=int, default=6, help="reversals that flag oscillation (default 6)")
    do.add_argument("--out", required=True, help="CSV output path")
    do.set_defaults(func=cmd_diagnose_oscillation)

    r = sub.add_parser("report", parents=[common], help="parameter, memory and latency accounting")
    r.add_argument("--out", default="report", help="output directory (default ./report)")
    r.add_argument("--d", type=int, default=2560, help="projection output width (default 2560)")
    r.add_argument("--k", type=int, default=2560, help="projection input width (default 2560)")
    r.add_argument("--rank", type=int, default=8, help="LoRA rank (default 8)")
    r.add_argument("--layers", type=int, default=32, help="adapted layers (default 32)")
    r.add_argument("--block-size", type=int, default=quant.DEFAULT_BLOCK_SIZE, help="NF4 block size")
    r.add_argument("--group-size", type=int, default=quant.DEFAULT_GROUP_SIZE, help="double-quant group size")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = read_config(args.config)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
