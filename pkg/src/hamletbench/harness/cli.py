"""Command-line surface: demo generation, the training stages, evaluation,
ablations, transfer, profiling, attention export and report emission.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.
Setting HAMLETBENCH_THREADS=1 pins BLAS to one thread for deterministic
acceptance runs; it must be honored before numpy loads, which is why the
heavy imports live inside main().
"""

from __future__ import annotations

import argparse
import json
import os
import sys


def _apply_thread_env():
    n = os.environ.get("HAMLETBENCH_THREADS")
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ.setdefault(var, n)


def build_parser():
    p = argparse.ArgumentParser(prog="hamletbench",
                                description="history-aware policy benchmark")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-demos", help="generate scripted-expert demonstrations")
    g.add_argument("--task", required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)

    pre = sub.add_parser("pretrain", help="single-frame behavioral cloning")
    pre.add_argument("--demos", required=True)
    pre.add_argument("--out", required=True)
    pre.add_argument("--seed", type=int, default=0)
    pre.add_argument("--steps", type=int, default=20000)
    pre.add_argument("--lr", type=float, default=1e-3)
    pre.add_argument("--batch", type=int, default=32)

    tcl = sub.add_parser("tcl", help="time-contrastive moment-token training")
    tcl.add_argument("--checkpoint", required=True)
    tcl.add_argument("--demos", required=True)
    tcl.add_argument("--out", required=True)
    tcl.add_argument("--seed", type=int, default=0)
    tcl.add_argument("--steps", type=int, default=5000)
    tcl.add_argument("--lr", type=float, default=1e-3)
    tcl.add_argument("--batch", type=int, default=16)

    ft = sub.add_parser("finetune", help="history-aware fine-tuning")
    ft.add_argument("--checkpoint", required=True,
                    help="stage2 checkpoint (stage1 for multi_frame)")
    ft.add_argument("--demos", required=True)
    ft.add_argument("--out", required=True)
    ft.add_argument("--mode", default="hamlet")
    ft.add_argument("--seed", type=int, default=0)
    ft.add_argument("--steps", type=int, default=10000)
    ft.add_argument("--lr", type=float, default=1e-3)
    ft.add_argument("--batch", type=int, default=32)
    ft.add_argument("--history", type=int, default=4)
    ft.add_argument("--trainable-backbone", action="store_true")
    ft.add_argument("--trainable-moments", action="store_true")

    ev = sub.add_parser("eval", help="seeded rollout evaluation")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--task", required=True)
    ev.add_argument("--episodes", type=int, default=100)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--heldout-demos")
    ev.add_argument("--out")

    ab = sub.add_parser("ablate", help="run an ablation grid")
    ab.add_argument("--config", required=True)
    ab.add_argument("--out", required=True)

    tr = sub.add_parser("transfer", help="transfer a trained memory module")
    tr.add_argument("--source-checkpoint", required=True)
    tr.add_argument("--target-checkpoint", required=True,
                    help="stage2 checkpoint on the target task")
    tr.add_argument("--demos", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--steps", type=int, default=3000)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--batch", type=int, default=32)

    pr = sub.add_parser("profile", help="efficiency profiling")
    pr.add_argument("--task", default="pick_place_twice")
    pr.add_argument("--t-values", type=int, nargs="+", default=[2, 4, 8])
    pr.add_argument("--n-timesteps", type=int, default=4000)
    pr.add_argument("--batch", type=int, default=8)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out", required=True)

    ex = sub.add_parser("export-attn", help="attention-map export")
    ex.add_argument("--checkpoint", required=True)
    ex.add_argument("--task", required=True)
    ex.add_argument("--seed", type=int, default=0)
    ex.add_argument("--out", required=True)

    rp = sub.add_parser("report", help="re-emit a stored result in csv/json")
    rp.add_argument("--results", required=True)
    rp.add_argument("--format", choices=["csv", "json"], required=True)
    rp.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    _apply_thread_env()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return _dispatch(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    from ..env import generate_demonstrations, load_demo_file
    from ..policy import PolicyBundle, PolicyConfig
    from ..pipelines import (VariantSpec, finetune_history_variant,
                             finetune_multi_frame, pretrain_single_frame,
                             run_ablation_grid, train_tcl_stage, transfer_memory)
    from .config import fingerprint, load_config, validate_config
    from .evaluate import evaluate_policy
    from .attention import export_attention
    from .profiler import PROFILE_MODES, profile_efficiency
    from .report import load_results, results_row, write_report
    from ..policy import make_profile_bundle

    cmd = args.command
    if cmd == "gen-demos":
        validate_config({"task": args.task, "n_demos": args.n, "seed": args.seed})
        generate_demonstrations(args.task, args.n, args.seed, args.out)
        print(f"wrote {args.n} demonstrations to {args.out}")
        return 0

    if cmd == "pretrain":
        trajs = load_demo_file(args.demos)
        bundle, log = pretrain_single_frame(trajs, PolicyConfig(), args.steps,
                                            args.lr, args.batch, args.seed,
                                            task_id=trajs[0].task)
        bundle.save(args.out)
        _write_loss_log(args.out, log.losses)
        print(f"stage1 saved to {args.out}; final loss {log.losses[-1]:.4f}")
        return 0

    if cmd == "tcl":
        bundle = PolicyBundle.load(args.checkpoint)
        trajs = load_demo_file(args.demos)
        stage2, losses = train_tcl_stage(bundle, trajs, args.steps, args.lr,
                                         args.batch, args.seed)
        stage2.save(args.out)
        _write_loss_log(args.out, losses)
        print(f"stage2 saved to {args.out}")
        return 0

    if cmd == "finetune":
        bundle = PolicyBundle.load(args.checkpoint)
        trajs = load_demo_file(args.demos)
        spec = VariantSpec(mode=args.mode, steps=args.steps, lr=args.lr,
                           batch=args.batch, history=args.history,
                           freeze_backbone=not args.trainable_backbone,
                           freeze_moment_tokens=not args.trainable_moments,
                           seed=args.seed)
        if args.mode == "multi_frame":
            out, log = finetune_multi_frame(bundle, trajs, spec, args.seed)
        else:
            out, log = finetune_history_variant(bundle, trajs, spec, args.seed)
        out.save(args.out)
        _write_loss_log(args.out, log.losses)
        print(f"{args.mode} fine-tuned checkpoint saved to {args.out}")
        return 0

    if cmd == "eval":
        bundle = PolicyBundle.load(args.checkpoint)
        heldout = load_demo_file(args.heldout_demos) if args.heldout_demos else None
        rep = evaluate_policy(bundle, args.task, args.episodes, args.seed,
                              heldout=heldout)
        cfg = {"task": args.task, "eval_episodes": args.episodes, "seed": args.seed}
        rep.fingerprint = fingerprint(cfg)
        print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
        if args.out:
            rows = [results_row(rep.variant, rep.task, full=rep.full_success,
                                partial=rep.partial_success, n=rep.n_episodes,
                                se=rep.full_se, ceiling=rep.ceiling,
                                chunk_acc=rep.chunk_acc)]
            write_report({"rows": rows, "fingerprint": rep.fingerprint,
                          "reports": [rep.to_dict()]}, "json", args.out)
        return 0

    if cmd == "ablate":
        cfg = load_config(args.config)
        return _run_ablate(cfg, args.out)

    if cmd == "transfer":
        source = PolicyBundle.load(args.source_checkpoint)
        target2 = PolicyBundle.load(args.target_checkpoint)
        trajs = load_demo_file(args.demos)
        spec = VariantSpec(mode="hamlet", steps=args.steps, lr=args.lr,
                           batch=args.batch, seed=args.seed)
        bundle, log = transfer_memory(source, target2, trajs, spec, args.seed)
        bundle.save(args.out)
        print(f"transferred checkpoint saved to {args.out}")
        return 0

    if cmd == "profile":
        bundles = {}
        base_cfg = PolicyConfig()
        bundles[("single_frame", args.t_values[0])] = make_profile_bundle(
            "single_frame", base_cfg, args.seed)
        for t in args.t_values:
            from dataclasses import replace
            cfg_t = replace(base_cfg, history=t)
            bundles[("hamlet", t)] = make_profile_bundle("hamlet", cfg_t, args.seed)
            bundles[("multi_frame", t)] = make_profile_bundle("multi_frame", cfg_t,
                                                              args.seed)
        report = profile_efficiency(bundles, args.task, args.seed,
                                    n_timesteps=args.n_timesteps, batch=args.batch)
        rows = [results_row(r.variant, args.task, tokens=r.backbone_tokens,
                            macs=r.macs, latency_ms=r.latency_ms,
                            peak_scalars=r.peak_scalars, history=r.history,
                            latency_ratio=r.latency_ratio, mac_ratio=r.mac_ratio)
                for r in report.rows]
        payload = {"rows": rows, "fingerprint": fingerprint({
            "task": args.task, "t_values": list(args.t_values),
            "n_timesteps": args.n_timesteps, "profile_batch": args.batch,
            "seed": args.seed}), "efficiency": report.to_dict()}
        write_report(payload, "json", args.out)
        print(f"profile written to {args.out}")
        return 0

    if cmd == "export-attn":
        bundle = PolicyBundle.load(args.checkpoint)
        export_attention(bundle, args.task, args.seed, args.out)
        print(f"attention dump written to {args.out}")
        return 0

    if cmd == "report":
        results = load_results(args.results)
        write_report(results, args.format, args.out)
        print(f"{args.format} report written to {args.out}")
        return 0

    raise ValueError(f"unhandled command {cmd}")


def _run_ablate(cfg: dict, out_path: str) -> int:
    from ..env import load_demo_file
    from ..pipelines import (VariantSpec, finetune_history_variant,
                             pretrain_single_frame, run_ablation_grid,
                             train_tcl_stage)
    from ..policy import PolicyConfig
    from .config import fingerprint
    from .evaluate import evaluate_policy
    from .report import results_row, write_report
    from dataclasses import replace as dc_replace

    trajs = load_demo_file(cfg["demos"])
    task = trajs[0].task
    seed = cfg.get("seed", 0)
    base_spec = VariantSpec(steps=cfg.get("steps", 3000), lr=cfg.get("lr", 1e-3),
                            batch=cfg.get("batch", 32), seed=seed)
    stage1_steps = cfg.get("tcl_steps", 800)

    def train_fn(spec: VariantSpec):
        pconf = spec.policy_config(PolicyConfig())
        stage1, _ = pretrain_single_frame(trajs, pconf, cfg.get("steps", 3000),
                                          spec.lr, spec.batch, seed, task_id=task)
        if spec.mode == "single_frame":
            return stage1
        stage2, _ = train_tcl_stage(stage1, trajs,
                                    stage1_steps if spec.use_tcl_init else 0,
                                    spec.lr, cfg.get("tcl_batch", 16), seed)
        bundle, _ = finetune_history_variant(stage2, trajs, spec, seed)
        return bundle

    def eval_fn(bundle):
        rep = evaluate_policy(bundle, task, cfg.get("eval_episodes", 50), seed)
        return {"full": rep.full_success, "partial": rep.partial_success,
                "chunk_acc": rep.chunk_acc}

    rows_raw = run_ablation_grid(cfg["grid"], base_spec, train_fn, eval_fn, seed)
    rows = [results_row(r.get("mode", "?"), task, full=r.get("full"),
                        partial=r.get("partial"), **{"cell": r["cell"],
                        "status": r["status"], "wall_seconds": r["wall_seconds"]})
            for r in rows_raw]
    write_report({"rows": rows, "fingerprint": fingerprint(cfg), "raw": rows_raw},
                 "json", out_path)
    print(f"ablation grid written to {out_path}")
    return 0


def _write_loss_log(checkpoint_path: str, losses):
    with open(str(checkpoint_path) + ".losses.json", "w", encoding="utf-8") as f:
        json.dump({"losses": [float(x) for x in losses]}, f)
        f.write("\n")


if __name__ == "__main__":
    sys.exit(main())
