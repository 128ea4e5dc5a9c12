"""Command-line entry point.

Subcommands: gen-data, train, eval, predict, gradcheck, attn-dump, ablation,
rerun. Every command resolves its flags, writes a manifest into --out before
doing any real work, then produces its artifacts; `rerun MANIFEST --out DIR`
replays a recorded run. Verbosity via the PRVG_LOG environment variable.
"""

from __future__ import annotations

import argparse
import datetime
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from .data import (
    ANNOTATION_FILENAME,
    GeneratorConfig,
    generate_dataset,
    load_dataset,
    write_dataset,
    write_features,
)
from .losses import gt_clip_mask
from .metrics import report_table
from .model import ModelConfig, PRVG, load_checkpoint
from .tensor import finite_diff_report
from .train import (
    TrainConfig,
    evaluate_model,
    predict_sample,
    run_ablation,
    train,
)

log = logging.getLogger("prvg")

MANIFEST_FORMAT = "prvg-manifest-v1"
MANIFEST_FILENAME = "manifest.json"

ATTN_FLAG_TO_VARIANT = {"pl": "proposal", "pw": "position-wise", "none": "none"}


class CliError(Exception):
    """User-facing failure; message printed, exit code 1."""


def _write_manifest(out_dir: str, command: str, args: dict, outputs: list[str]) -> str:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "format": MANIFEST_FORMAT,
        "tool_version": __version__,
        "command": command,
        "args": args,
        "outputs": outputs,
        "created_utc": datetime.datetime.now(datetime.timezone.utc).isoformat(),
    }
    path = os.path.join(out_dir, MANIFEST_FILENAME)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _args_dict(args: argparse.Namespace) -> dict:
    return {k: v for k, v in vars(args).items() if k not in ("command", "func")}


def _parse_thresholds(raw: str) -> tuple[float, ...]:
    try:
        values = tuple(float(x) for x in raw.split(","))
    except ValueError:
        raise CliError(f"--thresholds must be comma-separated numbers, got {raw!r}")
    if not values or not all(0.0 < t < 1.0 for t in values):
        raise CliError(f"--thresholds must lie in (0, 1), got {raw!r}")
    return values


def _load_data_or_fail(data_dir: str):
    if not os.path.isfile(os.path.join(data_dir, ANNOTATION_FILENAME)):
        raise CliError(f"no {ANNOTATION_FILENAME} under {data_dir!r}")
    return load_dataset(data_dir)


def _model_config_from_args(args, d_feat: int, n_clips: int) -> ModelConfig:
    try:
        return ModelConfig(
            d_model=args.d_model,
            n_heads=args.n_heads,
            n_enc_layers=args.enc_layers,
            n_dec_layers=args.dec_layers,
            ffn_dim=args.ffn_dim,
            dropout=args.dropout,
            max_clips=args.max_clips if args.max_clips else n_clips,
            max_queries=args.max_queries,
            d_feat=d_feat,
            seed=args.model_seed,
        )
    except ValueError as e:
        raise CliError(f"bad model configuration: {e}")


def _train_config_from_args(args) -> TrainConfig:
    try:
        return TrainConfig(
            lr=args.lr,
            batch_size=args.batch_size,
            epochs=args.epochs,
            lambda_l1=args.lambda_l1,
            beta_iou=args.beta,
            attn_loss=ATTN_FLAG_TO_VARIANT[args.attn_loss],
            iou_mode=args.iou_mode,
            seed=args.seed,
            k_min=args.k_min,
            k_max=args.k_max,
            query_order=args.query_order,
            eval_thresholds=_parse_thresholds(args.thresholds),
            warmup_steps=args.warmup_steps,
        )
    except ValueError as e:
        raise CliError(f"bad training configuration: {e}")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--enc-layers", type=int, default=2)
    p.add_argument("--dec-layers", type=int, default=2)
    p.add_argument("--ffn-dim", type=int, default=None)
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--max-clips", type=int, default=None,
                   help="clip budget; defaults to the dataset's clip count")
    p.add_argument("--max-queries", type=int, default=8)
    p.add_argument("--model-seed", type=int, default=0)


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lambda", dest="lambda_l1", type=float, default=2.0,
                   help="weight of the L1 boundary term in the regression loss")
    p.add_argument("--beta", type=float, default=2.0,
                   help="weight of the interval-overlap term in the regression loss")
    p.add_argument("--attn-loss", choices=("pl", "pw", "none"), default="pl",
                   help="attention supervision: pl = in-window mass (proposal-level), "
                        "pw = per-clip log-attention (position-wise), none = off")
    p.add_argument("--iou-mode", choices=("giou", "iou"), default="giou")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, default=8)
    p.add_argument("--query-order", choices=("ordered", "shuffled"), default="ordered")
    p.add_argument("--thresholds", default="0.3,0.5,0.7")
    p.add_argument("--warmup-steps", type=int, default=0)


# -- subcommands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    try:
        cfg = GeneratorConfig(
            n_clips=args.n_clips,
            d_feat=args.d_feat,
            k_min=args.k_min,
            k_max=args.k_max,
            vocab_size=args.vocab_size,
            noise_sigma=args.sigma,
            ambiguity=args.ambiguity,
            seed=args.seed,
        )
    except ValueError as e:
        raise CliError(f"bad generator configuration: {e}")
    _write_manifest(args.out, "gen-data", _args_dict(args),
                    ["features/", ANNOTATION_FILENAME])
    samples = generate_dataset(cfg, args.n_samples)
    write_dataset(args.out, samples)
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    samples = _load_data_or_fail(args.data)
    d_feat = samples[0].clip_features.shape[1]
    n_clips = samples[0].n_clips
    model_cfg = _model_config_from_args(args, d_feat, n_clips)
    train_cfg = _train_config_from_args(args)
    _write_manifest(args.out, "train", _args_dict(args),
                    ["model.ckpt", "model.best.ckpt", "train_log.jsonl"])
    log_path = os.path.join(args.out, "train_log.jsonl")
    t0 = time.monotonic()
    result = train(
        train_cfg,
        model_cfg,
        samples,
        log_path=log_path,
        checkpoint_path=os.path.join(args.out, "model.ckpt"),
        best_checkpoint_path=os.path.join(args.out, "model.best.ckpt"),
    )
    elapsed = time.monotonic() - t0
    final = result.log[-1].miou if result.log else float("nan")
    print(
        f"trained {train_cfg.epochs} epochs in {elapsed:.1f}s; "
        f"final train mIoU {final:.4f}, best {result.best_miou:.4f} "
        f"at epoch {result.best_epoch}"
    )
    return 0


def cmd_eval(args) -> int:
    samples = _load_data_or_fail(args.data)
    model = _load_checkpoint_or_fail(args.checkpoint)
    thresholds = _parse_thresholds(args.thresholds)
    _write_manifest(args.out, "eval", _args_dict(args), ["report.json", "report.txt"])
    rng = np.random.default_rng(args.seed) if args.query_mode == "shuffled" else None
    try:
        report = evaluate_model(model, samples, thresholds, args.query_mode, rng)
    except ValueError as e:
        raise CliError(str(e))
    table = report_table(report)
    with open(os.path.join(args.out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    return 0


def _load_checkpoint_or_fail(path: str) -> PRVG:
    if not os.path.isfile(path):
        raise CliError(f"checkpoint not found: {path!r}")
    try:
        return load_checkpoint(path)
    except ValueError as e:
        raise CliError(f"cannot load checkpoint {path!r}: {e}")


def cmd_predict(args) -> int:
    samples = _load_data_or_fail(args.data)
    model = _load_checkpoint_or_fail(args.checkpoint)
    _write_manifest(args.out, "predict", _args_dict(args), ["predictions.json"])
    doc = {}
    for sample in samples:
        duration = sample.duration or float(sample.n_clips)
        try:
            preds = predict_sample(model, sample, "paragraph")
        except ValueError as e:
            raise CliError(str(e))
        preds.sort(key=lambda p: p[0])
        doc[sample.video_id] = {
            "duration": duration,
            "timestamps": [[sp.t_s * duration, sp.t_e * duration] for _, sp in preds],
        }
    path = os.path.join(args.out, "predictions.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    n = sum(len(v["timestamps"]) for v in doc.values())
    print(f"wrote {n} predictions for {len(doc)} videos to {path}")
    return 0


def cmd_gradcheck(args) -> int:
    from .losses import (
        position_wise_attention_loss,
        proposal_attention_loss,
        regression_loss,
        total_loss,
    )
    from .train import _model_clips  # same clip-resampling path as training

    _write_manifest(args.out, "gradcheck", _args_dict(args), ["gradcheck.json"])
    try:
        model_cfg = ModelConfig(
            d_model=args.d_model,
            n_heads=args.n_heads,
            n_enc_layers=args.enc_layers,
            n_dec_layers=args.dec_layers,
            ffn_dim=args.ffn_dim,
            dropout=0.0,
            max_clips=args.n_clips,
            max_queries=args.k,
            d_feat=args.d_feat,
            seed=args.seed,
        )
        gen_cfg = GeneratorConfig(
            n_clips=args.n_clips,
            d_feat=args.d_feat,
            k_min=args.k,
            k_max=args.k,
            vocab_size=max(8, args.k),
            noise_sigma=0.05,
            ambiguity=0.0,
            seed=args.seed,
        )
    except ValueError as e:
        raise CliError(f"bad gradcheck configuration: {e}")
    sample = generate_dataset(gen_cfg, 1)[0]
    model = PRVG(model_cfg)
    clips = _model_clips(model, sample)
    masks = np.stack([gt_clip_mask(sp, model_cfg.max_clips) for sp in sample.spans])
    weights = TrainConfig().weights()

    variants = ("pl", "pw", "none") if args.loss == "all" else (args.loss,)
    attn_fns = {"pl": proposal_attention_loss, "pw": position_wise_attention_loss,
                "none": None}

    def make_f(variant):
        fn = attn_fns[variant]

        def f(_params):
            out = model.forward(clips, sample.query_features)
            reg = regression_loss(out.spans, sample.spans, weights)
            attn = fn(out.attention, masks) if fn else None
            return total_loss(reg, attn)

        return f

    t0 = time.monotonic()
    results = {}
    worst_overall = 0.0
    worst_param = ""
    for variant in variants:
        report = finite_diff_report(make_f(variant), model.params, h=args.h)
        worst = max(report, key=report.get)
        results[variant] = {
            "per_parameter": report,
            "worst_parameter": worst,
            "max_rel_err": report[worst],
        }
        if report[worst] > worst_overall:
            worst_overall = report[worst]
            worst_param = f"{worst} ({variant})"
        print(f"loss={variant}: max rel err {report[worst]:.3e} at {worst}")
    elapsed = time.monotonic() - t0

    out_doc = {
        "tolerance": args.tol,
        "h": args.h,
        "parameter_count": model.cfg.param_count(),
        "elapsed_seconds": elapsed,
        "variants": results,
    }
    with open(os.path.join(args.out, "gradcheck.json"), "w", encoding="utf-8") as fh:
        json.dump(out_doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    if worst_overall >= args.tol:
        print(f"FAIL: {worst_param} rel err {worst_overall:.3e} >= {args.tol:g}")
        return 1
    print(f"OK: all gradients within {args.tol:g} ({elapsed:.1f}s)")
    return 0


def cmd_attn_dump(args) -> int:
    samples = _load_data_or_fail(args.data)
    model = _load_checkpoint_or_fail(args.checkpoint)
    if args.video_id:
        matching = [s for s in samples if s.video_id == args.video_id]
        if not matching:
            raise CliError(f"video id {args.video_id!r} not in dataset")
        sample = matching[0]
    else:
        sample = samples[0]
    _write_manifest(args.out, "attn-dump", _args_dict(args),
                    ["attention.prvg", "attention_summary.json"])

    from .data import split_subparagraphs
    from .train import _model_clips

    clips = _model_clips(model, sample)
    rows = []
    off = 0
    for size in split_subparagraphs(sample.n_queries, model.cfg.max_queries):
        out = model.forward(clips, sample.query_features[off : off + size])
        rows.append(out.attention.data)
        off += size
    attn = np.vstack(rows)

    n = attn.shape[1]
    masses, fractions = [], []
    for qi, span in enumerate(sample.spans):
        mask = gt_clip_mask(span, n)
        masses.append(float(attn[qi, mask].sum()))
        fractions.append(float(mask.sum()) / n)
    write_features(os.path.join(args.out, "attention.prvg"), attn)
    summary = {
        "video_id": sample.video_id,
        "n_clips": n,
        "in_gt_mass": masses,
        "mean_in_gt_mass": float(np.mean(masses)),
        "gt_fraction": fractions,
        "mean_gt_fraction": float(np.mean(fractions)),
    }
    with open(os.path.join(args.out, "attention_summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(
        f"{sample.video_id}: mean in-GT attention mass "
        f"{summary['mean_in_gt_mass']:.4f} (GT covers {summary['mean_gt_fraction']:.4f})"
    )
    return 0


def cmd_ablation(args) -> int:
    train_samples = _load_data_or_fail(args.data)
    test_samples = _load_data_or_fail(args.test_data)
    d_feat = train_samples[0].clip_features.shape[1]
    model_cfg = _model_config_from_args(args, d_feat, train_samples[0].n_clips)
    base_cfg = _train_config_from_args(args)
    _write_manifest(args.out, "ablation", _args_dict(args), ["ablation.json"])
    results = run_ablation(train_samples, test_samples, model_cfg, base_cfg)
    with open(os.path.join(args.out, "ablation.json"), "w", encoding="utf-8") as fh:
        json.dump(results, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"{'row':>3}  {'train':<15}{'test':<11}{'mIoU':>7}")
    for r in results:
        print(f"{r['row']:>3}  {r['train']:<15}{r['test']:<11}{r['miou']:>7.4f}")
    return 0


def cmd_rerun(args) -> int:
    with open(args.manifest, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != MANIFEST_FORMAT:
        raise CliError(f"{args.manifest!r} is not a run manifest")
    command = manifest["command"]
    recorded = dict(manifest["args"])
    if args.out:
        recorded["out"] = args.out
    argv = [command]
    for key, value in recorded.items():
        flag = "--" + key.replace("_", "-")
        if key == "lambda_l1":
            flag = "--lambda"
        if value is None or value is False:
            continue
        if value is True:
            argv.append(flag)
        else:
            argv.extend([flag, str(value)])
    log.info("rerunning: prvg %s", " ".join(argv))
    return main(argv)


# -- parser ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prvg",
        description="Parallel span regression for dense video grounding "
                    "on precomputed clip/sentence features.",
    )
    parser.add_argument("--version", action="version", version=f"prvg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic grounding dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-samples", type=int, default=64)
    p.add_argument("--n-clips", type=int, default=32)
    p.add_argument("--d-feat", type=int, default=32)
    p.add_argument("--k-min", type=int, default=2)
    p.add_argument("--k-max", type=int, default=8)
    p.add_argument("--vocab-size", type=int, default=16)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--ambiguity", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--thresholds", default="0.3,0.5,0.7")
    p.add_argument("--query-mode", choices=("paragraph", "shuffled", "single"),
                   default="paragraph")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write one span per query for a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck",
                       help="compare analytic and finite-difference gradients "
                            "on a tiny model")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss", choices=("pl", "pw", "none", "all"), default="all")
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--n-clips", type=int, default=8)
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--d-model", type=int, default=16)
    p.add_argument("--n-heads", type=int, default=2)
    p.add_argument("--enc-layers", type=int, default=1)
    p.add_argument("--dec-layers", type=int, default=1)
    p.add_argument("--ffn-dim", type=int, default=32)
    p.add_argument("--d-feat", type=int, default=8)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("attn-dump",
                       help="dump the decoder's query-to-clip attention for one video")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--video-id", default=None)
    p.set_defaults(func=cmd_attn_dump)

    p = sub.add_parser("ablation",
                       help="train/test-setting grid: paragraph vs single queries, "
                            "ordered vs shuffled")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--test-data", required=True, help="held-out dataset directory")
    p.add_argument("--out", required=True)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("rerun", help="replay a recorded run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", default=None, help="override the output directory")
    p.set_defaults(func=cmd_rerun)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("PRVG_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
