"""Command-line surface.

Commands: gen-synth, train, embed, score, eval, grad-check, param-count.
Every option can also come from a flat ``key=value`` config file passed via
``--config``; explicit flags win.  Unknown keys are rejected.  Commands
that produce artifacts write the fully resolved configuration next to them.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

import argparse
import os
import sys

import numpy as np

from . import data as D
from . import metrics as M
from .checkpoint import CheckpointError, read_checkpoint
from .kernels import active_backend
from .model import BackendModel, ModelConfig, param_count, param_count_by_group
from .training import TrainConfig, score_trials, train
from .verify import full_model_grad_check

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# published reference totals for the two stock front-end geometries
REFERENCE_COUNTS = {
    (768, 13): (2.9e6, 2.5e6, 3.3e6),
    (1024, 25): (3.0e6, 2.6e6, 3.4e6),
}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _load_config_file(path):
    values = {}
    try:
        fh = open(path)
    except OSError as exc:
        raise UsageError(f"cannot read config file: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(
                    f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def _apply_config(parser, argv):
    """Two-phase parse: file values become defaults, flags override."""
    pre = Parser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        file_values = _load_config_file(known.config)
        actions = {a.dest: a for a in parser._actions}
        for key, raw in file_values.items():
            if key not in actions or key in ("help", "config"):
                raise UsageError(f"unknown config key: {key}")
            action = actions[key]
            if isinstance(action, (argparse._StoreTrueAction,
                                   argparse._StoreFalseAction)):
                parser.set_defaults(**{key: _parse_bool(raw)})
            elif action.type is not None:
                try:
                    parser.set_defaults(**{key: action.type(raw)})
                except ValueError as exc:
                    raise UsageError(f"config key {key}: {exc}") from None
            else:
                parser.set_defaults(**{key: raw})
    return parser.parse_args(argv)


def _emit_resolved_config(args, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    skip = {"config"}
    with open(os.path.join(out_dir, "resolved_config.txt"), "w") as fh:
        for key in sorted(vars(args)):
            if key in skip:
                continue
            value = getattr(args, key)
            fh.write(f"{key}={value}\n")


# ---------------------------------------------------------------------------
# shared option groups
# ---------------------------------------------------------------------------

def _add_model_args(p):
    g = p.add_argument_group("model")
    g.add_argument("--input-dim", type=int, default=768)
    g.add_argument("--input-layers", type=int, default=13)
    g.add_argument("--backbone-dim", type=int, default=512)
    g.add_argument("--d2-bottleneck", type=int, default=128)
    g.add_argument("--d2-layers", type=int, default=4)
    g.add_argument("--d2-growth", type=int, default=128)
    g.add_argument("--num-heads", type=int, default=4)
    g.add_argument("--head-dim", type=int, default=128)
    g.add_argument("--asp-bottleneck", type=int, default=128)
    g.add_argument("--embed-dim", type=int, default=192)
    g.add_argument("--pool-mode", choices=("mca", "superb"), default="mca")
    g.add_argument("--no-attn-vad", dest="use_attn_vad", action="store_false",
                   default=True)
    g.add_argument("--no-d2", dest="use_d2", action="store_false",
                   default=True)


def _model_config(args):
    try:
        return ModelConfig(
            input_dim=args.input_dim, input_layers=args.input_layers,
            backbone_dim=args.backbone_dim, d2_bottleneck=args.d2_bottleneck,
            d2_layers=args.d2_layers, d2_growth=args.d2_growth,
            num_heads=args.num_heads, head_dim=args.head_dim,
            asp_bottleneck=args.asp_bottleneck, embed_dim=args.embed_dim,
            use_attn_vad=args.use_attn_vad, use_d2=args.use_d2,
            pool_mode=args.pool_mode).validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _load_model(args):
    cfg = _model_config(args)
    model = BackendModel(cfg, seed=getattr(args, "seed", 0), dtype=np.float32)
    state = read_checkpoint(args.checkpoint)
    model.load_state_arrays(state)
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_synth(argv):
    p = Parser(prog="stacksv gen-synth",
               description="Generate a synthetic layer-stack corpus with "
                           "speaker-disjoint train/valid/test splits.")
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-speakers", type=int, default=96)
    p.add_argument("--utts-per-speaker", type=int, default=10)
    p.add_argument("--channels", type=int, default=32)
    p.add_argument("--layers", type=int, default=5)
    p.add_argument("--t-min", type=int, default=100)
    p.add_argument("--t-max", type=int, default=200)
    p.add_argument("--noise-sigma", type=float, default=0.3)
    p.add_argument("--profile", default="",
                   help="comma-separated per-layer identity strengths in "
                        "[0,1]; empty selects a mid-layer bump")
    p.add_argument("--train-speakers", type=int, default=64)
    p.add_argument("--valid-speakers", type=int, default=16)
    p.add_argument("--test-speakers", type=int, default=16)
    p.add_argument("--pos-ratio", type=float, default=0.5)
    p.add_argument("--trials-per-split", type=int, default=0,
                   help="0 lets the builder size trial lists itself")
    p.add_argument("--seed", type=int, default=0)
    args = _apply_config(p, argv)

    if (args.train_speakers + args.valid_speakers + args.test_speakers
            != args.n_speakers):
        raise UsageError("train+valid+test speaker counts must equal "
                         "n-speakers")
    profile = ()
    if args.profile:
        profile = tuple(float(x) for x in args.profile.split(","))
    spec = D.SyntheticSpec(
        n_speakers=args.n_speakers, utts_per_speaker=args.utts_per_speaker,
        n_channels=args.channels, n_layers=args.layers,
        t_range=(args.t_min, args.t_max), speaker_layer_profile=profile,
        noise_sigma=args.noise_sigma, seed=args.seed)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    os.makedirs(args.out_dir, exist_ok=True)
    entries, speakers = D.synth_dataset(spec, args.out_dir)
    spk_map = {s.speaker_id: s for s in speakers}
    sids = sorted(spk_map)
    splits = {
        "train": set(sids[:args.train_speakers]),
        "valid": set(sids[args.train_speakers:
                          args.train_speakers + args.valid_speakers]),
        "test": set(sids[args.train_speakers + args.valid_speakers:]),
    }
    with open(os.path.join(args.out_dir, "speakers.tsv"), "w") as fh:
        for s in speakers:
            tags = ";".join(f"{k}={v}" for k, v in sorted(s.strata.items()))
            fh.write(f"{s.speaker_id}\t{tags}\n")
    for split, ids in splits.items():
        part = [e for e in entries if e.speaker_id in ids]
        manifest_path = os.path.join(args.out_dir, f"{split}.tsv")
        D.write_manifest(manifest_path, part)
        if split == "train" or not ids:
            continue
        resolved = D.read_manifest(manifest_path)
        trials = D.build_trials(
            [spk_map[i] for i in sorted(ids)], resolved,
            target_pos_ratio=args.pos_ratio,
            seed=args.seed + (1 if split == "valid" else 2),
            n_trials=args.trials_per_split or None)
        D.write_trial_file(os.path.join(args.out_dir, f"trials_{split}.tsv"),
                           trials, resolved)
    _emit_resolved_config(args, args.out_dir)
    print(f"wrote corpus with {len(entries)} utterances to {args.out_dir}")
    return EXIT_OK


def cmd_train(argv):
    p = Parser(prog="stacksv train")
    p.add_argument("--config")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--valid-trials", required=True)
    p.add_argument("--test-trials")
    p.add_argument("--out-dir", required=True)
    _add_model_args(p)
    g = p.add_argument_group("training")
    g.add_argument("--total-steps", type=int, default=2000)
    g.add_argument("--max-lr", type=float, default=0.003)
    g.add_argument("--warmup-frac", type=float, default=0.10)
    g.add_argument("--batch-size", type=int, default=128)
    g.add_argument("--crop-frames", type=int, default=150)
    g.add_argument("--eval-every", type=int, default=250)
    g.add_argument("--seed", type=int, default=0)
    args = _apply_config(p, argv)

    model_cfg = _model_config(args)
    try:
        train_cfg = TrainConfig(
            total_steps=args.total_steps, max_lr=args.max_lr,
            warmup_frac=args.warmup_frac, batch_size=args.batch_size,
            crop_frames=args.crop_frames, seed=args.seed,
            eval_every=args.eval_every, checkpoint_dir=args.out_dir).validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    entries = D.read_manifest(args.train_manifest)
    val_rows = D.read_trial_file(args.valid_trials)
    test_rows = D.read_trial_file(args.test_trials) if args.test_trials else None
    _emit_resolved_config(args, args.out_dir)
    result = train(model_cfg, train_cfg, entries, val_rows, test_rows)
    print(f"best step {result.best_step} with validation EER "
          f"{result.best_val_eer * 100:.3f} % (untrained "
          f"{result.untrained_val_eer * 100:.3f} %)")
    if result.report is not None:
        print(M.report_table(result.report))
        with open(os.path.join(args.out_dir, "report.csv"), "w") as fh:
            fh.write(M.report_csv(result.report))
    if result.diverged:
        print("training diverged; best checkpoint retained", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_embed(argv):
    p = Parser(prog="stacksv embed")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_model_args(p)
    args = _apply_config(p, argv)
    model = _load_model(args)
    entries = D.read_manifest(args.manifest)
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, "embeddings.tsv")
    with open(out_path, "w") as fh:
        for e in entries:
            vec = model.embed(D.read_feature(e.path))
            txt = " ".join(f"{v:.8e}" for v in vec)
            fh.write(f"{e.utterance_id}\t{txt}\n")
    _emit_resolved_config(args, args.out_dir)
    print(f"wrote {len(entries)} embeddings to {out_path}")
    return EXIT_OK


def cmd_score(argv):
    p = Parser(prog="stacksv score")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_model_args(p)
    args = _apply_config(p, argv)
    model = _load_model(args)
    rows = D.read_trial_file(args.trials)
    scores, labels = score_trials(model, rows)
    os.makedirs(args.out_dir, exist_ok=True)
    out_path = os.path.join(args.out_dir, "scores.tsv")
    M.write_score_file(out_path, scores, labels)
    _emit_resolved_config(args, args.out_dir)
    print(f"wrote {len(rows)} scores to {out_path}")
    return EXIT_OK


def cmd_eval(argv):
    p = Parser(prog="stacksv eval",
               description="Metric report from score files, or end-to-end "
                           "from a checkpoint and trial lists.")
    p.add_argument("--config")
    p.add_argument("--scores", help="test score file (label<TAB>score)")
    p.add_argument("--val-scores",
                   help="validation score file for the EER* threshold; "
                        "defaults to --scores")
    p.add_argument("--checkpoint")
    p.add_argument("--val-trials")
    p.add_argument("--test-trials")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_model_args(p)
    args = _apply_config(p, argv)

    if args.scores:
        test_scores, test_labels = M.read_score_file(args.scores)
        if args.val_scores:
            val_scores, val_labels = M.read_score_file(args.val_scores)
        else:
            val_scores, val_labels = test_scores, test_labels
    elif args.checkpoint and args.val_trials and args.test_trials:
        model = _load_model(args)
        val_scores, val_labels = score_trials(
            model, D.read_trial_file(args.val_trials))
        test_scores, test_labels = score_trials(
            model, D.read_trial_file(args.test_trials))
    else:
        raise UsageError("need either --scores, or --checkpoint with "
                         "--val-trials and --test-trials")

    report = M.compute_report(val_scores, val_labels, test_scores, test_labels)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "report.csv"), "w") as fh:
        fh.write(M.report_csv(report))
    with open(os.path.join(args.out_dir, "report.txt"), "w") as fh:
        fh.write(M.report_table(report) + "\n")
    _emit_resolved_config(args, args.out_dir)
    print(M.report_table(report))
    return EXIT_OK


def cmd_grad_check(argv):
    p = Parser(prog="stacksv grad-check",
               description="Finite-difference check of the full model + "
                           "margin-softmax loss at a small 64-bit config.")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    args = _apply_config(p, argv)
    worst = 0.0
    for seed in range(args.seeds):
        err = full_model_grad_check(seed=seed, eps=args.eps)
        worst = max(worst, err)
        print(f"seed {seed}: worst relative error {err:.3e}")
    print(f"overall worst {worst:.3e} (tolerance {args.tolerance:g}, "
          f"conv backend: {active_backend()})")
    return EXIT_OK if worst < args.tolerance else EXIT_NUMERIC


def cmd_param_count(argv):
    p = Parser(prog="stacksv param-count")
    p.add_argument("--config")
    _add_model_args(p)
    args = _apply_config(p, argv)
    cfg = _model_config(args)
    groups = param_count_by_group(cfg)
    total = param_count(cfg)
    for name, count in sorted(groups.items()):
        print(f"  {name:<10s} {count:>12,d}")
    print(f"  {'total':<10s} {total:>12,d}  ({total / 1e6:.2f} M)")
    ref = REFERENCE_COUNTS.get((cfg.input_dim, cfg.input_layers))
    if ref is not None and cfg.pool_mode == "mca" and cfg.use_d2 \
            and cfg.use_attn_vad and cfg.backbone_dim == 512:
        target, lo, hi = ref
        status = "within" if lo <= total <= hi else "OUTSIDE"
        print(f"  reference total {target / 1e6:.1f} M; {status} expected "
              f"band [{lo / 1e6:.1f} M, {hi / 1e6:.1f} M]")
    return EXIT_OK


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "embed": cmd_embed,
    "score": cmd_score,
    "eval": cmd_eval,
    "grad-check": cmd_grad_check,
    "param-count": cmd_param_count,
}


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] in ("-h", "--help"):
        print("usage: stacksv <command> [options]\ncommands: "
              + ", ".join(sorted(COMMANDS)))
        return EXIT_OK if argv else EXIT_USAGE
    command = argv[0]
    if command not in COMMANDS:
        print(f"unknown command: {command}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return COMMANDS[command](argv[1:])
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.FeatureFileError, CheckpointError, FileNotFoundError,
            ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
