"""Command-line entry point: ``mergecap <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import data as D
from .inference import decode, evaluate_model, replay_trace
from .metrics import TOKENIZER_VERSION
from .model import ModelConfig
from .persistence import CheckpointError, load_model, save_checkpoint, write_manifest
from .training import NumericalError, TrainConfig, WarmStartError, train

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

log = logging.getLogger("mergecap")

# desk-scale defaults; TrainConfig/ModelConfig themselves carry the full-scale values
TOY_MODEL = {"embed_dim": 32, "hidden_dim": 64, "att_hidden_dim": 32, "out_hidden_dim": 64,
             "max_caption_len": 16}
TOY_TRAIN = {"lr_initial": 5e-3, "epochs": 30, "eval_interval_iterations": None,
             "n_attention_train": 2}


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("attention counts must be positive integers")
    return values


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="dataset directory (from gen-data)")
    p.add_argument("--vocab", help="vocabulary file (default: DATA/vocab.txt)")
    p.add_argument("--config", help="JSON file with optional 'model' and 'train' sections")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, dest="lr_initial")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--eval-interval", type=int, dest="eval_interval_iterations",
                   help="iterations between validations (0: once per epoch)")
    p.add_argument("--beam", type=int, dest="eval_beam", help="beam size for validation")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--hidden-dim", type=int)
    p.add_argument("--att-hidden-dim", type=int)
    p.add_argument("--out-hidden-dim", type=int)
    p.add_argument("--loss", choices=("cross_entropy", "self_critical"), dest="loss_kind")
    p.add_argument("--init", help="checkpoint to start from (required for self_critical)")
    p.add_argument("--epoch-offset", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mergecap", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-val", type=int, default=100)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--n-regions", type=int, default=6)
    p.add_argument("--feat-dim", type=int, default=32)
    p.add_argument("--noise", type=float, default=0.1)

    p = sub.add_parser("build-vocab", help="build a vocabulary from a captions file")
    p.add_argument("--captions", required=True, help="captions JSONL (usually train.jsonl)")
    p.add_argument("--out", required=True)
    p.add_argument("--min-count", type=int, default=5, help="words seen this often or less become unk")
    p.add_argument("--max-len", type=int, default=16)

    p = sub.add_parser("train", help="train one model")
    _add_train_flags(p)
    p.add_argument("--train-attend", type=int, help="attention iterations per word in training (N)")
    p.add_argument("--attend", type=int, help="attention iterations for validation (M)")

    for name, helptext in (("eval", "score a checkpoint on a split"),
                           ("caption", "caption one image")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--vocab")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", default="val" if name == "eval" else "test")
        p.add_argument("--attend", type=int, help="attention iterations per word (M)")
        p.add_argument("--beam", type=int, default=2 if name == "eval" else 1)
        if name == "eval":
            p.add_argument("--out", help="report JSON")
            p.add_argument("--captions-out", help="decoded captions as JSON Lines")
        else:
            p.add_argument("--index", type=int, default=0, help="position of the image in the split")
            p.add_argument("--image-id", type=int)
            p.add_argument("--trace-out", help="write the attention trace JSON (and a PNG beside it)")

    p = sub.add_parser("compare", help="N x M attention-iteration grid")
    _add_train_flags(p)
    p.add_argument("--train-attend", type=_int_list, default=[1, 2, 3])
    p.add_argument("--eval-attend", type=_int_list, default=[1, 2, 3])
    p.add_argument("--split", default="val")

    p = sub.add_parser("grad-check", help="finite-difference check of all parameter gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--attend", type=int, default=2)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out")
    return parser


# --------------------------------------------------------------------------
# helpers


def _vocab(args) -> D.Vocabulary:
    path = Path(args.vocab) if args.vocab else Path(args.data) / "vocab.txt"
    if not path.exists():
        raise UsageError(f"vocabulary {path} not found; run build-vocab first or pass --vocab")
    return D.Vocabulary.load(path)


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None


def resolve_configs(args, vocab: D.Vocabulary, feat_dim: int) -> tuple[ModelConfig, TrainConfig]:
    """Toy defaults < config file < flags."""
    model = dict(TOY_MODEL)
    trainc = dict(TOY_TRAIN)
    if getattr(args, "config", None):
        cfg = _load_json(args.config)
        unknown = set(cfg) - {"model", "train"}
        if unknown:
            raise UsageError(f"config file has unknown sections {sorted(unknown)}")
        model.update(cfg.get("model", {}))
        trainc.update(cfg.get("train", {}))
    for key in ("embed_dim", "hidden_dim", "att_hidden_dim", "out_hidden_dim"):
        if getattr(args, key, None) is not None:
            model[key] = getattr(args, key)
    for key in ("seed", "epochs", "lr_initial", "batch_size", "eval_beam", "loss_kind", "epoch_offset"):
        if getattr(args, key, None) is not None:
            trainc[key] = getattr(args, key)
    if getattr(args, "eval_interval_iterations", None) is not None:
        trainc["eval_interval_iterations"] = args.eval_interval_iterations or None
    if isinstance(getattr(args, "train_attend", None), int):
        trainc["n_attention_train"] = args.train_attend
    if getattr(args, "attend", None) is not None:
        trainc["n_attention_eval"] = args.attend
    model["vocab_size"] = len(vocab)
    model["feat_dim"] = feat_dim
    try:
        return ModelConfig(**model), TrainConfig.from_dict(trainc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def _split(args, name: str) -> D.CaptionDataset:
    return D.load_split(args.data, name)


def _init_model(args):
    if not getattr(args, "init", None):
        return None
    model, _ = load_model(args.init)
    return model


def _train_one(args, vocab, train_set, val_set, mcfg, tcfg, out: Path):
    init = _init_model(args)
    if init is not None:
        mcfg = init.config
    write_manifest(out / "run_manifest.json", {
        "command": args.command,
        "data": str(args.data),
        "model_config": mcfg.to_dict(),
        "train_config": tcfg.to_dict(),
        "init": getattr(args, "init", None),
        "reward_metric": "CIDEr-D (corpus IDF from training references, sigma 6, scale 10)",
        "tokenizer_version": TOKENIZER_VERSION,
    })
    result = train(train_set, val_set, vocab, tcfg, mcfg, init=init, out_dir=out)
    final_meta = {"model_config": result.model.config.to_dict(), "train_config": tcfg.to_dict(),
                  "epoch": tcfg.epochs - 1, "iteration": result.log[-1]["iteration"] if result.log else 0,
                  "best_val_cider": result.best.val_cider if result.best else None}
    save_checkpoint(result.model.params, final_meta, out / "final.json")
    if result.log:
        from .plotting import plot_training_log

        plot_training_log(result.log, out / "training_curve.png")
    return result


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    world = D.SyntheticWorld(seed=args.seed, noise=args.noise)
    splits = D.generate_synthetic(world, args.n_train, args.n_val, args.n_test,
                                  args.n_regions, args.feat_dim, args.seed)
    out = Path(args.out)
    for ds in splits:
        D.save_split(out, ds)
    write_manifest(out / "world.json", {**asdict(world), "n_regions": args.n_regions,
                                        "feat_dim": args.feat_dim, "seed": args.seed})
    print(f"wrote {sum(len(s) for s in splits)} images to {out}")
    return 0


def cmd_build_vocab(args) -> int:
    caps = D.read_captions(args.captions)
    vocab = D.build_vocab([c for cs in caps.values() for c in cs], args.min_count, args.max_len)
    vocab.save(args.out)
    print(f"vocabulary of {len(vocab)} tokens written to {args.out}")
    return 0


def cmd_train(args) -> int:
    vocab = _vocab(args)
    train_set, val_set = _split(args, "train"), _split(args, "val")
    mcfg, tcfg = resolve_configs(args, vocab, train_set.images[0].features.feat_dim)
    out = Path(args.out)
    result = _train_one(args, vocab, train_set, val_set, mcfg, tcfg, out)
    best = result.best
    if best is not None:
        print(f"best val CIDEr-D {best.val_cider:.4f} at epoch {best.epoch}; checkpoint {out / 'best.json'}")
    return 0


def _model_for_eval(args):
    model, manifest = load_model(args.checkpoint)
    m = args.attend or manifest.get("train_config", {}).get("n_attention_train", 1)
    return model, manifest, m


def cmd_eval(args) -> int:
    vocab = _vocab(args)
    ds = _split(args, args.split)
    model, _, m = _model_for_eval(args)
    report, words = evaluate_model(model, ds, vocab, m, args.beam)
    if args.captions_out:
        D.write_captions(args.captions_out, [(r.image_id, [" ".join(w)]) for r, w in zip(ds.images, words)])
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return 0


def cmd_caption(args) -> int:
    vocab = _vocab(args)
    ds = _split(args, args.split)
    if args.image_id is not None:
        matches = [r for r in ds.images if r.image_id == args.image_id]
        if not matches:
            raise D.DataError(f"image id {args.image_id} not in split {args.split}")
        rec = matches[0]
    else:
        if not 0 <= args.index < len(ds):
            raise D.DataError(f"index {args.index} outside split {args.split} of {len(ds)} images")
        rec = ds.images[args.index]
    model, _, m = _model_for_eval(args)
    tokens = decode(model, rec.features, m, args.beam, model.config.max_caption_len + 1)
    words = vocab.decode(tokens)
    print(" ".join(words))
    if args.trace_out:
        trace, state = replay_trace(model, rec.features, tokens, m)
        payload = {"image_id": rec.image_id, "caption": " ".join(words), "tokens": tokens,
                   "m_attention": m, "word_index": state.i, "attention_index": state.j,
                   "weights": [w.tolist() for w in trace.weights]}
        out = Path(args.trace_out)
        out.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        from .plotting import plot_attention

        plot_attention(trace.weights, words, m, out.with_suffix(".png"))
    return 0


def cmd_compare(args) -> int:
    vocab = _vocab(args)
    train_set, val_set = _split(args, "train"), _split(args, "val")
    eval_set = val_set if args.split == "val" else _split(args, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    beam = args.eval_beam or 2
    rows = []
    checkpoints = {}
    # training cells run one after another so each is reproducible on its own
    for n in args.train_attend:
        mcfg, tcfg = resolve_configs(args, vocab, train_set.images[0].features.feat_dim)
        tcfg = replace(tcfg, n_attention_train=n, n_attention_eval=None)
        cell_dir = out / f"train_N{n}"
        _train_one(args, vocab, train_set, val_set, mcfg, tcfg, cell_dir)
        checkpoints[n] = cell_dir / "best.json"
    for n in args.train_attend:
        model, _ = load_model(checkpoints[n])
        for m in args.eval_attend:
            report, _ = evaluate_model(model, eval_set, vocab, m, beam)
            rows.append({"N": n, "M": m, "bleu4": report["bleu4"], "rouge_l": report["rouge_l"],
                         "cider_d": report["cider_d"], "checkpoint": str(checkpoints[n])})
    with open(out / "grid.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["N", "M", "bleu4", "rouge_l", "cider_d", "checkpoint"])
        writer.writeheader()
        writer.writerows(rows)
    (out / "grid.json").write_text(json.dumps({"split": args.split, "beam": beam,
                                               "rows": rows}, indent=2), encoding="utf-8")
    from .plotting import plot_score_grid

    plot_score_grid(rows, out / "grid.png")
    print(f"{'N':>2} {'M':>2} {'BLEU-4':>8} {'ROUGE-L':>8} {'CIDEr-D':>8}")
    for r in rows:
        print(f"{r['N']:>2} {r['M']:>2} {r['bleu4']:8.4f} {r['rouge_l']:8.4f} {r['cider_d']:8.4f}")
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import gradient_check_suite

    report = gradient_check_suite(seed=args.seed, eps=args.eps, n_attention=args.attend)
    for name, err in report["errors"].items():
        print(f"{name:14s} {err:.3e}")
    print(f"max relative error {report['max_relative_error']:.3e} "
          f"({report['n_parameters']} parameters, {report['seconds']:.1f}s)")
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2), encoding="utf-8")
    return 0 if report["max_relative_error"] < args.tolerance else EXIT_NUMERIC


COMMANDS = {
    "gen-data": cmd_gen_data,
    "build-vocab": cmd_build_vocab,
    "train": cmd_train,
    "eval": cmd_eval,
    "caption": cmd_caption,
    "compare": cmd_compare,
    "grad-check": cmd_grad_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, WarmStartError) as exc:
        parser.print_usage(sys.stderr)
        print(f"mergecap {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (D.DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"mergecap {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"mergecap {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
