"""Command-line entry point: ``lightdot <subcommand> ...``.

Settings resolve as defaults < ``--config`` JSON file < explicit flags. Every
artifact gets a ``<out>.json`` sidecar (``run_config.json`` inside corpus
directories) holding the resolved settings, minus the output-handling flags,
so two identical runs write identical files.

Exit codes: 0 success, 1 runtime error (printed as ``error: <kind>: <detail>``),
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .bench import METHODS, bench_latency
from .checkpoint import CheckpointError, CheckpointMeta, load_checkpoint, save_checkpoint
from .encoders import DualEncoder, ModelConfig, encode_images, encode_texts
from .evaluation import evaluate
from .index import EmbeddingIndexError, build_index, load_index, save_index, top_k
from .rerank import SCORERS, CrossAttentionScorer, ScorerError, make_scorer, retrieve_rerank, train_cross_scorer
from .synth import CorpusFormatError, SynthConfig, generate_corpus, read_corpus, write_corpus
from .training import TASKS, TrainConfig, TrainingDivergedError, finetune, pretrain, write_log

_NOT_ECHOED = {"out", "force", "format", "config", "func", "command"}


class CliError(Exception):
    def __init__(self, kind: str, detail: str):
        self.kind = kind
        super().__init__(detail)


# -- helpers ------------------------------------------------------------------


def _resolved(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_ECHOED}


def _claim(path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and not force:
        raise CliError("exists", f"{p} already exists; pass --force to overwrite")
    return p


def _sidecar(path, args, **extra) -> None:
    Path(str(path) + ".json").write_text(json.dumps({**extra, "config": _resolved(args)}, indent=1,
                                                    sort_keys=True) + "\n")


def _emit(args, records: list[dict], plain_lines: list[str]) -> None:
    if args.format == "json-lines":
        for r in records:
            print(json.dumps(r))
    else:
        for line in plain_lines:
            print(line)


def _model_config(corpus, args) -> ModelConfig:
    c = corpus.config
    return ModelConfig(layers=args.layers, dim=args.dim, heads=args.heads, vocab=len(corpus.vocab),
                       classes=c.classes, feat_dim=c.feat_dim, max_regions=max(12, c.max_concepts),
                       max_tokens=max(16, c.max_len))


def _load_model(path) -> tuple[DualEncoder, CheckpointMeta]:
    params, config, meta = load_checkpoint(path)
    return DualEncoder(config, params), meta


def _train_config(args, tasks) -> TrainConfig:
    return TrainConfig(tasks=tuple(tasks), steps=args.steps, batch_size=args.batch_size, lr=args.lr,
                       weight_decay=args.weight_decay, warmup_frac=args.warmup_frac, seed=args.seed,
                       eval_every=args.eval_every, smrm_variant=args.smrm_variant, grad_accum=args.grad_accum)


def _index_meta(path) -> dict:
    side = Path(str(path) + ".json")
    if not side.is_file():
        raise CliError("missing-metadata", f"{side} not found; indexes are written with a metadata sidecar")
    return json.loads(side.read_text())


# -- subcommands --------------------------------------------------------------


def cmd_gen(args) -> int:
    out = _claim(args.out, args.force)
    cfg = SynthConfig(pairs=args.pairs, concepts=args.concepts, vocab=args.vocab, classes=args.classes,
                      feat_dim=args.feat_dim, noise=args.noise, seed=args.seed, split=tuple(args.split))
    write_corpus(generate_corpus(cfg), out)
    (out / "run_config.json").write_text(json.dumps(_resolved(args), indent=1, sort_keys=True) + "\n")
    _emit(args, [{"corpus": str(out), "pairs": cfg.pairs}], [f"wrote {out} ({cfg.pairs} pairs)"])
    return 0


def _save_model(args, out, model: DualEncoder, result, log) -> None:
    meta = CheckpointMeta(result.best_step, model.config.hash(), result.val_ar)
    save_checkpoint(model.params, model.config, meta, out)
    write_log(log, str(out) + ".log")
    _sidecar(out, args, config_hash=model.config.hash(), step=meta.step, val_ar=meta.val_ar)


def cmd_pretrain(args) -> int:
    out = _claim(args.out, args.force)
    corpus = read_corpus(args.corpus)
    model = _load_model(args.init)[0] if args.init else DualEncoder.create(_model_config(corpus, args), args.seed)
    result = pretrain(_train_config(args, args.tasks.split(",")), corpus, model)
    _save_model(args, out, result.model, result, result.log)
    _emit(args, [{"checkpoint": str(out), "steps": len(result.log), "final_loss": result.log[-1].loss}],
          [f"wrote {out} after {len(result.log)} steps (last loss {result.log[-1].loss:.4f})"])
    return 0


def cmd_finetune(args) -> int:
    out = _claim(args.out, args.force)
    corpus = read_corpus(args.corpus)
    model = _load_model(args.init)[0] if args.init else DualEncoder.create(_model_config(corpus, args), args.seed)
    result = finetune(_train_config(args, ("cmr",)), corpus, model)
    _save_model(args, out, result.model, result, result.log)
    _emit(args, [{"checkpoint": str(out), "best_step": result.best_step, "val_ar": result.val_ar}],
          [f"wrote {out}: best step {result.best_step}, validation AR {result.val_ar:.4f}"])
    return 0


def cmd_train_scorer(args) -> int:
    out = _claim(args.out, args.force)
    corpus = read_corpus(args.corpus)
    config = _load_model(args.like)[0].config if args.like else _model_config(corpus, args)
    scorer, losses = train_cross_scorer(corpus, config, steps=args.steps, batch_size=args.batch_size,
                                        lr=args.lr, seed=args.seed)
    save_checkpoint(scorer.params, config, CheckpointMeta(args.steps, config.hash()), out)
    _sidecar(out, args, config_hash=config.hash(), kind="cross-scorer")
    _emit(args, [{"checkpoint": str(out), "final_loss": losses[-1]}],
          [f"wrote {out} (last loss {losses[-1]:.4f})"])
    return 0


def cmd_index(args) -> int:
    out = _claim(args.out, args.force)
    corpus = read_corpus(args.corpus)
    model, _ = _load_model(args.checkpoint)
    ids = corpus.ids(None if args.split == "all" else args.split)
    if args.modality == "image":
        vecs = encode_images(model, corpus.regions(ids))
    else:
        vecs = encode_texts(model, corpus.texts(ids))
    index = build_index(vecs, ids)
    save_index(index, out)
    _sidecar(out, args, config_hash=model.config.hash(), modality=args.modality, count=index.count)
    _emit(args, [{"index": str(out), "count": index.count, "modality": args.modality}],
          [f"wrote {out} ({index.count} {args.modality} vectors)"])
    return 0


def _check_hash(index_meta: dict, model: DualEncoder, index_path, ckpt_path) -> None:
    if index_meta.get("config_hash") != model.config.hash():
        raise CliError("config-hash-mismatch",
                       f"index {index_path} has config hash {index_meta.get('config_hash')} but checkpoint "
                       f"{ckpt_path} has {model.config.hash()}")


def cmd_query(args) -> int:
    meta = _index_meta(args.index)
    index = load_index(args.index)
    model, _ = _load_model(args.checkpoint)
    _check_hash(meta, model, args.index, args.checkpoint)
    corpus = read_corpus(args.corpus)
    if (args.text is None) == (args.image_id is None):
        raise CliError("usage", "give exactly one of --text or --image-id")
    want = "image" if args.text is not None else "text"
    if meta.get("modality") != want:
        raise CliError("modality", f"a {'text' if want == 'image' else 'image'} query needs a {want} index, "
                                   f"got {meta.get('modality')}")
    if args.text is not None:
        query = corpus.tokenize(args.text, model.config.max_tokens)
        qvec = encode_texts(model, [query])[0]
    else:
        if args.image_id not in corpus.examples:
            raise CliError("unknown-id", f"image id {args.image_id} not in corpus")
        query = corpus.examples[args.image_id].regions
        qvec = encode_images(model, [query])[0]
    k = max(1, args.k)
    if args.rerank:
        m = min(args.m, index.count)
        k = min(k, m)
        ctx = {"index": index}
        if args.scorer == "cross":
            if not args.scorer_checkpoint:
                raise CliError("usage", "--scorer cross needs --scorer-checkpoint")
            params, sconf, _ = load_checkpoint(args.scorer_checkpoint)
            items = ({i: e.regions for i, e in corpus.examples.items()} if want == "image"
                     else {i: e.tokens for i, e in corpus.examples.items()})
            ctx["cross"] = CrossAttentionScorer(sconf, params, items)
        elif args.scorer == "oracle":
            if args.image_id is None:
                raise CliError("usage", "--scorer oracle needs --image-id (gold is the paired caption)")
            ctx["gold"] = {args.image_id: {args.image_id}}
            query = args.image_id
        scorer = make_scorer(args.scorer, **ctx)
        result = retrieve_rerank(index, qvec, scorer, m, k, query=None if args.scorer == "dot" else query)
    else:
        result = top_k(index, qvec, k)
    records = [{"rank": r, "id": i, "score": s} for r, (i, s) in enumerate(result.items(), 1)]
    _emit(args, records, [f"{r['rank']}\t{r['id']}\t{r['score']:.6f}" for r in records])
    return 0


def cmd_eval(args) -> int:
    out = _claim(args.out, args.force) if args.out else None
    corpus = read_corpus(args.corpus)
    model, _ = _load_model(args.checkpoint)
    scorer = None
    if args.rerank:
        if not args.scorer_checkpoint:
            raise CliError("usage", "--rerank needs --scorer-checkpoint (train one with train-scorer)")
        params, sconf, _ = load_checkpoint(args.scorer_checkpoint)
        scorer = CrossAttentionScorer(sconf, params)
    report = evaluate(model, corpus, args.split, full_pool=args.full_pool, scorer=scorer, m=args.m)
    if out is not None:
        out.write_text(report.to_text())
        Path(str(out) + ".tsv").write_text(report.to_tsv())
        _sidecar(out, args, config_hash=model.config.hash())
    d = report.to_dict()
    _emit(args, [d], [f"{k}={v}" for k, v in d.items()])
    return 0


def cmd_bench(args) -> int:
    out = _claim(args.out, args.force) if args.out else None
    corpus = read_corpus(args.corpus)
    model, _ = _load_model(args.checkpoint)
    scorer = None
    if args.scorer_checkpoint:
        params, sconf, _ = load_checkpoint(args.scorer_checkpoint)
        scorer = CrossAttentionScorer(sconf, params)
    report = bench_latency(model, corpus, [int(p) for p in args.pools.split(",")], queries=args.queries,
                           methods=args.methods.split(","), reps=args.reps, m=args.m, scorer=scorer,
                           budget=args.budget, seed=args.seed, threads=args.threads)
    if out is not None:
        out.write_text(report.to_text())
        Path(str(out) + ".tsv").write_text(report.to_tsv())
        _sidecar(out, args, config_hash=model.config.hash())
    if args.format == "json-lines":
        sys.stdout.write(report.to_json_lines())
    else:
        sys.stdout.write(report.to_tsv())
    return 0


# -- parser -------------------------------------------------------------------


def _train_flags(p: argparse.ArgumentParser, steps: int) -> None:
    p.add_argument("--corpus", required=True)
    p.add_argument("--init", help="checkpoint to start from (fresh weights otherwise)")
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--batch-size", type=int, default=96)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--warmup-frac", type=float, default=0.1)
    p.add_argument("--eval-every", type=int, default=50)
    p.add_argument("--grad-accum", type=int, default=1)
    p.add_argument("--smrm-variant", choices=("both", "mrfr", "mrc"), default="both")
    _model_flags(p)


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of flag defaults (flag names with underscores)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--format", choices=("plain", "json-lines"), default="plain")

    parser = argparse.ArgumentParser(prog="lightdot", description="Twin-encoder cross-modal retrieval toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic paired corpus")
    p.add_argument("--pairs", type=int, default=512)
    p.add_argument("--concepts", type=int, default=16)
    p.add_argument("--vocab", type=int, default=128)
    p.add_argument("--classes", type=int, default=16)
    p.add_argument("--feat-dim", type=int, default=24)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--split", type=int, nargs=3, default=[448, 32, 32], metavar=("TRAIN", "VAL", "TEST"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen, seed=42)

    p = sub.add_parser("pretrain", parents=[common], help="pre-train with sampled tasks")
    _train_flags(p, steps=300)
    p.add_argument("--tasks", default="cmr,vmlm,smrm", help=f"comma list from {','.join(TASKS)}")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[common], help="finetune with the contrastive loss")
    _train_flags(p, steps=500)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("train-scorer", parents=[common], help="train the cross-attention re-ranker")
    p.add_argument("--corpus", required=True)
    p.add_argument("--like", help="encoder checkpoint whose model config the scorer copies")
    p.add_argument("--steps", type=int, default=300)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    _model_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_scorer)

    p = sub.add_parser("index", parents=[common], help="encode a corpus modality into an index file")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--modality", choices=("image", "text"), default="image")
    p.add_argument("--split", choices=("all", "train", "val", "test"), default="all")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", parents=[common], help="top-K lookup against an index")
    p.add_argument("--index", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True, help="supplies the vocabulary and image features")
    p.add_argument("--text")
    p.add_argument("--image-id", type=int)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--rerank", action="store_true")
    p.add_argument("--scorer", default="dot", choices=sorted(SCORERS))
    p.add_argument("--scorer-checkpoint")
    p.add_argument("--m", type=int, default=50)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", parents=[common], help="R@K and AR on a split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--full-pool", action="store_true", help="candidates from every split")
    p.add_argument("--rerank", action="store_true")
    p.add_argument("--scorer-checkpoint")
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="per-query latency by method and pool size")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pools", default="1000,4000,16000")
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--queries", type=int, default=5)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--m", type=int, default=50)
    p.add_argument("--budget", type=float, default=120.0, help="seconds per cell before extrapolating")
    p.add_argument("--threads", type=int, default=int(os.environ.get("LIGHTDOT_THREADS", "1") or 1))
    p.add_argument("--scorer-checkpoint")
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            layered = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read --config {args.config}: {exc}")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = sorted(set(layered) - known)
        if unknown:
            parser.error(f"unknown keys in {args.config}: {', '.join(unknown)}")
        sub.set_defaults(**layered)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    args = parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        kind, detail = exc.kind, str(exc)
    except (CheckpointError, CorpusFormatError, EmbeddingIndexError, ScorerError, TrainingDivergedError) as exc:
        kind, detail = type(exc).__name__, str(exc)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        kind, detail = type(exc).__name__, str(exc)
    if args.format == "json-lines":
        print(json.dumps({"error": kind, "detail": detail}), file=sys.stderr)
    else:
        print(f"error: {kind}: {detail}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
