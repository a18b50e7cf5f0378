"""Command-line surface: ingest, train, evaluate, recommend, gradcheck.

Run configuration is a flat UTF-8 key = value file ('#' starts a comment).
Unknown keys abort before any work starts. The resolved configuration is
echoed into the checkpoint so evaluation and recommendation need no
external config.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import checkpoint as ckpt
from . import corpus as corpus_mod
from . import evaluation, model, training
from .features import CandidateFeatures, FeatureConfig, FeatureSpace, QueryFeatures


class ConfigError(Exception):
    pass


def _parse_bool(value: str) -> bool:
    v = value.lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


# key -> (parser, default)
_CONFIG_SPEC = {
    "use_text": (_parse_bool, True),
    "use_date": (_parse_bool, True),
    "text_hash_buckets": (int, 4096),
    "embed_dim": (int, 32),
    "batch_size": (int, 256),
    "epochs": (int, 20),
    "seed": (int, 0),
    "rating_weight": (float, 0.5),
    "retrieval_weight": (float, 0.5),
    "schedule": (str, "joint"),
    "softmax_mode": (str, "full_corpus"),
    "learning_rate": (float, 1e-3),
    "epsilon": (float, 1e-7),
    "split_ratio": (float, 0.9),
    "eval_ks": (str, "100"),
    "label_scale": (str, "raw"),
    "mnb_buckets": (int, 32768),
    # derived at train time, carried in the checkpoint echo
    "date_min": (int, 0),
    "date_max": (int, 0),
}


def parse_config_text(text: str) -> dict:
    cfg = {key: default for key, (_, default) in _CONFIG_SPEC.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONFIG_SPEC:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        parser = _CONFIG_SPEC[key][0]
        try:
            cfg[key] = parser(value)
        except (ValueError, ConfigError) as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    if cfg["label_scale"] not in ("raw", "normalized"):
        raise ConfigError(f"label_scale must be raw or normalized: {cfg['label_scale']!r}")
    return cfg


def config_echo(cfg: dict) -> str:
    """Canonical key=value text, stable across runs."""
    lines = []
    for key in sorted(_CONFIG_SPEC):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def _eval_ks(cfg: dict) -> list[int]:
    return [int(part) for part in str(cfg["eval_ks"]).split(",") if part.strip()]


def _feature_config(cfg: dict) -> FeatureConfig:
    return FeatureConfig(
        use_text=cfg["use_text"],
        use_date=cfg["use_date"],
        text_hash_buckets=cfg["text_hash_buckets"],
    )


def _train_config(cfg: dict) -> training.TrainConfig:
    return training.TrainConfig(
        weights=training.LossWeights(cfg["rating_weight"], cfg["retrieval_weight"]),
        batch_size=cfg["batch_size"],
        epochs=cfg["epochs"],
        seed=cfg["seed"],
        schedule=cfg["schedule"],
        softmax_mode=cfg["softmax_mode"],
        learning_rate=cfg["learning_rate"],
        epsilon=cfg["epsilon"],
        embed_dim=cfg["embed_dim"],
    )


def _load_corpus_file(path: str, skip_malformed: bool = False) -> corpus_mod.Corpus:
    with open(path, "r", encoding="utf-8") as f:
        return corpus_mod.load_corpus(f, skip_malformed=skip_malformed)


AUX_CANDIDATES = "aux.candidate_embeddings"


def _params_from_checkpoint(
    tensors: dict[str, np.ndarray], cfg: dict
) -> tuple[model.ModelParams, dict[str, np.ndarray]]:
    aux = {n: t for n, t in tensors.items() if n.startswith("aux.")}
    core = {n: t for n, t in tensors.items() if not n.startswith("aux.")}
    params = model.ModelParams(
        k=cfg["embed_dim"],
        use_text=cfg["use_text"],
        use_date=cfg["use_date"],
        tensors=core,
    )
    return params, aux


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------


def cmd_ingest(args: argparse.Namespace) -> int:
    corpus = _load_corpus_file(args.input, skip_malformed=args.skip_malformed)
    with open(args.out, "w", encoding="utf-8") as f:
        for record in corpus.records:
            f.write(corpus_mod.serialize_record(record) + "\n")
    for line in corpus_mod.corpus_stats(corpus).lines():
        print(line)
    if args.skip_malformed:
        print(f"skipped: {corpus.skipped}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    if args.config:
        with open(args.config, "r", encoding="utf-8") as f:
            cfg = parse_config_text(f.read())
    else:
        cfg = parse_config_text("")
    if args.rating_weight is not None:
        cfg["rating_weight"] = args.rating_weight
    if args.retrieval_weight is not None:
        cfg["retrieval_weight"] = args.retrieval_weight
    if args.two_phase:
        cfg["schedule"] = "two_phase"

    corpus = _load_corpus_file(args.corpus)
    split = corpus_mod.temporal_split(corpus, cfg["split_ratio"])
    train_records = [corpus.records[i] for i in split.train]
    space = FeatureSpace.build(train_records, _feature_config(cfg))
    cfg["date_min"], cfg["date_max"] = space.date_min, space.date_max

    inputs = training.TrainInputs.from_records(train_records, space, cfg["label_scale"])
    tconfig = _train_config(cfg)
    if cfg["schedule"] == "two_phase":
        result = training.two_phase_train(inputs, space, tconfig)
        params, trace = result.params, result.trace
    else:
        params, trace = training.train(inputs, space, tconfig)
    for entry in trace:
        print(entry.line())

    tensors = dict(params.tensors)
    tensors[AUX_CANDIDATES] = model.candidate_embeddings(params, inputs.corpus_candidates)
    ckpt.save_checkpoint(
        args.out, tensors, space.user_vocab, space.business_vocab, config_echo(cfg)
    )
    print(f"checkpoint: {args.out}")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    tensors, user_vocab, business_vocab, echo = ckpt.load_checkpoint(args.checkpoint)
    cfg = parse_config_text(echo)
    params, _ = _params_from_checkpoint(tensors, cfg)
    space = FeatureSpace(
        user_vocab=user_vocab,
        business_vocab=business_vocab,
        config=_feature_config(cfg),
        date_min=cfg["date_min"],
        date_max=cfg["date_max"],
    )
    corpus = _load_corpus_file(args.corpus)
    split = corpus_mod.temporal_split(corpus, cfg["split_ratio"])
    ks = [int(k) for k in args.k] if args.k else _eval_ks(cfg)
    report = evaluation.evaluate(
        params,
        corpus,
        split,
        space,
        ks=ks,
        label_scale=cfg["label_scale"],
        rating_weight=cfg["rating_weight"],
        retrieval_weight=cfg["retrieval_weight"],
        mnb=args.mnb,
        mnb_buckets=cfg["mnb_buckets"],
        seed=cfg["seed"],
    )
    with open(args.report, "w", encoding="utf-8") as f:
        f.write(report.text())
    print(f"rmse={report.rmse:.6f}")
    for k in sorted(report.top_k):
        print(f"top_k.{k}={report.top_k[k]:.6f}")
    return 0


def cmd_recommend(args: argparse.Namespace) -> int:
    tensors, user_vocab, business_vocab, echo = ckpt.load_checkpoint(args.checkpoint)
    cfg = parse_config_text(echo)
    params, aux = _params_from_checkpoint(tensors, cfg)
    if AUX_CANDIDATES not in aux:
        raise ckpt.CorruptFile("checkpoint lacks precomputed candidate embeddings")
    cand_emb = aux[AUX_CANDIDATES]
    if args.user_id not in user_vocab:
        print(f"error: unknown user id {args.user_id!r}", file=sys.stderr)
        return 1
    # No interaction context exists at recommendation time: date slots zero.
    query = QueryFeatures(user_index=user_vocab.lookup(args.user_id))
    u = model.user_encode(query, params, task="retrieval")
    scores = cand_emb @ u
    order = np.argsort(-scores, kind="stable")
    order = order[order != 0]  # index 0 is the OOV bucket, not a business
    for rank, idx in enumerate(order[: args.k], start=1):
        print(f"{rank}, {business_vocab.id_of(int(idx))}, {scores[idx]:.6f}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    err, worst, seed_used = training.reference_gradcheck(
        seed=args.seed, corrupt=args.corrupt
    )
    print(f"max relative error: {err:.3e} (tensor {worst or 'n/a'}, seed {seed_used})")
    if err < 1e-4:
        print("gradcheck: PASS")
        return 0
    print(f"gradcheck: FAIL on tensor {worst}", file=sys.stderr)
    return 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poirec",
        description="Two-tower multi-task point-of-interest recommender.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate review JSON lines and emit a corpus file")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--skip-malformed", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--rating-weight", type=float, default=None)
    p.add_argument("--retrieval-weight", type=float, default=None)
    p.add_argument("--two-phase", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="compute metrics from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--k", action="append", type=int)
    p.add_argument("--mnb", action="store_true")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="top-K businesses for a user id")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--user-id", required=True)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_recommend)

    p = sub.add_parser("gradcheck", help="verify analytic gradients by finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (
        corpus_mod.CorpusError,
        ConfigError,
        ckpt.CheckpointError,
        evaluation.EmptyInput,
        FileNotFoundError,
        FloatingPointError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
