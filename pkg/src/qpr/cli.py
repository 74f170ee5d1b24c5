"""``qpr`` command line: prep -> train -> index -> search/eval, driven by one INI config.

Config files hold a single ``[qpr]`` section of ``key = value`` lines; any key
can be overridden with ``--set key=value``. Unknown keys are rejected and the
whole config is validated before a command touches the filesystem.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .annindex import IvfIndex
from .datasetprep import (DataError, QuestionCluster, filter_clusters, read_cluster_records,
                          read_corpus, read_pairs, read_quora_tsv, split_and_deleak,
                          transitive_clusters, write_cluster_records, write_corpus, write_jsonl,
                          write_pairs)
from .encoder import EncoderConfig, encode_batch, load_model, save_model
from .evaluation import evaluate
from .synthetic import template_clusters
from .text import Vocabulary, build_vocab, encode_ids, tokenize
from .train import TrainConfig, train

log = logging.getLogger("qpr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
SECTION = "qpr"
MANIFEST = "manifest.json"
MODEL_FILE = "model.bin"
VOCAB_FILE = "vocab.tsv"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    workers: int = 1
    # dataset preparation
    threshold: float = 0.1
    # encoder
    e_dim: int = 300
    win: int = 5
    c_dim: int = 300
    n: int = 300
    V: int = 50000
    m: int = 5000
    max_len: int = 64
    # training
    objective: str = "sdml"
    learning_rate: float = 1e-3
    batch_size: int = 512
    epsilon: float = 0.3
    alpha: float = 0.5
    distance: str = "ssd"
    max_epochs: int = 20
    patience: int = 3
    # index and evaluation
    nlist: int = 1024
    kmeans_iters: int = 25
    nprobe: int = 32
    k: int = 20

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.e_dim, self.win, self.c_dim, self.n, self.V, self.m, self.max_len)

    def training(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.batch_size, self.objective, self.epsilon,
                           self.alpha, self.distance, self.max_epochs, self.patience, self.seed,
                           self.workers)

    def validate(self) -> "RunConfig":
        try:
            self.encoder()
            self.training()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError("threshold must lie in [0, 1]")
        for name in ("nlist", "kmeans_iters", "nprobe", "k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        return self


_FIELD_TYPES = {f.name: type(f.default) for f in fields(RunConfig)}


def _convert(key: str, raw: str):
    if key not in _FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        return _FIELD_TYPES[key](raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


def load_config(path: str | None, overrides: list[str], **flags) -> RunConfig:
    """Defaults <- config file <- ``--set`` overrides <- dedicated flags (seed, workers)."""
    values: dict = {}
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        extra = [s for s in parser.sections() if s != SECTION]
        if extra:
            raise ConfigError(f"unknown config section(s) {extra}; use [{SECTION}]")
        if parser.has_section(SECTION):
            values.update({k: _convert(k, v) for k, v in parser.items(SECTION)})
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = _convert(key.strip(), raw)
    values.update({k: v for k, v in flags.items() if v is not None})
    return RunConfig(**values).validate()


def _read_manifest(path: str | Path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    return manifest, path.parent


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_model_dir(model_dir: str | Path) -> tuple[EncoderConfig, object, Vocabulary]:
    model_dir = Path(model_dir)
    enc, params = load_model(model_dir / MODEL_FILE)
    vocab = Vocabulary.load(model_dir / VOCAB_FILE)
    if vocab.num_ids != enc.num_ids:
        raise DataError(f"{model_dir}: vocabulary does not match the model")
    return enc, params, vocab


# --- commands ----------------------------------------------------------------------------

def cmd_synth(args, cfg: RunConfig) -> int:
    clusters = template_clusters(args.clusters, seed=cfg.seed, typo_rate=args.typo_rate)
    write_cluster_records(args.out, clusters)
    print(f"wrote {len(clusters)} clusters to {args.out}")
    return EXIT_OK


def cmd_prep(args, cfg: RunConfig) -> int:
    fmt = args.format or ("clusters" if str(args.input).endswith(".jsonl") else "quora")
    if fmt == "quora":
        pairs = read_quora_tsv(args.input)
        usable = [p for p in pairs if tokenize(p[0]) and tokenize(p[1])]
        clusters, all_questions = transitive_clusters(usable)
        dropped_empty = len(pairs) - len(usable)
    else:
        clusters = read_cluster_records(args.input)
        dropped_empty = sum(1 for c in clusters for q in c.questions if not tokenize(q))
        clusters = [QuestionCluster(c.cluster_id, tuple(q for q in c.questions if tokenize(q)))
                    for c in clusters if any(tokenize(q) for q in c.questions)]
        all_questions = list(dict.fromkeys(q for c in clusters for q in c.questions))
    kept, rejected = filter_clusters(clusters, cfg.threshold)
    splits = split_and_deleak(kept, seed=cfg.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in ("train", "validation", "test"):
        files[f"{name}_pairs"] = f"{name}_pairs.tsv"
        files[f"{name}_clusters"] = f"{name}_clusters.jsonl"
        write_pairs(out / files[f"{name}_pairs"], splits.pairs(name))
        write_cluster_records(out / files[f"{name}_clusters"], getattr(splits, name))
    files["corpus"] = "corpus.tsv"
    files["rejected"] = "rejected.jsonl"
    write_corpus(out / files["corpus"], all_questions)
    write_jsonl(out / files["rejected"], rejected)
    manifest = {
        "input": Path(args.input).name,
        "input_sha256": hashlib.sha256(Path(args.input).read_bytes()).hexdigest(),
        "format": fmt, "seed": cfg.seed, "threshold": cfg.threshold,
        "files": files,
        "counts": {
            "clusters": len(clusters), "rejected_clusters": len(rejected),
            "dropped_empty": dropped_empty, "removed_leaked": splits.removed,
            "corpus": len(all_questions),
            **{f"{s}_clusters": len(getattr(splits, s)) for s in ("train", "validation", "test")},
            **{f"{s}_pairs": len(splits.pairs(s)) for s in ("train", "validation", "test")},
        },
    }
    _write_json(out / MANIFEST, manifest)
    print(json.dumps(manifest["counts"], sort_keys=True))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    manifest, base = _read_manifest(args.manifest)
    train_pairs = read_pairs(base / manifest["files"]["train_pairs"])
    val_pairs = read_pairs(base / manifest["files"]["validation_pairs"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    enc = cfg.encoder()
    vocab = build_vocab([q for p in train_pairs for q in p], cfg.V, cfg.m)
    vocab.save(out / VOCAB_FILE)
    _write_json(out / "config.json", asdict(cfg))
    result = train(train_pairs, val_pairs, vocab, enc, cfg.training(),
                   log_path=out / "train_log.jsonl", state_path=out / "state.npz",
                   resume=args.resume)
    save_model(out / MODEL_FILE, enc, result.params)
    print(f"best epoch {result.best_epoch} val_auc {result.best_auc:.4f} -> {out / MODEL_FILE}")
    return EXIT_OK


def _corpus_vectors(corpus, vocab, params, max_len):
    seqs = [encode_ids(tokenize(q), vocab, max_len) for _, q in corpus]
    empty = [i for (i, _), s in zip(corpus, seqs) if not s]
    if empty:
        raise DataError(f"corpus questions {empty[:5]} tokenize to nothing")
    return encode_batch(seqs, params, max_len)


def cmd_index(args, cfg: RunConfig) -> int:
    enc, params, vocab = _load_model_dir(args.model)
    corpus = read_corpus(args.corpus)
    if not corpus:
        raise DataError(f"{args.corpus}: empty corpus")
    vecs = _corpus_vectors(corpus, vocab, params, enc.max_len)
    nlist = min(cfg.nlist, len(corpus))
    index = IvfIndex.train(vecs, nlist, iters=cfg.kmeans_iters, seed=cfg.seed)
    index.add_batch(np.array([i for i, _ in corpus], dtype=np.int64), vecs)
    index.save(args.out)
    print(f"indexed {index.total_count} questions in {nlist} lists -> {args.out}")
    return EXIT_OK


def cmd_search(args, cfg: RunConfig) -> int:
    enc, params, vocab = _load_model_dir(args.model)
    index = IvfIndex.load(args.index)
    ids = encode_ids(tokenize(args.question), vocab, enc.max_len)
    if not ids:
        raise DataError("question tokenizes to nothing")
    vec = encode_batch([ids], params, enc.max_len)[0]
    text = dict(read_corpus(args.corpus)) if args.corpus else {}
    for rank, (qid, dist) in enumerate(index.search(vec, cfg.k, min(cfg.nprobe, index.nlist)), 1):
        print(f"{rank}\t{qid}\t{dist:.6f}\t{text.get(qid, '')}".rstrip("\t"))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    manifest, base = _read_manifest(args.manifest)
    enc, params, vocab = _load_model_dir(args.model)
    index = IvfIndex.load(args.index)
    corpus = read_corpus(base / manifest["files"]["corpus"])
    qid = {q: i for i, q in corpus}
    queries, gold = [], {}
    for c in read_cluster_records(base / manifest["files"]["test_clusters"]):
        ids = {qid[q] for q in c.questions if q in qid}
        for q in c.questions:
            if q in qid:
                queries.append((qid[q], q))
                gold[qid[q]] = ids - {qid[q]}
    if not queries:
        raise DataError("no test queries found in the corpus")
    report = evaluate(params, vocab, index, queries, gold, k=cfg.k, nprobe=cfg.nprobe,
                      max_len=enc.max_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.jsonl")
    _write_json(out / "latency.json", report.latency_ms)
    print(report.table())
    return EXIT_OK


# --- entry point -------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with a [qpr] section")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="thread cap; 1 guarantees determinism")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="qpr", description="Question paraphrase retrieval pipeline.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write synthetic paraphrase clusters")
    p.add_argument("--out", required=True)
    p.add_argument("--clusters", type=int, default=1000)
    p.add_argument("--typo-rate", type=float, default=0.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep", parents=[common], help="cluster, filter, split and write pairs")
    p.add_argument("input", help="Quora-style pair TSV or cluster JSONL")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("quora", "clusters"))
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", parents=[common], help="train an encoder")
    p.add_argument("manifest", help="manifest.json or its directory")
    p.add_argument("--out", required=True, help="model directory")
    p.add_argument("--resume", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("index", parents=[common], help="encode a corpus into an IVF index")
    p.add_argument("--model", required=True, help="model directory")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="index file")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", parents=[common], help="query the index")
    p.add_argument("question")
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--corpus", help="corpus TSV for printing question text")
    p.add_argument("--k", type=int)
    p.add_argument("--nprobe", type=int)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("eval", parents=[common], help="retrieval metrics on the test split")
    p.add_argument("manifest")
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--k", type=int)
    p.add_argument("--nprobe", type=int)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {"seed": args.seed, "workers": args.workers}
    for name in ("threshold", "k", "nprobe"):
        flags[name] = getattr(args, name, None)
    try:
        cfg = load_config(args.config, args.set, **flags)
    except (ConfigError, TypeError) as exc:
        print(f"qpr: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args, cfg)
    except (ValueError, OSError, KeyError) as exc:
        print(f"qpr: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"qpr: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
