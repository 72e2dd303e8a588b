"""Command-line entry point.

Every command resolves one effective configuration (profile defaults, then
an optional YAML config file, then flags) and records it next to each
artifact it writes. Failures print a single JSON line on stderr and exit
with a code that identifies the failure class.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .corpus import (
    Sentence,
    compute_noise_rates,
    distant_label,
    inject_noise,
    load_conll,
    load_gazetteer,
    merge_layers,
    write_conll,
)
from .errors import ConfigError, ConllParseError, DsnerError
from .knn import build_datastore, load_datastore, save_datastore
from .model import load_checkpoint, save_checkpoint
from .synthetic import make_lexicon, make_synthetic_corpus
from .trainer import PROFILES, RunConfig, collect_labels, evaluate, predict, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_CONFIG = 4
EXIT_MODULE = 5

# flag -> (RunConfig attribute, type)
HYPERPARAMETER_FLAGS = {
    "--lr": ("lr", float),
    "--batch-size": ("batch_size", int),
    "--epochs": ("epochs", int),
    "--max-span-len": ("max_span_len", int),
    "--G": ("G", int),
    "--lambda": ("lam", float),
    "--epsilon": ("epsilon", float),
    "--alpha": ("alpha", float),
    "--gamma": ("gamma", float),
    "--tau": ("tau", float),
    "--mu": ("mu", float),
    "--p": ("p", float),
    "--q": ("q", float),
    "--alpha-prime": ("alpha_prime", float),
    "--eta": ("eta", float),
    "--k": ("k", int),
    "--seed": ("seed", int),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Configuration


def load_config_file(path) -> dict:
    with open(path, encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def resolve_config(args, base: dict | None = None) -> RunConfig:
    """Profile or ``base`` mapping, then the config file, then explicit flags."""
    mapping: dict = {}
    if base:
        mapping = json.loads(json.dumps(base))
    if getattr(args, "config", None):
        for section, values in load_config_file(args.config).items():
            if isinstance(values, dict) and isinstance(mapping.get(section), dict):
                mapping[section].update(values)
            else:
                mapping[section] = values
    if getattr(args, "profile", None):
        mapping["profile"] = args.profile
    cfg = RunConfig.from_mapping(mapping)
    overrides = {attr: getattr(args, attr) for attr, _ in HYPERPARAMETER_FLAGS.values()
                 if getattr(args, attr, None) is not None}
    return cfg.replace(**overrides) if overrides else cfg


def _meta_path(path) -> Path:
    return Path(str(path) + ".meta.json")


def write_meta(path, command: str, cfg: RunConfig | None, **extra) -> None:
    """Sidecar describing how an artifact was produced."""
    meta = {"command": command, **extra}
    if cfg is not None:
        meta["config"] = cfg.to_mapping()
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_text_sentences(path) -> list[Sentence]:
    with open(path, encoding="utf-8") as f:
        return [Sentence(line.split()) for line in f if line.strip()]


# ---------------------------------------------------------------------------
# Commands


def cmd_label(args) -> int:
    cfg = resolve_config(args)
    corpus = load_conll(args.input, layer="gold", scheme=args.scheme)
    gaz = load_gazetteer(args.gazetteer)
    labelled = distant_label(corpus, gaz)
    write_conll(args.output, labelled, layer="distant", scheme=args.scheme)
    n = sum(len(s.distant_spans) for s in labelled)
    write_meta(args.output, "label", cfg, input=str(args.input), gazetteer=str(args.gazetteer),
               sentences=len(labelled), entities=n)
    print(json.dumps({"sentences": len(labelled), "entities": n}))
    return EXIT_OK


def cmd_analyze_noise(args) -> int:
    cfg = resolve_config(args)
    gold = load_conll(args.gold, layer="gold", scheme=args.scheme)
    distant = load_conll(args.distant, layer="distant", scheme=args.scheme)
    report = compute_noise_rates(gold, distant).to_dict()
    payload = {"report": report, "config": cfg.to_mapping()}
    if args.output:
        _write_json(args.output, payload)
    print(json.dumps(report["total"]))
    return EXIT_OK


def _parse_asymmetry(items) -> dict[str, float]:
    out = {}
    for item in items or ():
        label, sep, mult = item.partition("=")
        if not sep:
            raise UsageError(f"--asymmetry expects TYPE=MULTIPLIER, got {item!r}")
        try:
            out[label] = float(mult)
        except ValueError:
            raise UsageError(f"--asymmetry multiplier must be a number, got {mult!r}") from None
    return out


def cmd_inject_noise(args) -> int:
    cfg = resolve_config(args)
    asym = _parse_asymmetry(args.asymmetry)
    gold = load_conll(args.input, layer="gold", scheme=args.scheme)
    seed = args.noise_seed if args.noise_seed is not None else cfg.seed
    noisy = inject_noise(gold, args.flip_rate, args.drop_rate, asym, seed=seed)
    write_conll(args.output, noisy, layer="distant", scheme=args.scheme)
    write_meta(args.output, "inject-noise", cfg, input=str(args.input), flip_rate=args.flip_rate,
               drop_rate=args.drop_rate, asymmetry=asym, noise_seed=seed)
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    cfg = resolve_config(args)
    seed = args.corpus_seed if args.corpus_seed is not None else cfg.seed
    lexicon = make_lexicon(seed=args.lexicon_seed)
    corpus = make_synthetic_corpus(args.sentences, seed, lexicon)
    write_conll(args.output, corpus, layer="gold", scheme=args.scheme)
    write_meta(args.output, "make-synthetic", cfg, sentences=args.sentences, corpus_seed=seed,
               lexicon_seed=args.lexicon_seed)
    if args.gazetteer:
        gaz = lexicon.gazetteer(coverage=args.coverage, seed=args.lexicon_seed)
        with open(args.gazetteer, "w", encoding="utf-8") as f:
            for surface in sorted(gaz.entries):
                for typ in sorted(gaz.entries[surface]):
                    f.write(f"{' '.join(surface)}\t{typ}\n")
        write_meta(args.gazetteer, "make-synthetic", cfg, coverage=args.coverage, lexicon_seed=args.lexicon_seed)
    return EXIT_OK


def _load_training_corpus(args) -> list[Sentence]:
    distant = load_conll(args.train, layer="distant", scheme=args.scheme)
    if args.train_gold:
        gold = load_conll(args.train_gold, layer="gold", scheme=args.scheme)
        return merge_layers(gold, distant)
    return distant


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    cfg = cfg.replace(train_path=str(args.train), dev_path=str(args.dev) if args.dev else None,
                      output_dir=str(args.output_dir))
    train_corpus = _load_training_corpus(args)
    dev = load_conll(args.dev, layer="gold", scheme=args.scheme) if args.dev else None
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = collect_labels(train_corpus, dev)
    result = train(cfg, train_corpus, dev, labels=labels, metrics_path=out / "metrics.jsonl")
    fingerprint = save_checkpoint(result.model, out / "model.pt", cfg.to_mapping())
    summary = {"best_epoch": result.best_epoch, "best_dev_f1": result.best_dev_f1, "fingerprint": fingerprint,
               "labels": labels, "memory": result.memory.to_json(), "config": cfg.to_mapping()}
    _write_json(out / "train_summary.json", summary)
    write_meta(out / "metrics.jsonl", "train", cfg)
    print(json.dumps({"best_epoch": result.best_epoch, "best_dev_f1": result.best_dev_f1,
                      "checkpoint": str(out / "model.pt")}))
    return EXIT_OK


def cmd_build_datastore(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = resolve_config(args, base=model.run_config)
    corpus = _load_training_corpus(args)
    ds = build_datastore(model, corpus)
    save_datastore(ds, args.output)
    write_meta(args.output, "build-datastore", cfg, checkpoint=str(args.checkpoint), entries=len(ds),
               checkpoint_hash=ds.checkpoint_hash)
    print(json.dumps({"entries": len(ds), "dim": ds.dim}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = resolve_config(args, base=model.run_config)
    corpus = load_conll(args.test, layer="gold", scheme=args.scheme)
    ds = load_datastore(args.datastore) if args.datastore else None
    res = evaluate(model, corpus, ds, cfg)
    payload = {**res.to_dict(), "knn": ds is not None, "config": cfg.to_mapping()}
    if args.output:
        _write_json(args.output, payload)
    print(json.dumps({"precision": res.precision, "recall": res.recall, "f1": res.f1}))
    return EXIT_OK


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = resolve_config(args, base=model.run_config)
    sentences = _read_text_sentences(args.input)
    ds = load_datastore(args.datastore) if args.datastore else None
    mu = cfg.mu if ds is not None else 0.0
    decoded = predict(model, sentences, ds, mu, cfg.k, cfg.max_span_len, cfg.knn_gate)
    with open(args.output, "w", encoding="utf-8") as f:
        for sent, spans in zip(sentences, decoded):
            ents = [{"start": s.start, "end": s.end, "label": s.label,
                     "text": " ".join(sent.tokens[s.start - 1:s.end])} for s in spans]
            f.write(json.dumps({"tokens": sent.tokens, "entities": ents}) + "\n")
    write_meta(args.output, "predict", cfg, checkpoint=str(args.checkpoint),
               datastore=str(args.datastore) if args.datastore else None, mu_applied=mu)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _config_parent() -> argparse.ArgumentParser:
    parent = _Parser(add_help=False)
    group = parent.add_argument_group("configuration")
    group.add_argument("--config", help="YAML config file with nested per-module sections")
    group.add_argument("--profile", choices=sorted(PROFILES), help="hyperparameter profile")
    for flag, (attr, typ) in HYPERPARAMETER_FLAGS.items():
        group.add_argument(flag, dest=attr, type=typ, default=None)
    parent.add_argument("--scheme", choices=("bio", "io"), default="bio", help="tagging scheme of CoNLL files")
    parent.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = _Parser(prog="dsner", description="Span-based NER from distant supervision.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("label", parents=[parent], help="annotate a corpus by gazetteer matching")
    p.add_argument("--input", required=True, help="CoNLL corpus; its tags are ignored")
    p.add_argument("--gazetteer", required=True, help="surface<TAB>type file")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_label)

    p = sub.add_parser("analyze-noise", parents=[parent], help="token-level distant-label noise rates")
    p.add_argument("--gold", required=True)
    p.add_argument("--distant", required=True)
    p.add_argument("--output")
    p.set_defaults(func=cmd_analyze_noise)

    p = sub.add_parser("inject-noise", parents=[parent], help="derive a noisy distant layer from gold")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--flip-rate", type=float, required=True)
    p.add_argument("--drop-rate", type=float, required=True)
    p.add_argument("--asymmetry", nargs="*", metavar="TYPE=MULT", help="per-type drop multipliers")
    p.add_argument("--noise-seed", type=int, help="defaults to --seed")
    p.set_defaults(func=cmd_inject_noise)

    p = sub.add_parser("make-synthetic", parents=[parent], help="generate a gold-annotated toy corpus")
    p.add_argument("--output", required=True)
    p.add_argument("--sentences", type=int, required=True)
    p.add_argument("--corpus-seed", type=int, help="defaults to --seed")
    p.add_argument("--lexicon-seed", type=int, default=0)
    p.add_argument("--gazetteer", help="also write a gazetteer for the lexicon here")
    p.add_argument("--coverage", type=float, default=1.0, help="fraction of lexicon entries in the gazetteer")
    p.set_defaults(func=cmd_make_synthetic)

    p = sub.add_parser("train", parents=[parent], help="train on a distant-labelled corpus")
    p.add_argument("--train", required=True, help="CoNLL file whose tags are the distant labels")
    p.add_argument("--train-gold", help="optional gold CoNLL of the same text")
    p.add_argument("--dev", help="gold CoNLL for model selection")
    p.add_argument("--output-dir", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("build-datastore", parents=[parent], help="cache entity representations for KNN")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--train-gold", help=argparse.SUPPRESS)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_build_datastore)

    p = sub.add_parser("eval", parents=[parent], help="entity-level P/R/F1 against gold")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--datastore")
    p.add_argument("--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[parent], help="decode raw text, one sentence per line")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--datastore")
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def _fail(code: int, kind: str, exc) -> int:
    print(json.dumps({"error": kind, "message": str(exc), "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (OSError, ConllParseError) as exc:
        return _fail(EXIT_IO, "io", exc)
    except (DsnerError, ValueError) as exc:
        return _fail(EXIT_MODULE, type(exc).__name__, exc)


if __name__ == "__main__":
    sys.exit(main())
