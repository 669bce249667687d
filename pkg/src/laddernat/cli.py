"""Command-line pipeline: gen-data, train-at, kd, train, translate, eval, analyze, bench, repro."""

from __future__ import annotations

import argparse
import configparser
import glob
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np
from threadpoolctl import threadpool_limits

from . import analysis, data, inference
from .blocks import BlockConfig
from .models import (LatentConfig, ModelBundle, canonical_kind, config_hash, load_checkpoint,
                     param_count)
from .training import TrainConfig, train

log = logging.getLogger("laddernat")


class ConfigError(Exception):
    pass


class RunError(Exception):
    pass


# -- configuration ---------------------------------------------------------------------

EXTRA_KEYS = {
    "corpus": {"valid": 500, "test": 500},
    "model": {"t_z": 8, "d_z": 8},
    "eval": {"refinements": 3, "sentences": 0},
    "analysis": {"k": 16, "trials": 100, "words_changed": "1,2,3", "sentences": 200,
                 "purity_k": 5},
    "bench": {"lengths": "8,16,32", "sentences": 8, "runs": 3, "refinements": 3},
}


def _defaults():
    out = {
        "corpus": {f.name: f.default for f in fields(data.CorpusSpec)},
        "model": {f.name: f.default for f in fields(BlockConfig)},
        "train": {f.name: f.default for f in fields(TrainConfig)},
    }
    for sec, extra in EXTRA_KEYS.items():
        out.setdefault(sec, {}).update(extra)
    return out


def _coerce(section, key, raw, default):
    if isinstance(raw, str) and not isinstance(default, str):
        try:
            if isinstance(default, bool):
                if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                return raw.lower() in ("true", "1", "yes")
            if isinstance(default, int):
                return int(raw)
            return float(raw)
        except ValueError:
            raise ConfigError(f"{section}.{key}: cannot parse {raw!r}") from None
    return raw


def load_config(path=None, overrides=()):
    """Merge defaults, an optional sectioned key=value file, and ``section.key=value`` overrides."""
    cfg = _defaults()
    items = []
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path!r} not found")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for sec in parser.sections():
            items += [(sec, k, v) for k, v in parser.items(sec)]
    for ov in overrides:
        if "=" not in ov or "." not in ov.split("=", 1)[0]:
            raise ConfigError(f"override {ov!r} must look like section.key=value")
        k, v = ov.split("=", 1)
        sec, key = k.split(".", 1)
        items.append((sec, key, v))
    for sec, key, v in items:
        if sec not in cfg:
            raise ConfigError(f"unknown config section {sec!r}")
        if key not in cfg[sec]:
            raise ConfigError(f"unknown config key {sec}.{key}")
        cfg[sec][key] = _coerce(sec, key, v, cfg[sec][key])
    return cfg


def _build(cls, section, values, **extra):
    names = {f.name for f in fields(cls)}
    kw = {k: v for k, v in values.items() if k in names}
    kw.update(extra)
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def corpus_spec(cfg, seed):
    return _build(data.CorpusSpec, "corpus", cfg["corpus"], seed=seed)


def block_config(cfg):
    return _build(BlockConfig, "model", cfg["model"])


def latent_config(cfg, rho):
    try:
        return LatentConfig(t_z=cfg["model"]["t_z"], d_z=cfg["model"]["d_z"], rho=rho)
    except ValueError as exc:
        raise ConfigError(f"model: {exc}") from None


def train_config(cfg, seed, **extra):
    return _build(TrainConfig, "train", cfg["train"], seed=seed, **extra)


def _int_list(text, key):
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{key}: expected comma-separated integers, got {text!r}") from None


def header_line(cfg, seed, **extra):
    parts = [f"config_hash={config_hash(cfg)}", f"seed={seed}"]
    parts += [f"{k}={v}" for k, v in extra.items()]
    return " ".join(parts)


# -- data helpers ----------------------------------------------------------------------

def _corpus_file(data_dir, name):
    path = os.path.join(data_dir, f"{name}.tsv")
    if not os.path.exists(path):
        raise RunError(f"missing corpus file {path}")
    return path


def _load_split(data_dir, name):
    return data.read_corpus(_corpus_file(data_dir, name))


def _lexicon(data_dir):
    path = os.path.join(data_dir, "train.tsv.manifest.json")
    if not os.path.exists(path):
        return None
    return data.build_lexicon(data.read_spec(path))


def references(pairs, lexicon):
    """(forward refs, reverse refs); with a lexicon every register's rendering counts."""
    if lexicon is None:
        return [[p.target] for p in pairs], [[p.source] for p in pairs]
    return [lexicon.references(p.source) for p in pairs], [lexicon.sources(p.target) for p in pairs]


def _find_checkpoint(path_or_dir, kind=None):
    if os.path.isfile(path_or_dir):
        return path_or_dir
    found = sorted(glob.glob(os.path.join(path_or_dir, "**", "*.ckpt"), recursive=True))
    if kind:
        found = [f for f in found if os.path.basename(os.path.dirname(f)) == canonical_kind(kind)]
    if not found:
        raise RunError(f"no checkpoint for {kind or 'any model'} under {path_or_dir}")
    if len(found) > 1:
        raise RunError(f"several checkpoints under {path_or_dir}: {found}; pass one explicitly")
    return found[0]


def _load(path):
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise RunError(f"missing checkpoint: {exc}") from None


# -- commands --------------------------------------------------------------------------

def cmd_gen_data(args, cfg):
    spec = corpus_spec(cfg, args.seed)
    pairs = data.gen_corpus(spec)
    tr, va, te = data.split(pairs, cfg["corpus"]["valid"], cfg["corpus"]["test"], seed=args.seed)
    if not tr:
        raise ConfigError("corpus.pairs leaves no training data after the valid/test split")
    os.makedirs(args.out, exist_ok=True)
    head = header_line(cfg["corpus"], args.seed)
    for name, part in (("train", tr), ("valid", va), ("test", te)):
        data.write_corpus(os.path.join(args.out, f"{name}.tsv"), part, spec, head)
    log.info("wrote %d/%d/%d pairs to %s", len(tr), len(va), len(te), args.out)


def _train_model(args, cfg, kind, train_pairs, valid_pairs, refs, rho=1.0, beta=None, tag=None):
    block = block_config(cfg)
    latent = None if kind == "AT" else latent_config(cfg, rho)
    extra = {"rho": rho}
    if beta is not None:
        extra["beta"] = beta
    tcfg = train_config(cfg, args.seed, **extra)
    bundle = ModelBundle(kind, block, latent, cfg["corpus"]["src_vocab"], cfg["corpus"]["tgt_vocab"],
                         seed=args.seed)
    full = {"model": bundle.manifest(), "train": tcfg.to_dict()}
    run_id = tag or f"seed{args.seed}"
    head = header_line(full, args.seed, model=kind)
    os.makedirs(os.path.join(args.out, run_id), exist_ok=True)
    metrics = os.path.join(args.out, run_id, f"{canonical_kind(kind)}.metrics.csv")
    try:
        res = train(bundle, train_pairs, valid_pairs, tcfg, metrics, (args.out, run_id), refs, head)
    except FloatingPointError as exc:
        raise RunError(f"training diverged: {exc}") from None
    log.info("%s best valid BLEU %.4f at step %d", kind, res.best_score, res.best_step)
    return res, metrics


def cmd_train_at(args, cfg):
    tr, va = _load_split(args.data, "train"), _load_split(args.data, "valid")
    lex = _lexicon(args.data)
    fwd_refs, rev_refs = references(va, lex)
    if args.direction == "rev":
        tr = [data.ParallelPair(p.target, p.source, p.register) for p in tr]
        va = [data.ParallelPair(p.target, p.source, p.register) for p in va]
        fwd_refs = rev_refs
        cfg["corpus"]["src_vocab"], cfg["corpus"]["tgt_vocab"] = cfg["corpus"]["tgt_vocab"], cfg["corpus"]["src_vocab"]
    _train_model(args, cfg, "AT", tr, va, (fwd_refs, None), tag=f"at-{args.direction}")


def cmd_kd(args, cfg):
    tr = _load_split(args.data, "train")
    at_f = _load(_find_checkpoint(args.at_fwd, "AT"))
    at_r = _load(_find_checkpoint(args.at_rev, "AT"))
    s2t, t2s = data.kd_regenerate(tr, at_f, at_r)
    os.makedirs(args.out, exist_ok=True)
    head = header_line({"at_fwd": at_f.config_hash(), "at_rev": at_r.config_hash()}, args.seed)
    for name, part in (("kd_s2t", s2t), ("kd_t2s", t2s), ("kd_train", s2t + t2s)):
        data.write_corpus(os.path.join(args.out, f"{name}.tsv"), part, None, head)
    for name in ("valid", "test"):
        data.write_corpus(os.path.join(args.out, f"{name}.tsv"), _load_split(args.data, name), None, head)
    man = os.path.join(args.data, "train.tsv.manifest.json")
    if os.path.exists(man):
        with open(man) as src, open(os.path.join(args.out, "train.tsv.manifest.json"), "w") as dst:
            dst.write(src.read())
    log.info("kd corpora written to %s", args.out)


def cmd_train(args, cfg):
    kind = canonical_kind(args.model)
    if kind == "AT":
        raise ConfigError("model: use train-at for the autoregressive model")
    train_file = args.train_file or ("kd_train" if os.path.exists(os.path.join(args.data, "kd_train.tsv")) else "train")
    tr = _load_split(args.data, train_file)
    va = _load_split(args.data, "valid")
    refs = references(va, _lexicon(args.data))
    rho = cfg["train"]["rho"] if args.rho is None else args.rho
    beta = cfg["train"]["beta"] if args.beta is None else args.beta
    _train_model(args, cfg, kind, tr, va, refs, rho=rho, beta=beta, tag=args.run_id)


def cmd_translate(args, cfg):
    bundle = _load(_find_checkpoint(args.checkpoint))
    with open(args.input) as fh:
        sents = [np.array(line.split(), dtype=int) for line in fh if line.strip() and not line.startswith("#")]
    if not sents:
        raise RunError(f"no sentences in {args.input}")
    if bundle.kind == "AT":
        outs = inference.translate_at_batch(sents, bundle)
    else:
        refinements = cfg["eval"]["refinements"] if args.refinements is None else args.refinements
        outs = inference.translate_nat_batch(sents, bundle, args.direction, refinements)
    inference.write_translations(args.out, outs, header_line(bundle.manifest(), args.seed))


def evaluate(bundle, pairs, refs, refinements):
    fwd_refs, rev_refs = refs
    if bundle.kind == "AT":
        hyp = [h[h != data.EOS] for h in inference.translate_at_batch([p.source for p in pairs], bundle)]
        return {"bleu_fwd": inference.bleu(hyp, fwd_refs)}
    fwd = inference.translate_nat_batch([p.source for p in pairs], bundle, "fwd", refinements)
    rev = inference.translate_nat_batch([p.target for p in pairs], bundle, "rev", refinements)
    return {"bleu_fwd": inference.bleu(fwd, fwd_refs), "bleu_rev": inference.bleu(rev, rev_refs)}


def cmd_eval(args, cfg):
    pairs = _load_split(args.data, args.split)
    n = cfg["eval"]["sentences"]
    pairs = pairs[:n] if n else pairs
    refs = references(pairs, _lexicon(args.data))
    refinements = cfg["eval"]["refinements"] if args.refinements is None else args.refinements
    rows = []
    for name in _model_list(args):
        bundle = _load(_find_checkpoint(args.checkpoint or args.runs, name))
        for metric, v in evaluate(bundle, pairs, refs, refinements).items():
            rows.append({"metric": f"{metric}_{args.split}", "model": bundle.kind, "value": v,
                         "seed": args.seed, "config_hash": bundle.config_hash()})
    analysis.write_report(args.out, rows, header_line(cfg["eval"], args.seed, split=args.split))


def _model_list(args):
    if getattr(args, "checkpoint", None):
        return [None]
    names = [m.strip() for m in (args.models or "").split(",") if m.strip()]
    if not names:
        raise ConfigError("models: name at least one model")
    try:
        return [canonical_kind(m) for m in names]
    except ValueError as exc:
        raise ConfigError(f"models: {exc}") from None


METRICS = ("cca", "relative-sensitivity", "purity", "pca", "params", "all")


def cmd_analyze(args, cfg):
    a = cfg["analysis"]
    pairs = _load_split(args.data, args.split)[:a["sentences"] or None]
    valid = _load_split(args.data, "valid")[:a["sentences"] or None]
    metrics = METRICS[:-1] if args.metric == "all" else (args.metric,)
    rows = []
    os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
    for kind in _model_list(args):
        bundle = _load(_find_checkpoint(args.runs, kind))
        tag = {"model": bundle.kind, "seed": args.seed, "config_hash": bundle.config_hash()}
        if "params" in metrics:
            for comp, n in param_count(bundle).items():
                rows.append({"metric": f"params.{comp}", "value": n, **tag})
        if bundle.kind == "AT":
            continue
        if "cca" in metrics or "purity" in metrics or "pca" in metrics:
            zs = analysis.collect_latents(bundle, pairs, "source")
            zt = analysis.collect_latents(bundle, pairs, "target")
        if "cca" in metrics:
            model = analysis.cca_fit(analysis.collect_latents(bundle, valid, "source"),
                                     analysis.collect_latents(bundle, valid, "target"), k=a["k"])
            rows.append({"metric": "cca_score", "value": analysis.cca_score(model, zs, zt), **tag})
        if "purity" in metrics:
            rows.append({"metric": "language_purity",
                         "value": analysis.language_purity(zs, zt, a["purity_k"]), **tag})
        if "pca" in metrics:
            base = os.path.splitext(args.out)[0]
            analysis.export_latents(f"{base}.{bundle.kind}.latents.csv", zs, zt, header_line(tag, args.seed))
            proj = analysis.pca_project(zs, zt)
            with open(f"{base}.{bundle.kind}.pca.csv", "w") as fh:
                fh.write(f"# {header_line(tag, args.seed)}\nlanguage,pc1,pc2\n")
                for lang, (c1, c2) in zip(proj.languages, proj.coords):
                    fh.write(f"{lang},{c1!r},{c2!r}\n")
        if "relative-sensitivity" in metrics:
            for w in _int_list(a["words_changed"], "analysis.words_changed"):
                usable = [p for p in pairs if min(len(p.source), len(p.target)) > w]
                r = analysis.relative_sensitivity(bundle, usable, w, a["trials"], seed=args.seed)
                rows.append({"metric": f"relative_sensitivity.w{w}", "value": r, **tag})
    analysis.write_report(args.out, rows, header_line(a, args.seed, split=args.split))


def cmd_bench(args, cfg):
    b = cfg["bench"]
    nat = _load(_find_checkpoint(args.nat))
    at = _load(_find_checkpoint(args.at))
    if nat.src_vocab != at.src_vocab:
        raise ConfigError("bench: NAT and AT models use different source vocabularies")
    rng = np.random.default_rng([args.seed, 21])
    rows = []
    for length in _int_list(b["lengths"], "bench.lengths"):
        sents = [rng.integers(data.RESERVED, nat.src_vocab, size=length) for _ in range(b["sentences"])]
        res = inference.speed_bench(nat, at, sents, b["refinements"], runs=b["runs"])
        rows.append({"model": nat.kind, "length_bucket": length, "sentences": len(sents),
                     "seconds": repr(round(res["nat_seconds"], 6)), "ratio": repr(round(res["ratio"], 4))})
        rows.append({"model": at.kind, "length_bucket": length, "sentences": len(sents),
                     "seconds": repr(round(res["at_seconds"], 6)), "ratio": "1.0"})
    inference.write_bench(args.out, rows, header_line(b, args.seed))


def cmd_repro(args, cfg):
    """gen-data, two AT models, KD, both latent models, evaluation and analysis under one seed."""
    out = args.out
    common = dict(config=None, seed=args.seed, overrides=[])

    def ns(**kw):
        return argparse.Namespace(**{**common, **kw})

    data_dir, kd_dir = os.path.join(out, "data"), os.path.join(out, "kd")
    runs = os.path.join(out, "runs")
    cmd_gen_data(ns(out=data_dir), cfg)
    for d in ("fwd", "rev"):
        cmd_train_at(ns(data=data_dir, direction=d, out=os.path.join(out, "at")), load_config(args.config, args.set))
    cmd_kd(ns(data=data_dir, at_fwd=os.path.join(out, "at", "at-fwd"), at_rev=os.path.join(out, "at", "at-rev"),
              out=kd_dir), cfg)
    for kind in ("LaNMT", "LadderNMT"):
        cmd_train(ns(model=kind, data=kd_dir, out=runs, rho=None, beta=None, train_file=None,
                     run_id=f"seed{args.seed}"), cfg)
    cmd_eval(ns(data=data_dir, split="test", runs=runs, checkpoint=None, models="lanmt,laddernmt",
                refinements=None, out=os.path.join(out, "eval.csv")), cfg)
    cmd_analyze(ns(data=data_dir, split="test", runs=runs, models="lanmt,laddernmt", metric="all",
                   out=os.path.join(out, "analysis.csv")), cfg)


COMMANDS = {
    "gen-data": cmd_gen_data, "train-at": cmd_train_at, "kd": cmd_kd, "train": cmd_train,
    "translate": cmd_translate, "eval": cmd_eval, "analyze": cmd_analyze, "bench": cmd_bench,
    "repro": cmd_repro,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser():
    p = _Parser(prog="laddernat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, **kw):
        sp = sub.add_parser(name, **kw)
        sp.add_argument("--config", "--spec", dest="config", help="sectioned key=value file")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    sp = add("gen-data")
    sp.add_argument("--out", default="data")

    sp = add("train-at")
    sp.add_argument("--data", required=True)
    sp.add_argument("--direction", choices=("fwd", "rev"), default="fwd")
    sp.add_argument("--out", default="runs")

    sp = add("kd")
    sp.add_argument("--data", required=True)
    sp.add_argument("--at-fwd", required=True)
    sp.add_argument("--at-rev", required=True)
    sp.add_argument("--out", default="kd")

    sp = add("train")
    sp.add_argument("--model", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--train-file", help="corpus name inside --data (default kd_train if present, else train)")
    sp.add_argument("--rho", type=float)
    sp.add_argument("--beta", type=float)
    sp.add_argument("--run-id")
    sp.add_argument("--out", default="runs")

    sp = add("translate")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--direction", choices=("fwd", "rev"), default="fwd")
    sp.add_argument("--refinements", type=int)
    sp.add_argument("--out", required=True)

    sp = add("eval")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--checkpoint")
    sp.add_argument("--runs", default="runs")
    sp.add_argument("--models")
    sp.add_argument("--refinements", type=int)
    sp.add_argument("--out", default="eval.csv")

    sp = add("analyze")
    sp.add_argument("--metric", choices=METRICS, default="all")
    sp.add_argument("--models", default="lanmt,laddernmt")
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--runs", default="runs")
    sp.add_argument("--out", default="analysis.csv")

    sp = add("bench")
    sp.add_argument("--nat", required=True)
    sp.add_argument("--at", required=True)
    sp.add_argument("--out", default="bench.csv")

    sp = add("repro")
    sp.add_argument("--out", default="repro")
    return p


def dispatch(argv=None):
    """Run one pipeline stage; returns 0 on success, 1 on configuration errors, 2 on runtime failures."""
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, args.set)
        threads = int(os.environ.get("LADDERNAT_THREADS", "1"))
        if threads < 1:
            raise ConfigError("LADDERNAT_THREADS must be >= 1")
        with threadpool_limits(threads):
            COMMANDS[args.command](args, cfg)
        return 0
    except ConfigError as exc:
        print(f"laddernat: config error: {exc}", file=sys.stderr)
        return 1
    except (RunError, FloatingPointError, FileNotFoundError, OSError, json.JSONDecodeError) as exc:
        print(f"laddernat: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"laddernat: error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
