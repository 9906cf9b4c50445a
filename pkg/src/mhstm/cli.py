"""Command-line interface: generate, train, evaluate, rank, export-tree,
likelihood, profile.

Settings come from built-in defaults, then an optional ``--config`` file
(JSON or YAML, flat mapping of option names), then command-line flags.
Log verbosity is read from ``MHSTM_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import rng as rngmod
from .corpus import Corpus, PreprocessOptions, load_corpus
from .errors import ConfigError, DataError, MHSTMError
from .evaluation import (
    coherence,
    hierarchical_affinity,
    held_out_estimate,
    multi_aspect_report,
    rank_brands,
    reports_to_csv,
)
from .inference import FitConfig, Model, estep_runtime_profile, run_stochastic_em
from .synthetic import GroundTruth, HierarchySpec, generate_corpus, generate_grid_corpus

logger = logging.getLogger("mhstm")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _epsilon(text: str):
    if text.lower() in ("none", "off", "null"):
        return None
    return float(text)


FIT_OPTIONS = {
    "depth": int, "gamma": float, "alpha": float, "eta": float, "rho2": float,
    "iters": int, "burnin": int, "epsilon": _epsilon, "average_last": int, "audit_every": int,
}

DEFAULTS = {
    "generate": {"scenario": "hierarchy", "hierarchy": "3(3,2,4)", "eta": 0.1, "alpha": 1.0, "n_terms": 100,
                 "brands": 10, "docs": 200, "sentences": 5, "length": 10.0, "rho": 1.0, "path_mode": "fixed",
                 "gamma": 1.0, "depth": 3, "seed": 0, "out": "."},
    "train": {"corpus": None, "seed": 0, "out": "model.json", "min_df": 5, **{
        "depth": 3, "gamma": 0.01, "alpha": 1.0, "eta": 0.1, "rho2": 0.5, "iters": 500, "burnin": 50,
        "epsilon": 1e-4, "average_last": 0, "audit_every": 0}},
    "evaluate": {"model": None, "corpus": None, "truth": None, "heldout": None, "particles": 2000, "top_n": 5,
                 "seed": 0, "out": None, "format": "json"},
    "rank": {"model": None, "topic": None, "out": None, "format": "json"},
    "export-tree": {"model": None, "top": 10, "out": None, "format": "dot"},
    "likelihood": {"model": None, "corpus": None, "particles": 2000, "seed": 0, "out": None, "format": "json"},
    "profile": {"corpus": None, "depths": "2,3,4", "iters": 5, "warmup": 2, "seed": 0, "out": None,
                "format": "json", **{"gamma": 0.01, "alpha": 1.0, "eta": 0.1, "rho2": 0.5}},
}

FORMATS = {"evaluate": ("json", "csv"), "rank": ("json", "csv"), "export-tree": ("dot", "json"),
           "likelihood": ("json",), "profile": ("json", "csv")}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mhstm", description="Hierarchical sentiment-topic model for multi-brand reviews.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    S = argparse.SUPPRESS

    def common(sp, seed=True):
        sp.add_argument("--config", default=S, help="JSON or YAML file of option values")
        sp.add_argument("--out", default=S, help="output path (stdout when omitted, where allowed)")
        if seed:
            sp.add_argument("--seed", type=int, default=S)

    def fit_flags(sp):
        sp.add_argument("--depth", type=int, default=S)
        sp.add_argument("--gamma", type=float, default=S)
        sp.add_argument("--alpha", type=float, default=S)
        sp.add_argument("--eta", type=float, default=S)
        sp.add_argument("--rho2", type=float, default=S)

    g = sub.add_parser("generate", help="draw a synthetic corpus and its ground truth")
    common(g)
    g.add_argument("--scenario", choices=("hierarchy", "grid"), default=S)
    g.add_argument("--hierarchy", default=S, help='truth tree, e.g. "3(3,2,4)"')
    g.add_argument("--eta", type=float, default=S)
    g.add_argument("--alpha", type=float, default=S)
    g.add_argument("--n-terms", dest="n_terms", type=int, default=S)
    g.add_argument("--brands", type=int, default=S)
    g.add_argument("--docs", type=int, default=S, help="reviews per brand")
    g.add_argument("--sentences", type=int, default=S, help="sentences per review")
    g.add_argument("--length", type=float, default=S, help="mean sentence length")
    g.add_argument("--rho", type=float, default=S, help="response noise standard deviation")
    g.add_argument("--path-mode", dest="path_mode", choices=("fixed", "ncrp"), default=S)
    g.add_argument("--gamma", type=float, default=S)
    g.add_argument("--depth", type=int, default=S)

    t = sub.add_parser("train", help="fit the model to a corpus")
    common(t)
    t.add_argument("--corpus", default=S)
    t.add_argument("--min-df", dest="min_df", type=int, default=S)
    fit_flags(t)
    t.add_argument("--iters", type=int, default=S)
    t.add_argument("--burnin", type=int, default=S)
    t.add_argument("--epsilon", type=_epsilon, default=S, help="per-token gain threshold, or 'none'")
    t.add_argument("--average-last", dest="average_last", type=int, default=S)
    t.add_argument("--audit-every", dest="audit_every", type=int, default=S)

    e = sub.add_parser("evaluate", help="score a fitted model")
    common(e)
    e.add_argument("--model", default=S)
    e.add_argument("--corpus", default=S)
    e.add_argument("--truth", default=S)
    e.add_argument("--heldout", default=S)
    e.add_argument("--particles", type=int, default=S)
    e.add_argument("--top-n", dest="top_n", type=int, default=S)
    e.add_argument("--format", choices=FORMATS["evaluate"], default=S)

    r = sub.add_parser("rank", help="rank brands at leaf topics")
    common(r, seed=False)
    r.add_argument("--model", default=S)
    r.add_argument("--topic", type=int, default=S, help="leaf node id (all leaves when omitted)")
    r.add_argument("--format", choices=FORMATS["rank"], default=S)

    x = sub.add_parser("export-tree", help="write the topic tree as DOT or JSON")
    common(x, seed=False)
    x.add_argument("--model", default=S)
    x.add_argument("--top", type=int, default=S, help="terms shown per node")
    x.add_argument("--format", choices=FORMATS["export-tree"], default=S)

    h = sub.add_parser("likelihood", help="held-out log-likelihood per word")
    common(h)
    h.add_argument("--model", default=S)
    h.add_argument("--corpus", default=S)
    h.add_argument("--particles", type=int, default=S)
    h.add_argument("--format", choices=FORMATS["likelihood"], default=S)

    f = sub.add_parser("profile", help="time the sampling sweeps at several depths")
    common(f)
    f.add_argument("--corpus", default=S)
    f.add_argument("--depths", default=S, help="comma-separated depths")
    f.add_argument("--iters", type=int, default=S)
    f.add_argument("--warmup", type=int, default=S)
    fit_flags(f)
    f.add_argument("--format", choices=FORMATS["profile"], default=S)
    return p


def load_config_file(path: str) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid JSON/YAML: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping of option names")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def resolve_settings(command: str, flags: dict) -> dict:
    """Defaults, then config-file values, then explicit flags."""
    settings = dict(DEFAULTS[command])
    allowed = set(settings)
    if "config" in flags:
        values = load_config_file(flags.pop("config"))
        unknown = sorted(set(values) - allowed)
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for k, v in values.items():
            if k in FIT_OPTIONS and v is not None:
                v = FIT_OPTIONS[k](str(v)) if k == "epsilon" else FIT_OPTIONS[k](v)
            settings[k] = v
    settings.update(flags)
    if "format" in settings and settings["format"] not in FORMATS[command]:
        raise ConfigError(f"format {settings['format']!r} not available for {command}")
    return settings


def _require(settings: dict, *keys):
    for k in keys:
        if not settings.get(k):
            raise ConfigError(f"--{k.replace('_', '-')} is required")


def _read_json(path, what):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise DataError(f"{what} file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} file {path} is not valid JSON: {exc}") from exc


def _load_model(path) -> Model:
    return Model.from_dict(_read_json(path, "model"))


def _load_corpus(path, min_df: int = 5) -> Corpus:
    if not Path(path).exists():
        raise DataError(f"corpus file not found: {path}")
    return load_corpus(path, PreprocessOptions(min_df=min_df))


def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True, allow_nan=True) + "\n"


def _emit(text: str, out) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(s: dict) -> int:
    rng = rngmod.stream(s["seed"], "generate")
    common = dict(n_brands=s["brands"], docs_per_brand=s["docs"], sentences_per_doc=s["sentences"],
                  mean_sentence_length=s["length"], rho=s["rho"], alpha=s["alpha"])
    if s["scenario"] == "grid":
        corpus, truth = generate_grid_corpus(rng, eta=s["eta"], **common)
    else:
        spec = HierarchySpec(hierarchy=s["hierarchy"], n_terms=s["n_terms"], eta=s["eta"], path_mode=s["path_mode"],
                             gamma=s["gamma"], depth=s["depth"], **common)
        try:
            corpus, truth = generate_corpus(spec, rng)
        except ValueError as exc:
            if isinstance(exc, MHSTMError):
                raise
            raise ConfigError(str(exc)) from exc
    out = Path(s["out"])
    out.mkdir(parents=True, exist_ok=True)
    corpus.save(out / "corpus.json")
    (out / "truth.json").write_text(json.dumps(truth.to_dict(), separators=(",", ":")))
    ca = corpus.arrays
    print(f"brands={corpus.n_brands} reviews_per_brand={int(corpus.reviews_per_brand.max())} "
          f"reviews={len(corpus)} sentences={ca.n_sentences} tokens={ca.n_tokens} terms={corpus.n_terms} "
          f"truth_nodes={truth.tree.n_nodes} -> {out}")
    return 0


def fit_config(s: dict) -> FitConfig:
    if s["iters"] < 1:
        raise ConfigError("--iters must be at least 1")
    return FitConfig(depth=s["depth"], gamma=s["gamma"], alpha=s["alpha"], eta=s["eta"], rho2=s["rho2"],
                     max_iters=s["iters"], burnin=s["burnin"], epsilon=s["epsilon"], seed=s["seed"],
                     average_last=s["average_last"], audit_every=s["audit_every"]).validate()


def cmd_train(s: dict) -> int:
    _require(s, "corpus")
    config = fit_config(s)
    corpus = _load_corpus(s["corpus"], s["min_df"])

    def progress(st):
        logger.info("iter %d  log-likelihood %.3f  nodes %d  leaves %d", st.iteration, st.log_likelihood,
                    st.n_nodes, st.n_leaves)

    model = run_stochastic_em(corpus, config, progress)
    _emit(json.dumps(model.to_dict(), separators=(",", ":")), s["out"])
    logger.info("wrote model with %d nodes after %d iterations", len(model.tree), len(model.stats))
    return 0


def cmd_evaluate(s: dict) -> int:
    _require(s, "model", "corpus")
    model = _load_model(s["model"])
    corpus = _load_corpus(s["corpus"])
    heldout = _load_corpus(s["heldout"]) if s["heldout"] else corpus
    if s["truth"]:
        truth = GroundTruth.from_dict(_read_json(s["truth"], "truth"))
        report = multi_aspect_report(model, corpus, truth, top_n=s["top_n"], heldout=heldout,
                                     num_particles=s["particles"], seed=s["seed"])
        result = report.to_dict()
        result["metadata"]["held_out_corpus"] = "heldout" if s["heldout"] else "training"
        rows = report.csv_rows(corpus.metadata.get("scenario", ""), s["seed"])
    else:
        coh = float(np.mean([coherence(model, corpus, k, s["top_n"]).score for k in model.tree.nodes()]))
        try:
            aff = hierarchical_affinity(model)
        except DataError:
            aff = None
        held = held_out_estimate(model, heldout, s["particles"], s["seed"]).per_word
        summary = {"coherence": coh, "hierarchical_affinity": aff, "held_out_per_word": held}
        result = {"format": "mhstm-report", "summary": summary, "metadata": {"seed": s["seed"]}}
        rows = [("", s["seed"], m, v) for m, v in summary.items()]
    _emit(reports_to_csv(rows) if s["format"] == "csv" else _dumps(result), s["out"])
    return 0


def cmd_rank(s: dict) -> int:
    _require(s, "model")
    model = _load_model(s["model"])
    tree = model.tree
    if s["topic"] is not None:
        try:
            slots = [tree.slot_of(int(s["topic"]))]
        except KeyError as exc:
            raise DataError(f"unknown topic id {s['topic']}") from exc
        if not tree.is_leaf(slots[0]):
            raise DataError(f"topic {s['topic']} is not a leaf")
    else:
        slots = tree.leaves()
    rankings = [rank_brands(model, k) for k in slots]
    if s["format"] == "csv":
        lines = ["topic,rank,brand,score"]
        for k, rk in zip(slots, rankings):
            for i, (b, sc) in enumerate(zip(rk.brands, rk.scores), start=1):
                lines.append(f"{tree.uid(k)},{i},{model.brands[b]},{sc!r}")
        text = "\n".join(lines) + "\n"
    else:
        text = _dumps([
            {"topic": tree.uid(k), "ranking": [{"brand": model.brands[b], "score": sc} for b, sc in zip(rk.brands, rk.scores)]}
            for k, rk in zip(slots, rankings)
        ])
    _emit(text, s["out"])
    return 0


def tree_to_dot(model: Model, top: int = 10) -> str:
    """Graphviz rendering: each node lists its top terms with probabilities
    and the per-brand coefficients."""
    tree = model.tree
    lines = ["digraph topics {", '  node [shape=box, fontname="Helvetica", fontsize=10];']
    for k in tree.nodes():
        terms = "\\l".join(f"{model.terms[v]} {p:.3f}" for v, p in model.top_terms(k, top))
        betas = "\\l".join(f"{b}: {model.beta[i, k]:+.3f}" for i, b in enumerate(model.brands))
        label = f"topic {tree.uid(k)} (level {tree.level(k) + 1}, {int(tree.visits(k))} sentences)\\l{terms}\\l|{betas}\\l"
        lines.append(f'  n{tree.uid(k)} [shape=record, label="{{{_dot_escape(label)}}}"];')
    for k in tree.nodes():
        p = tree.parent(k)
        if p is not None:
            lines.append(f"  n{tree.uid(p)} -> n{tree.uid(k)};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def _dot_escape(text: str) -> str:
    return text.replace('"', '\\"').replace("{", "\\{").replace("}", "\\}").replace("<", "\\<").replace(">", "\\>")


def cmd_export_tree(s: dict) -> int:
    _require(s, "model")
    model = _load_model(s["model"])
    if s["format"] == "dot":
        text = tree_to_dot(model, s["top"])
    else:
        tree = model.tree
        text = _dumps([
            {"id": tree.uid(k), "parent": None if tree.parent(k) is None else tree.uid(tree.parent(k)),
             "level": tree.level(k) + 1, "sentences": int(tree.visits(k)),
             "top_terms": [[model.terms[v], p] for v, p in model.top_terms(k, s["top"])],
             "beta": {b: float(model.beta[i, k]) for i, b in enumerate(model.brands)}}
            for k in tree.nodes()
        ])
    _emit(text, s["out"])
    return 0


def cmd_likelihood(s: dict) -> int:
    _require(s, "model", "corpus")
    model = _load_model(s["model"])
    est = held_out_estimate(model, _load_corpus(s["corpus"]), s["particles"], s["seed"])
    _emit(_dumps({"per_word": est.per_word, "log_prob": est.log_prob, "tokens": est.n_tokens,
                  "dropped_tokens": est.n_dropped, "particles": est.num_particles}), s["out"])
    return 0


def cmd_profile(s: dict) -> int:
    if s["corpus"]:
        corpus = _load_corpus(s["corpus"])
    else:
        corpus, _ = generate_corpus(HierarchySpec(), rngmod.stream(s["seed"], "profile"))
    try:
        depths = [int(x) for x in str(s["depths"]).split(",") if x.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad --depths {s['depths']!r}") from exc
    config = FitConfig(gamma=s["gamma"], alpha=s["alpha"], eta=s["eta"], rho2=s["rho2"], seed=s["seed"]).validate()
    rows = estep_runtime_profile(corpus, config, depths, s["iters"], s["warmup"])
    if s["format"] == "csv":
        keys = list(rows[0])
        text = ",".join(keys) + "\n" + "".join(",".join(str(r[k]) for k in keys) + "\n" for r in rows)
    else:
        text = _dumps(rows)
    _emit(text, s["out"])
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "rank": cmd_rank,
    "export-tree": cmd_export_tree,
    "likelihood": cmd_likelihood,
    "profile": cmd_profile,
}


def main(argv=None) -> int:
    level = os.environ.get("MHSTM_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    try:
        settings = resolve_settings(command, args)
        return COMMANDS[command](settings)
    except MHSTMError as exc:
        print(f"mhstm: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"mhstm: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
