"""``xpr`` command line: gen | train | eval | analyze | selfcheck.

Exit codes: 0 success, 1 usage error, 2 runtime failure (including a failed
self-check suite).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Sequence

from .datagen import Corpus, Example, default_domain, generate, load_corpus, save_corpus, split
from .executor import dump_kb, load_kb
from .metrics import denotation_accuracy
from .model import ModelConfig, Parser, Vocab, load_checkpoint
from .objectives import OBJECTIVES
from .training import SUPERVISED_ONLY, TrainConfig, Trainer, run

log = logging.getLogger("xpr")

SELECTORS = OBJECTIVES + (SUPERVISED_ONLY,)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _header(args: argparse.Namespace, extra: Optional[dict] = None) -> str:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    if extra:
        cfg.update(extra)
    return "config: " + json.dumps(cfg, sort_keys=True, default=str)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labeled-frac", type=float, default=0.3)
    p.add_argument("--examples", type=int, default=1000, help="corpus size when generating")
    p.add_argument("--dev", type=int, default=100, help="held-out dev examples when generating")
    p.add_argument("--omit-prob", type=float, default=0.0,
                   help="chance an utterance drops one condition's mention")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="xpr", description="Semi-supervised semantic parsing from executability.")
    sub = ap.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen", help="generate a KB, corpus, hidden-gold sidecar and dev set")
    _common(g)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a parser and write metrics.csv and model.ckpt")
    _common(t)
    t.add_argument("--objective", choices=SELECTORS, default="topk")
    t.add_argument("--lambda", dest="lam", type=float, default=0.3)
    t.add_argument("--beam", type=int, default=16)
    t.add_argument("--warmup", type=int, default=1000)
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--threads", type=int, default=1)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--clip-norm", type=float, default=0.0)
    t.add_argument("--hidden", type=int, default=64)
    t.add_argument("--batch-labeled", type=int, default=8)
    t.add_argument("--batch-unlabeled", type=int, default=8)
    t.add_argument("--eval-every", type=int, default=100)
    t.add_argument("--kb", help="KB file (required with --corpus)")
    t.add_argument("--corpus", help="corpus file; its sidecar <corpus>.gold and <corpus>.dev are used if present")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="denotation accuracy of a trained run")
    e.add_argument("--out", required=True, help="run directory written by train")
    e.add_argument("--kb", help="KB file (default: the run's kb.txt)")
    e.add_argument("--corpus", help="evaluation corpus (default: the run's dev.tsv)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="plot avg-ratio and coverage series from metrics files")
    a.add_argument("metrics", nargs="+")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("selfcheck", help="run the oracle suites")
    s.add_argument("--suite", action="append", help="run only this suite (repeatable)")
    s.set_defaults(func=cmd_selfcheck)
    return ap


# -- gen ---------------------------------------------------------------------------


def _generate(args) -> tuple:
    spec = default_domain(n_examples=args.examples, n_dev=args.dev, seed=args.seed,
                          omit_prob=args.omit_prob)
    kb, examples, dev = generate(spec)
    corpus = split(examples, args.labeled_frac, args.seed)
    return kb, corpus, dev


def _write_dev(path, dev: Sequence[Example], header: str) -> None:
    save_corpus(Corpus(list(dev), [], {}), path, os.devnull, [header])


def cmd_gen(args) -> int:
    kb, corpus, dev = _generate(args)
    os.makedirs(args.out, exist_ok=True)
    head = _header(args)
    dump_kb(kb, os.path.join(args.out, "kb.txt"), [head])
    path = os.path.join(args.out, "corpus.tsv")
    save_corpus(corpus, path, path + ".gold", [head])
    _write_dev(path + ".dev", dev, head)
    print(f"wrote {corpus.N} labeled, {corpus.M} unlabeled, {len(dev)} dev examples to {args.out}")
    return 0


# -- train / eval ------------------------------------------------------------------


def _load_inputs(args):
    if args.corpus:
        if not args.kb:
            raise UsageError("xpr train: --corpus needs --kb")
        kb = load_kb(args.kb)
        side = args.corpus + ".gold"
        corpus = load_corpus(args.corpus, side if os.path.exists(side) else None)
        dev_path = args.corpus + ".dev"
        dev = load_corpus(dev_path).labeled if os.path.exists(dev_path) else []
        return kb, corpus, dev
    if args.kb:
        raise UsageError("xpr train: --kb needs --corpus")
    return _generate(args)


def cmd_train(args) -> int:
    try:
        cfg = TrainConfig(
            objective=args.objective, lam=args.lam, warmup_steps=args.warmup,
            batch_labeled=args.batch_labeled, batch_unlabeled=args.batch_unlabeled,
            lr=args.lr, max_steps=args.steps, seed=args.seed, beam=args.beam,
            hidden=args.hidden, eval_every=args.eval_every, threads=args.threads,
            clip_norm=args.clip_norm,
        )
    except ValueError as err:
        raise UsageError(f"xpr train: {err}")
    kb, corpus, dev = _load_inputs(args)
    trainer = Trainer(corpus, kb, cfg, dev)
    result = run(corpus, kb, cfg, dev, out_dir=args.out, trainer=trainer)
    head = _header(args, {"train_config": json.loads(cfg.to_json())})
    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as f:
        f.write(f"# {head}\n{result.metrics_csv}")
    dump_kb(kb, os.path.join(args.out, "kb.txt"), [head])
    _write_dev(os.path.join(args.out, "dev.tsv"), dev, head)
    mc = trainer.model_cfg
    meta = {
        "header": head,
        "model": {"vocab_size": mc.vocab_size, "num_actions": mc.num_actions,
                  "hidden": mc.hidden, "embed": mc.embed, "init_scale": mc.init_scale},
        "vocab": trainer.vocab.itos,
    }
    with open(os.path.join(args.out, "model.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=1, sort_keys=True)
    acc = result.final_dev_accuracy
    print(f"trained {cfg.max_steps} steps ({cfg.objective}); final dev accuracy: "
          + ("n/a" if acc is None else f"{acc:.4f}"))
    return 0


def cmd_eval(args) -> int:
    with open(os.path.join(args.out, "model.json"), encoding="utf-8") as f:
        meta = json.load(f)
    mc = ModelConfig(**meta["model"])
    vocab = Vocab(meta["vocab"][1:])
    theta = load_checkpoint(os.path.join(args.out, "model.ckpt"), mc)
    kb = load_kb(args.kb or os.path.join(args.out, "kb.txt"))
    path = args.corpus or os.path.join(args.out, "dev.tsv")
    side = path + ".gold"
    corpus = load_corpus(path, side if os.path.exists(side) else None)
    examples = corpus.labeled + [
        Example(e.id, e.tokens, corpus.hidden_gold[e.id])
        for e in corpus.unlabeled if e.id in corpus.hidden_gold
    ]
    if not examples:
        raise UsageError("xpr eval: no gold-annotated examples to evaluate")
    acc = denotation_accuracy(Parser(mc, kb.grammar()), theta, examples, vocab, kb)
    with open(os.path.join(args.out, "eval.csv"), "w", encoding="utf-8") as f:
        f.write(f"# {_header(args)}\n")
        f.write("examples,dev_denotation_acc\n")
        f.write(f"{len(examples)},{acc:.10g}\n")
    print(f"denotation accuracy {acc:.4f} on {len(examples)} examples")
    return 0


# -- analyze -----------------------------------------------------------------------


def read_metrics(path) -> Dict[str, List]:
    with open(path, encoding="utf-8") as f:
        rows = [line for line in f if not line.startswith("#")]
    series: Dict[str, List] = {"objective": None, "step": [], "avg_ratio": [], "coverage": []}
    for row in csv.DictReader(rows):
        series["objective"] = row["objective"]
        if row["avg_ratio"] == "" and row["coverage"] == "":
            continue
        series["step"].append(int(row["step"]))
        series["avg_ratio"].append(float(row["avg_ratio"]) if row["avg_ratio"] else float("nan"))
        series["coverage"].append(float(row["coverage"]) if row["coverage"] else float("nan"))
    return series


def cmd_analyze(args) -> int:
    import matplotlib

    matplotlib.use("svg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "xpr"
    runs = []
    for path in args.metrics:
        s = read_metrics(path)
        label = s["objective"] or os.path.basename(os.path.dirname(os.path.abspath(path)))
        if any(label == r[0] for r in runs):
            label = f"{label} ({path})"
        runs.append((label, s))
    os.makedirs(args.out, exist_ok=True)
    head = _header(args)
    for key, title in (("avg_ratio", "Average ratio"), ("coverage", "Coverage of gold programs")):
        fig, ax = plt.subplots(figsize=(6, 4))
        for label, s in runs:
            ax.plot(s["step"], s[key], label=label, linewidth=1.2)
        ax.set_xlabel("step")
        ax.set_ylabel(key)
        ax.set_title(title)
        if runs:
            ax.legend(fontsize=8)
        fig.tight_layout()
        fig.savefig(os.path.join(args.out, f"{key}.svg"), format="svg",
                    metadata={"Date": None, "Description": head})
        plt.close(fig)
    with open(os.path.join(args.out, "summary.csv"), "w", encoding="utf-8") as f:
        f.write(f"# {head}\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["run", "final_step", "final_avg_ratio", "final_coverage"])
        for label, s in runs:
            if s["step"]:
                w.writerow([label, s["step"][-1], format(s["avg_ratio"][-1], ".10g"),
                            format(s["coverage"][-1], ".10g")])
            else:
                w.writerow([label, "", "", ""])
    print(f"wrote avg_ratio.svg, coverage.svg, summary.csv to {args.out}")
    return 0


# -- selfcheck -----------------------------------------------------------------------


def cmd_selfcheck(args) -> int:
    from .oracles import SELFCHECK_SUITES

    names = args.suite or list(SELFCHECK_SUITES)
    unknown = [n for n in names if n not in SELFCHECK_SUITES]
    if unknown:
        raise UsageError(f"xpr selfcheck: unknown suite {unknown[0]!r}; choose from "
                         + ", ".join(SELFCHECK_SUITES))
    ok = True
    for n in names:
        res = SELFCHECK_SUITES[n]()
        print(res.line(), flush=True)
        ok &= res.passed
    return 0 if ok else 2


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get("XPR_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as err:
        print(err, file=sys.stderr)
        return 1
    except Exception as err:  # runtime failure: report, don't trace
        log.debug("runtime failure", exc_info=True)
        print(f"xpr: error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
