"""Command-line entry point.

Exit codes: 0 success, 1 invalid input, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import AnchorKVError, InputError, NumericError, ProtocolError

log = logging.getLogger("anchorkv")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
        log.info("wrote %s", out)
    else:
        sys.stdout.write(text)


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x]


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x]


def cmd_train(args) -> None:
    from .checkpoint import load_config, save_checkpoint
    from .harness.corpus import make_corpus
    from .harness.presets import toy_config
    from .harness.training import TrainConfig, train
    from .numerics import Rng

    cfg = load_config(args.config) if args.config else toy_config(args.preset, seed=args.seed)
    corpus = make_corpus(Rng(args.seed), args.tokens, args.corpus)
    tc = TrainConfig(steps=args.steps, batch_size=args.batch, lr=args.lr,
                     answer_only=args.corpus == "membership", seed=args.seed)
    res = train(cfg, corpus, tc)
    save_checkpoint(res.weights, args.out)
    print(json.dumps({"checkpoint": args.out, "steps": args.steps, "final_loss": res.losses[-1]}))


def _read_prompt(args) -> str:
    if args.prompt_file:
        try:
            return Path(args.prompt_file).read_text()
        except OSError as exc:
            raise InputError(f"cannot read prompt file: {exc}") from None
    if args.prompt is None:
        raise InputError("give --prompt or --prompt-file")
    return args.prompt


def cmd_generate(args) -> None:
    from .cache import parse_policy
    from .checkpoint import load_checkpoint
    from .decoding import generate_with_decoder
    from .vocab import DEFAULT_VOCAB

    weights = load_checkpoint(args.checkpoint)
    prompt = DEFAULT_VOCAB.encode(_read_prompt(args))
    gen = generate_with_decoder(weights, prompt, args.max_new, parse_policy(args.policy))
    sys.stdout.write(DEFAULT_VOCAB.decode(gen.tokens) + "\n")
    if args.budget_out and gen.decoder.retained_per_step:
        _write(gen.decoder.budget().to_csv(), args.budget_out)


def cmd_needle(args) -> None:
    from .cache import parse_policy
    from .checkpoint import load_checkpoint
    from .harness.needle import eval_needle_grid

    weights = load_checkpoint(args.checkpoint)
    grid = eval_needle_grid(weights, parse_policy(args.policy), _ints(args.lengths), _floats(args.depths),
                            args.trials, seed=args.seed)
    _write(grid.to_csv(), args.out)


def cmd_analyze(args) -> None:
    from . import analysis
    from .checkpoint import load_checkpoint
    from .harness.corpus import make_corpus
    from .harness.training import prepare
    from .numerics import Rng
    from .vocab import DEFAULT_VOCAB

    weights = load_checkpoint(args.checkpoint)
    if args.kind == "wov":
        rep = analysis.wov_eigen_report(weights)
        _write(rep.eigen_csv() if args.eigenvalues else rep.to_csv(), args.out)
        return
    if args.text is not None:
        seqs = prepare(weights.cfg, [DEFAULT_VOCAB.encode(args.text)])
    else:
        seqs = prepare(weights.cfg, make_corpus(Rng(args.seed), args.tokens, "lines",
                                                seq_len=min(256, weights.cfg.max_seq // 2)))
    records = [analysis.capture_attention(weights, s) for s in seqs]
    if args.kind == "sparsity":
        rep = analysis.sparsity_report(records)
        _write(rep.to_json() + "\n" if args.format == "json" else rep.to_csv(), args.out)
    elif args.kind == "maxdist":
        _write(analysis.attention_max_distribution(records, exclude_sinks=args.sinks).to_csv(), args.out)
    else:
        head = "mean" if args.head == "mean" else int(args.head)
        _write(analysis.export_heatmap(records[0], args.layer, head), args.out)


def cmd_bench(args) -> None:
    from .cache import parse_policy
    from .checkpoint import load_checkpoint
    from .harness.bench import bench_runtime, runtime_csv

    weights = load_checkpoint(args.checkpoint)
    reports = []
    for plen in _ints(args.prompt_lens):
        for spec in args.policy:
            reports.append(bench_runtime(weights, parse_policy(spec), plen, args.gen_len, args.repeats, seed=args.seed))
    _write(runtime_csv(reports), args.out)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="anchorkv", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a toy model and write a checkpoint")
    t.add_argument("--config", help="JSON model config (overrides --preset)")
    t.add_argument("--preset", choices=["dense", "anchor"], default="dense")
    t.add_argument("--corpus", choices=["lines", "membership"], default="lines")
    t.add_argument("--tokens", type=int, default=200_000, help="corpus size in tokens")
    t.add_argument("--steps", type=int, default=300)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--lr", type=float, default=3e-3)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("generate", help="greedy generation under a cache policy")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--prompt-file")
    g.add_argument("--prompt")
    g.add_argument("--max-new", type=int, default=64)
    g.add_argument("--policy", default="dense", help="dense|window:w|streaming:s,w|h2o:f|anchor[:sinks]")
    g.add_argument("--budget-out", help="write the per-step retention CSV here")
    g.add_argument("--seed", type=int, default=0, help="accepted for uniformity; decoding is greedy")
    g.set_defaults(func=cmd_generate)

    n = sub.add_parser("needle", help="list-membership retrieval grid")
    n.add_argument("--checkpoint", required=True)
    n.add_argument("--policy", default="dense")
    n.add_argument("--lengths", default="16,32,64,128")
    n.add_argument("--depths", default="0,0.25,0.5,0.75,1")
    n.add_argument("--trials", type=int, default=32)
    n.add_argument("--out")
    n.add_argument("--seed", type=int, default=0)
    n.set_defaults(func=cmd_needle)

    a = sub.add_parser("analyze", help="attention sparsity, top-token classes, heatmaps, W_OV spectra")
    a.add_argument("kind", choices=["sparsity", "maxdist", "heatmap", "wov"])
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--text", help="analyze this text instead of a generated corpus")
    a.add_argument("--tokens", type=int, default=1024, help="size of the generated corpus")
    a.add_argument("--format", choices=["csv", "json"], default="csv")
    a.add_argument("--layer", type=int, default=0)
    a.add_argument("--head", default="mean", help="head index or 'mean'")
    a.add_argument("--sinks", type=int, default=4, help="leading positions ignored by maxdist")
    a.add_argument("--eigenvalues", action="store_true", help="wov: dump every eigenvalue")
    a.add_argument("--out")
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("bench", help="prefill/decode timing per policy")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--policy", action="append", default=None, help="repeatable; default dense and anchor")
    b.add_argument("--prompt-lens", default="512")
    b.add_argument("--gen-len", type=int, default=256)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--out")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "policy", None) is None and args.command == "bench":
        args.policy = ["dense", "anchor"]
    try:
        args.func(args)
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 2
    except (InputError, ProtocolError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except AnchorKVError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
