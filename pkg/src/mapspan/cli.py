"""Command-line entry point: gen, train, eval, gradcheck, bench.

Every command accepts ``--config file.json`` whose keys are the command's
flag names (underscored); explicit flags override the file. Each run writes
``manifest.json`` under ``--out`` with the resolved configuration, which can
be fed back through ``--config`` to repeat the run.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import generate_needle_task, load_squad, read_jsonl, write_jsonl
from .encoder import EncoderConfig, Vocabulary
from .experiments import (bench_cells, bench_k_sweep, convergence, convergence_rows, predict_all,
                          scaled_params, write_rows)
from .heads import ResourceError, map_first
from .inference import STRATEGIES, SearchConfig, StrategyError
from .metrics import evaluate
from .model import ModelConfig, SpanModel
from .trainer import (TrainConfig, TrainingError, build_sampled_matrix, example_loss,
                      loss_end_sampled, loss_start, total_loss, train, write_loss_csv)

log = logging.getLogger("mapspan")

NOT_CONFIG = {"command", "config", "verbose", "handler"}
SQUAD_MAX_SPAN = 30
# may come from the command line or the config file
REQUIRED = {"train": ("train",), "eval": ("checkpoint", "data")}


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _pair(text: str) -> tuple[int, int]:
    vals = _int_list(text)
    if len(vals) != 2 or vals[0] > vals[1]:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi' with lo <= hi, got {text!r}")
    return vals[0], vals[1]


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of flag values; explicit flags take precedence")
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--head", choices=("ind", "vcp", "map"), default="map")
    p.add_argument("--directions", choices=("forward", "backward", "both"), default="forward")
    p.add_argument("--d", type=int, default=32, help="hidden size")
    p.add_argument("--embed", type=int, default=32, help="embedding size")
    p.add_argument("--encoder", choices=("birnn", "attention"), default="birnn")
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--pack", choices=("qp", "qpq"), default="qp",
                   help="qpq repeats the question after the passage")
    p.add_argument("--match", action=argparse.BooleanOptionalAction, default=False,
                   help="passage-to-question match attention before the recurrent layer")
    p.add_argument("--first-mode", choices=("linear", "pointer"), default="linear")
    p.add_argument("--max-len", type=int, default=512)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mapspan", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write synthetic needle train/dev splits")
    _common(p)
    p.add_argument("--num-train", type=int, default=2000)
    p.add_argument("--num-dev", type=int, default=500)
    p.add_argument("--passage-len", type=_pair, default=(20, 40), help="lo,hi")
    p.add_argument("--needle-len", type=_pair, default=(1, 5), help="lo,hi")
    p.add_argument("--vocab-size", type=int, default=50)
    p.set_defaults(handler=cmd_gen)

    p = sub.add_parser("train", help="train a span model and write a checkpoint")
    _common(p)
    _model_flags(p)
    p.add_argument("--train", help="JSONL training data (required)")
    p.add_argument("--sample-k", type=int, default=20)
    p.add_argument("--norm-mode", choices=("joint-flat", "row-wise"), default="joint-flat")
    p.add_argument("--matrix-mode", choices=("sampled", "full"), default="sampled")
    p.add_argument("--shared-columns", action=argparse.BooleanOptionalAction, default=False)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--max-sequence", type=int, default=512, help="cap for full-matrix training")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _common(p)
    p.add_argument("--checkpoint", help="checkpoint written by train (required)")
    p.add_argument("--data", help="JSONL examples or SQuAD 1.1 JSON (required)")
    p.add_argument("--format", choices=("auto", "jsonl", "squad"), default="auto")
    p.add_argument("--strategy", choices=STRATEGIES, default="map-forward")
    p.add_argument("--max-span-len", type=int, default=None,
                   help=f"default {SQUAD_MAX_SPAN} for SQuAD input, unlimited for JSONL")
    p.add_argument("--ensemble-k", type=int, default=20)
    p.add_argument("--bins", type=_int_list, default=[1, 2, 3, 4, 5, 10, 20])
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every head and loss")
    _common(p)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--n", type=int, default=7, help="passage length of the test instances")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("bench", help="cell counts, k sweep and convergence curves")
    _common(p)
    p.add_argument("--parts", default="cells,ksweep,convergence")
    p.add_argument("--ns", type=_int_list, default=[64, 128, 256, 512])
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--ks", type=_int_list, default=[5, 10, 20, 30])
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--max-full", type=int, default=1024, help="skip full construction above this n")
    p.add_argument("--num-train", type=int, default=2000)
    p.add_argument("--num-dev", type=int, default=500)
    p.add_argument("--epochs", type=int, default=3, help="k-sweep training epochs")
    p.add_argument("--conv-train", type=int, default=400)
    p.add_argument("--conv-epochs", type=int, default=4, help="full-matrix epochs; sampled gets twice")
    p.set_defaults(handler=cmd_bench)
    return parser


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[command]
    raise KeyError(command)


def _coerce(sub: argparse.ArgumentParser, action: argparse.Action, key: str, value):
    """Validate one config-file value the way the flag would be parsed."""
    if isinstance(action, argparse.BooleanOptionalAction) or action.const is True:
        if not isinstance(value, bool):
            sub.error(f"config key {key!r} must be true or false")
        return value
    if value is None:
        return None
    if action.type is not None:
        text = ",".join(str(v) for v in value) if isinstance(value, (list, tuple)) else str(value)
        try:
            value = action.type(text)
        except (argparse.ArgumentTypeError, ValueError) as exc:
            sub.error(f"config key {key!r}: {exc}")
    if action.choices is not None and value not in action.choices:
        sub.error(f"config key {key!r}: {value!r} not in {sorted(action.choices)}")
    return value


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    sub = _subparser(parser, args.command)
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            sub.error(f"cannot read config {args.config}: {exc}")
        if not isinstance(cfg, dict):
            sub.error("config file must hold a JSON object")
        actions = {a.dest: a for a in sub._actions}
        values = {}
        for key, value in cfg.items():
            dest = key.replace("-", "_")
            if dest not in actions or dest in NOT_CONFIG:
                sub.error(f"unknown config key {key!r} for command {args.command!r}")
            values[dest] = _coerce(sub, actions[dest], key, value)
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    missing = [k for k in REQUIRED.get(args.command, ()) if getattr(args, k) is None]
    if missing:
        sub.error("missing required setting(s): " + ", ".join("--" + k for k in missing))
    return args


# ---------------------------------------------------------------- helpers

def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(args, out: Path, outputs: list[str], extra: dict | None = None,
                    started: float | None = None) -> None:
    config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()
              if k not in NOT_CONFIG}
    manifest = {"command": args.command, "version": __version__, "config": config,
                "seed": args.seed, "outputs": outputs}
    if started is not None:
        manifest["wall_s"] = round(time.perf_counter() - started, 3)
    if extra:
        manifest.update(extra)
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_examples(path, fmt: str = "auto"):
    path = Path(path)
    if fmt == "auto":
        fmt = "jsonl" if path.suffix == ".jsonl" else "squad"
    if fmt == "jsonl":
        return read_jsonl(path), None
    report: list = []
    examples = load_squad(path, report)
    return examples, report[0]


def model_config(args, vocab: Vocabulary) -> ModelConfig:
    enc = EncoderConfig(vocab_size=len(vocab), d=args.d, embed=args.embed, kind=args.encoder,
                        layers=args.layers, max_len=args.max_len, seed=args.seed, pack=args.pack,
                        match=args.match)
    return ModelConfig(head=args.head, encoder=enc, directions=args.directions,
                       first_mode=args.first_mode)


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    started = time.perf_counter()
    out = _out_dir(args)
    kw = {"passage_len": tuple(args.passage_len), "needle_len": tuple(args.needle_len),
          "vocab_size": args.vocab_size}
    # train and dev draw from disjoint seeds
    train_seed, dev_seed = 2 * args.seed + 1, 2 * args.seed + 2
    tr = generate_needle_task(args.num_train, seed=train_seed, id_prefix="train", **kw)
    dev = generate_needle_task(args.num_dev, seed=dev_seed, id_prefix="dev", **kw)
    write_jsonl(tr, out / "train.jsonl")
    write_jsonl(dev, out / "dev.jsonl")
    _write_manifest(args, out, ["train.jsonl", "dev.jsonl"],
                    {"split_seeds": {"train": train_seed, "dev": dev_seed}}, started)
    print(f"wrote {len(tr)} train and {len(dev)} dev examples to {out}")
    return 0


def cmd_train(args) -> int:
    started = time.perf_counter()
    data = read_jsonl(args.train)
    if not data:
        raise ValueError(f"{args.train} holds no examples")
    out = _out_dir(args)
    vocab = Vocabulary.build(data)
    model = SpanModel.create(model_config(args, vocab), vocab)
    cfg = TrainConfig(sample_k=args.sample_k, learning_rate=args.lr, batch_size=args.batch_size,
                      epochs=args.epochs, norm_mode=args.norm_mode, directions=args.directions,
                      matrix_mode=args.matrix_mode, shared_columns=args.shared_columns,
                      seed=args.seed, max_sequence=args.max_sequence)
    if args.head != "map" and (args.matrix_mode != "sampled" or args.directions != "forward"):
        raise ValueError("matrix-mode and directions apply to the map head only")
    res = train(model, data, cfg)
    save_checkpoint(model, out / "model.ckpt", seed=args.seed, extra={"train_config": vars(cfg)})
    write_loss_csv(res.log, out / "loss.csv")
    _write_manifest(args, out, ["model.ckpt", "loss.csv"],
                    {"steps": len(res.log), "clamp_events": res.clamp_events}, started)
    first, last = res.log[0]["L"], res.log[-1]["L"]
    print(f"trained {len(res.log)} steps: loss {first:.4f} -> {last:.4f}; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    started = time.perf_counter()
    model, header = load_checkpoint(args.checkpoint)
    data, squad_report = load_examples(args.data, args.format)
    if not data:
        raise ValueError(f"{args.data} holds no examples")
    out = _out_dir(args)
    max_span = args.max_span_len
    if max_span is None and squad_report is not None:
        max_span = SQUAD_MAX_SPAN
    search = SearchConfig(max_span_len=max_span, ensemble_k=args.ensemble_k)
    preds = predict_all(model, data, args.strategy, search, args.threads)
    report = evaluate(preds, data, args.bins)
    report.write_json(out / "report.json")
    report.write_length_csv(out / "report_by_length.csv")
    with open(out / "predictions.json", "w") as fh:
        json.dump({k: [p.s, p.e, p.score] for k, p in preds.items()}, fh)
    extra = {"strategy": args.strategy, "em": report.em, "f1": report.f1, "count": report.count}
    if squad_report is not None:
        extra["squad"] = {"raw_questions": squad_report.raw_questions,
                          "raw_answers": squad_report.raw_answers,
                          "kept": squad_report.kept, "dropped": squad_report.dropped,
                          "alignment_rate": squad_report.alignment_rate,
                          "answer_alignment_rate": squad_report.answer_alignment_rate}
    _write_manifest(args, out, ["report.json", "report_by_length.csv", "predictions.json"], extra, started)
    print(f"{args.strategy}: EM {report.em:.2f} F1 {report.f1:.2f} over {report.count} examples")
    return 0


GRADCHECK_CONFIGS = [
    ("ind", None, "forward"),
    ("vcp", None, "forward"),
    ("map", "joint-flat", "forward"),
    ("map", "joint-flat", "backward"),
    ("map", "row-wise", "forward"),
    ("map", "row-wise", "backward"),
]


def gradcheck_config(head: str, norm_mode: str | None, direction: str, n: int = 7, seed: int = 0,
                     step: float = 1e-5) -> float:
    """Max relative error for encoder + head + loss on one tiny random instance.

    Parameters are scaled up from their initial range so gradients are far
    from zero; sampled indices are drawn once and then held fixed.
    """
    rng = np.random.default_rng(seed)
    vocab = Vocabulary(f"w{i}" for i in range(6))
    enc = EncoderConfig(vocab_size=len(vocab), d=4, embed=3, seed=seed, match=True)
    model = SpanModel.create(ModelConfig(head=head, encoder=enc, directions=direction), vocab)
    model.params = scaled_params(model.params, 10.0)
    q_ids = rng.integers(3, len(vocab), size=3).tolist()
    p_ids = rng.integers(3, len(vocab), size=n).tolist()
    s = int(rng.integers(n))
    e = int(rng.integers(s, n))
    cfg = TrainConfig(sample_k=max(2, n - 3), norm_mode=norm_mode or "joint-flat", directions=direction)
    if head != "map":
        def f(ps):
            model.params = ps
            return example_loss(model, q_ids, p_ids, s, e, cfg)[2]
        return ad.grad_check(f, model.params, step)

    first, second = (s, e) if direction == "forward" else (e, s)

    def sampled(ps, indices=None):
        model.params = ps
        encoded = model.encode(q_ids, p_ids)
        mp = model.map_params(direction)
        p_first = map_first(encoded, mp)
        return p_first, build_sampled_matrix(encoded, mp, p_first, first, second, cfg, indices)

    _, sm = sampled(model.params)
    frozen = (sm.row_indices, sm.col_indices)

    def f(ps):
        p_first, sm = sampled(ps, frozen)
        return total_loss(loss_start(p_first, first), loss_end_sampled(sm))

    return ad.grad_check(f, model.params, step)


def cmd_gradcheck(args) -> int:
    started = time.perf_counter()
    out = _out_dir(args)
    rows, failed = [], 0
    for head, norm, direction in GRADCHECK_CONFIGS:
        name = head if norm is None else f"{head}/{norm}/{direction}"
        err = gradcheck_config(head, norm, direction, n=args.n, seed=args.seed, step=args.step)
        ok = err < args.tol
        failed += not ok
        rows.append({"config": name, "max_rel_error": err, "pass": ok})
        print(f"{'PASS' if ok else 'FAIL'} {name:28s} max rel error {err:.3e}")
    write_rows(rows, out / "gradcheck.csv")
    _write_manifest(args, out, ["gradcheck.csv"], {"failed": failed}, started)
    print(f"{len(rows) - failed}/{len(rows)} configurations within tolerance {args.tol:g}")
    return 1 if failed else 0


def cmd_bench(args) -> int:
    started = time.perf_counter()
    out = _out_dir(args)
    parts = [p.strip() for p in args.parts.split(",") if p.strip()]
    unknown = set(parts) - {"cells", "ksweep", "convergence"}
    if unknown:
        raise ValueError(f"unknown bench parts {sorted(unknown)}")
    outputs, extra = [], {}
    if "cells" in parts:
        rows = bench_cells(args.ns, args.k, repeats=args.repeats, seed=args.seed, max_full=args.max_full)
        write_rows(rows, out / "bench_cells.csv")
        outputs.append("bench_cells.csv")
        for r in rows:
            full_ms = "skipped" if r["full_ms"] == "" else f"{r['full_ms']:.2f} ms"
            print(f"n={r['n']:4d}: {r['sampled_cells']} sampled vs {r['full_cells']} full cells; "
                  f"{r['sampled_ms']:.2f} ms vs {full_ms} {r['note']}".rstrip())
    if "ksweep" in parts:
        rows = bench_k_sweep(args.ks, args.num_train, args.num_dev, args.epochs, args.seed)
        write_rows(rows, out / "bench_ksweep.csv")
        outputs.append("bench_ksweep.csv")
        for r in rows:
            print(f"k={r['k']:3d}: EM {r['em']:.2f} F1 {r['f1']:.2f}")
    if "convergence" in parts:
        res = convergence(args.conv_train, args.conv_epochs, args.k, args.seed)
        curves, points = convergence_rows(res)
        write_rows(curves, out / "bench_convergence.csv", ["step", "sampled_L", "full_L"])
        write_rows(points, out / "bench_convergence_objective.csv",
                   ["mode", "epoch", "step", "full_objective"])
        outputs += ["bench_convergence.csv", "bench_convergence_objective.csv"]
        extra["convergence"] = {k: v for k, v in res.items() if k != "runs"}
        print(f"full run final objective {res['full_final']:.4f} after {res['full_steps']} steps; "
              f"sampled reached {res['target']:.4f} at step {res['sampled_steps_to_target']}")
    _write_manifest(args, out, outputs, extra, started)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except (StrategyError, ValueError, TrainingError, ResourceError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
