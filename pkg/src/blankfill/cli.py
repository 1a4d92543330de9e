"""Command-line interface.

Subcommands: train, infill, restore, sample, ppl, eval, make-canvas.
Exit codes: 0 success, 2 usage or input-format errors, 3 numeric failure
(training divergence).  Training hyperparameters come from built-in
defaults, overridden by a flat ``key=value`` config file (``--config``),
overridden in turn by the matching command-line flags.  Every command that
produces files also writes a run manifest (JSON) recording paths, seed,
resolved config, versions, and wall-clock time, and writes outputs
atomically (temp file + rename).

Environment: ``BLANKFILL_THREADS`` pins the torch CPU thread count,
``BLANKFILL_LOG`` sets the log level (e.g. INFO to watch training).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time

import torch

from . import __version__
from .canvas import TemplateError, parse_template, render
from .corpus import (
    CorpusError,
    MaskSpec,
    atomic_write_text,
    build_vocab,
    compile_infilling,
    compile_restoration,
    load_sentences,
)
from .decoding import (
    DecodeConfig,
    beam_fill,
    rerank,
    restore_fill,
    sample_fill,
    trajectory_lines,
)
from .evaluation import (
    bleu,
    cer,
    corpus_ppl,
    extract_slots,
    validity_rate,
)
from .model import (
    CHECKPOINT_VERSION,
    CheckpointError,
    ModelConfig,
    build_model,
    load_checkpoint,
    save_checkpoint,
)
from .training import DivergenceError, TrainConfig, format_curve, train

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Bad key or value in a config file or override."""


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


# name -> (parser, default); flat namespace shared by file and flags
CONFIG_SCHEMA: dict[str, tuple] = {
    "mode": (str, "word"),
    "d_model": (int, 256),
    "n_layers": (int, 4),
    "n_heads": (int, 4),
    "d_ff": (int, 512),
    "mlp_hidden": (int, None),
    "dropout": (float, 0.1),
    "t_max": (int, 16),
    "tie_word_proj": (_parse_bool, False),
    "min_count": (int, 1),
    "optimizer": (str, "sgd"),
    "lr": (float, 0.1),
    "weight_decay": (float, 0.01),
    "warmup_steps": (int, 100),
    "grad_clip": (float, 1.0),
    "batch_size": (int, 32),
    "steps": (int, 1000),
    "seed": (int, 0),
    "checkpoint_every": (int, 0),
    "log_every": (int, 100),
}


def read_config_file(path: str) -> dict:
    """Flat ``key = value`` lines; ``#`` comments; unknown keys are errors."""
    out: dict = {}
    with open(path, encoding="utf-8") as f:
        for no, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{no}: expected key=value, got {raw.rstrip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"{path}:{no}: unknown config key {key!r}")
            parse = CONFIG_SCHEMA[key][0]
            try:
                out[key] = parse(value)
            except ConfigError:
                raise
            except ValueError as e:
                raise ConfigError(f"{path}:{no}: bad value for {key}: {e}") from e
    return out


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = {k: d for k, (_, d) in CONFIG_SCHEMA.items()}
    if args.config:
        cfg.update(read_config_file(args.config))
    for key in CONFIG_SCHEMA:
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def write_manifest(
    path: str, command: str, seed, config, inputs: list, outputs: list, started: float
) -> None:
    doc = {
        "command": command,
        "argv": sys.argv[1:],
        "seed": seed,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "package_version": __version__,
        "checkpoint_format_version": CHECKPOINT_VERSION,
        "wall_clock_s": round(time.time() - started, 3),
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    atomic_write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    started = time.time()
    cfg = resolve_config(args)
    lines = load_sentences(args.corpus)
    vocab = build_vocab(lines, cfg["mode"], min_count=cfg["min_count"], t_max=cfg["t_max"])
    sentences = []
    for no, line in enumerate(lines, start=1):
        x = vocab.encode_line(line)
        if cfg["mode"] == "char" and len(x) > cfg["t_max"]:
            raise CorpusError(
                f"{args.corpus}:{no}: {len(x)} characters exceeds t_max={cfg['t_max']}; "
                "raise t_max or shorten the line"
            )
        sentences.append(x)

    model = build_model(
        ModelConfig(
            mode=cfg["mode"],
            d_model=cfg["d_model"],
            n_layers=cfg["n_layers"],
            n_heads=cfg["n_heads"],
            d_ff=cfg["d_ff"],
            mlp_hidden=cfg["mlp_hidden"],
            dropout=cfg["dropout"],
            t_max=cfg["t_max"],
            tie_word_proj=cfg["tie_word_proj"],
        ),
        vocab,
        seed=cfg["seed"],
    )
    tcfg = TrainConfig(
        steps=cfg["steps"],
        batch_size=cfg["batch_size"],
        optimizer=cfg["optimizer"],
        lr=cfg["lr"],
        weight_decay=cfg["weight_decay"],
        warmup_steps=cfg["warmup_steps"],
        grad_clip=cfg["grad_clip"],
        seed=cfg["seed"],
        checkpoint_every=cfg["checkpoint_every"],
        log_every=cfg["log_every"],
    )
    os.makedirs(args.out_dir, exist_ok=True)
    outputs = []

    def on_step(step: int, m) -> None:
        if tcfg.checkpoint_every and step % tcfg.checkpoint_every == 0:
            p = os.path.join(args.out_dir, f"step_{step:06d}.ckpt")
            save_checkpoint(m, p)
            outputs.append(p)

    curve = train(model, sentences, tcfg, on_step=on_step)

    ckpt = os.path.join(args.out_dir, "model.ckpt")
    save_checkpoint(model, ckpt)
    curve_path = os.path.join(args.out_dir, "loss.csv")
    atomic_write_text(curve_path, format_curve(curve))
    outputs += [ckpt, curve_path]
    write_manifest(
        os.path.join(args.out_dir, "manifest.json"),
        "train", cfg["seed"], cfg, [args.corpus], outputs, started,
    )
    print(f"final_loss={curve[-1][1]:.6f}")
    print(f"checkpoint={ckpt}")
    return 0


def _load_templates(path: str, mode: str, vocab) -> list:
    out = []
    with open(path, encoding="utf-8") as f:
        for no, raw in enumerate(f, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                raise CorpusError(f"{path}:{no}: empty line")
            try:
                out.append(parse_template(line, mode, vocab))
            except TemplateError as e:
                raise TemplateError(f"{path}:{no}: {e}") from e
    return out


def _decode_command(args: argparse.Namespace, restoration: bool) -> int:
    started = time.time()
    model = load_checkpoint(args.checkpoint)
    mode = model.config.mode
    want = "char" if restoration else "word"
    if mode != want:
        raise CheckpointError(
            f"{'restore' if restoration else 'infill'} needs a {want}-mode "
            f"checkpoint, got {mode}-mode"
        )
    templates = _load_templates(args.templates, mode, model.vocab)
    cfg = DecodeConfig(
        beam_size=args.beam,
        top_k_words=args.top_k,
        max_tokens=args.budget,
        seed=args.seed,
    )
    out_lines, traj_blocks = [], []
    for c in templates:
        hyp = restore_fill(model, c, cfg) if restoration else beam_fill(model, c, cfg)[0]
        out_lines.append(render(hyp.canvas, mode))
        traj_blocks.append("\n".join(trajectory_lines(hyp, mode)))
    atomic_write_text(args.out, "".join(line + "\n" for line in out_lines))
    outputs = [args.out]
    if args.trajectory:
        atomic_write_text(args.trajectory, "\n\n".join(traj_blocks) + "\n")
        outputs.append(args.trajectory)
    write_manifest(
        args.out + ".manifest.json",
        "restore" if restoration else "infill",
        args.seed, None, [args.checkpoint, args.templates], outputs, started,
    )
    print(f"wrote {len(out_lines)} lines to {args.out}")
    return 0


def cmd_infill(args: argparse.Namespace) -> int:
    return _decode_command(args, restoration=False)


def cmd_restore(args: argparse.Namespace) -> int:
    return _decode_command(args, restoration=True)


def cmd_sample(args: argparse.Namespace) -> int:
    started = time.time()
    model = load_checkpoint(args.checkpoint)
    mode = model.config.mode
    templates = _load_templates(args.templates, mode, model.vocab)
    cfg = DecodeConfig(
        top_k_words=args.top_k,
        temperature=args.temperature,
        n_samples=args.k,
        max_tokens=args.budget,
        seed=args.seed,
    )
    out_lines = []
    for ti, c in enumerate(templates):
        hyps = sample_fill(model, c, cfg)
        if args.rerank_cmd:
            texts = [render(h.canvas, mode) for h in hyps]
            proc = subprocess.run(
                args.rerank_cmd, shell=True, input="\n".join(texts) + "\n",
                capture_output=True, text=True,
            )
            if proc.returncode != 0:
                raise ValueError(
                    f"rerank command failed ({proc.returncode}): {proc.stderr.strip()}"
                )
            scores = [float(s) for s in proc.stdout.split()]
            if len(scores) != len(texts):
                raise ValueError(
                    f"rerank command returned {len(scores)} scores for {len(texts)} lines"
                )
            table = {t: s for t, s in zip(texts, scores)}
            best = rerank(hyps, lambda text: table[text], mode)
            out_lines.append(render(best.canvas, mode))
        else:
            out_lines += [
                f"{ti}\t{si}\t{h.logprob:.4f}\t{render(h.canvas, mode)}"
                for si, h in enumerate(hyps)
            ]
    atomic_write_text(args.out, "".join(line + "\n" for line in out_lines))
    write_manifest(
        args.out + ".manifest.json", "sample", args.seed, None,
        [args.checkpoint, args.templates], [args.out], started,
    )
    print(f"wrote {len(out_lines)} lines to {args.out}")
    return 0


def cmd_ppl(args: argparse.Namespace) -> int:
    started = time.time()
    model = load_checkpoint(args.checkpoint)
    lines = load_sentences(args.corpus)
    sentences = [model.vocab.encode_line(line) for line in lines]
    est = corpus_ppl(model, sentences, args.m, seed=args.seed, exhaustive=args.exhaustive)
    rows = ["sentence_id,n,m,log_Xm"]
    rows += [
        f"{i},{n},{est.m},{lx:.6f}"
        for i, (n, lx) in enumerate(zip(est.lengths, est.log_marginals))
    ]
    atomic_write_text(args.out, "\n".join(rows) + "\n")
    write_manifest(
        args.out + ".manifest.json", "ppl", args.seed, None,
        [args.checkpoint, args.corpus], [args.out], started,
    )
    print(f"corpus_ppl={est.ppl:.4f}")
    print(f"mean_sentence_ppl={est.mean_sentence_ppl:.4f}")
    print(f"n_tokens={est.n_tokens}")
    return 0


def _read_token_lines(path: str, mode: str) -> list[list[str]]:
    out = []
    with open(path, encoding="utf-8") as f:
        for raw in f:
            line = raw.rstrip("\n")
            out.append(line.split() if mode == "word" else list(line))
    return out


def _require(args: argparse.Namespace, *names: str) -> None:
    for name in names:
        if getattr(args, name) is None:
            raise ConfigError(f"--metric {args.metric} requires --{name}")


def cmd_eval(args: argparse.Namespace) -> int:
    if args.metric == "bleu":
        _require(args, "candidates", "references")
        cands = _read_token_lines(args.candidates, args.mode)
        refs = _read_token_lines(args.references, args.mode)
        if args.checkpoint:
            vocab = load_checkpoint(args.checkpoint).vocab
            subs = 0
            def remap(rows):
                nonlocal subs
                mapped = []
                for row in rows:
                    toks = [vocab.token(s) for s in row]
                    subs += sum(t.id == vocab.unk_id for t in toks)
                    mapped.append([t.surface for t in toks])
                return mapped
            cands, refs = remap(cands), remap(refs)
            print(f"unknown_substitutions={subs}", file=sys.stderr)
        print(f"bleu={bleu(cands, refs):.4f}")
        return 0

    if args.metric == "cer":
        _require(args, "templates", "candidates", "references")
        tpl_lines = load_sentences(args.templates)
        cand_lines = _read_token_lines(args.candidates, "char")
        ref_lines = _read_token_lines(args.references, "char")
        if not len(tpl_lines) == len(cand_lines) == len(ref_lines):
            raise ValueError("templates, candidates and references must align by line")
        vocab = build_vocab(["".join(r) for r in ref_lines] + tpl_lines, "char")
        pred, true, failures = [], [], 0
        for tpl_text, cand, ref in zip(tpl_lines, cand_lines, ref_lines):
            template = parse_template(tpl_text, "char", vocab)
            true_slots = extract_slots(template, ref)
            try:
                pred_slots = extract_slots(template, cand)
            except ValueError:
                # only possible for fills without exact lengths; reported,
                # not folded into the rate
                failures += 1
                continue
            pred += pred_slots
            true += true_slots
        print(f"cer={cer(pred, true):.4f}")
        print(f"length_failures={failures}")
        return 0

    if args.metric == "validity":
        _require(args, "templates", "candidates")
        tpl_lines = load_sentences(args.templates)
        cand_rows = _read_token_lines(args.candidates, args.mode)
        corpus_for_vocab = ["".join(r) if args.mode == "char" else " ".join(r) for r in cand_rows]
        vocab = build_vocab(corpus_for_vocab + tpl_lines, args.mode)
        templates = [parse_template(t, args.mode, vocab) for t in tpl_lines]
        print(f"validity={validity_rate(templates, cand_rows):.4f}")
        return 0

    raise ConfigError(f"unknown metric {args.metric!r}")


def cmd_make_canvas(args: argparse.Namespace) -> int:
    started = time.time()
    if (args.ratio is None) == (args.slots is None):
        raise ConfigError("give exactly one of --ratio or --slots")
    if args.slots is not None and args.mode != "char":
        raise ConfigError("--slots (restoration spans) requires --mode char")
    lines = load_sentences(args.corpus)
    vocab = build_vocab(lines, args.mode)
    tpl_lines, ref_lines = [], []
    for no, line in enumerate(lines, start=1):
        doc = vocab.encode_line(line)
        seed = args.seed + no
        try:
            if args.ratio is not None:
                annotate = args.mode == "char"
                canvas, ref = compile_infilling(doc, MaskSpec(args.ratio, seed), annotate)
            else:
                canvas, ref = compile_restoration(
                    doc, args.slots, (args.slot_min, args.slot_max), seed
                )
        except CorpusError as e:
            raise CorpusError(f"{args.corpus}:{no}: {e}") from e
        tpl_lines.append(render(canvas, args.mode))
        sep = " " if args.mode == "word" else ""
        ref_lines.append(sep.join(t.surface for t in ref))
    atomic_write_text(args.out, "".join(t + "\n" for t in tpl_lines))
    atomic_write_text(args.refs, "".join(r + "\n" for r in ref_lines))
    write_manifest(
        args.out + ".manifest.json", "make-canvas", args.seed, None,
        [args.corpus], [args.out, args.refs], started,
    )
    print(f"wrote {len(tpl_lines)} canvases to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="blankfill", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model on a one-sentence-per-line corpus")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--config", help="flat key=value config file")
    for key, (parse, _) in CONFIG_SCHEMA.items():
        t.add_argument(f"--{key.replace('_', '-')}", dest=key, type=parse, default=None)
    t.set_defaults(func=cmd_train)

    def decode_common(sp, budget_help: str) -> None:
        sp.add_argument("--checkpoint", required=True)
        sp.add_argument("--templates", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--beam", type=int, default=1)
        sp.add_argument("--top-k", type=int, default=16)
        sp.add_argument("--budget", type=int, default=None, help=budget_help)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--trajectory", help="also log every intermediate canvas here")

    i = sub.add_parser("infill", help="fill word-mode templates ('__' blanks)")
    decode_common(i, "token budget (default: 2 x template items + 10)")
    i.set_defaults(func=cmd_infill)

    r = sub.add_parser("restore", help="fill char-mode templates ('?' runs, exact lengths)")
    decode_common(r, "ignored: annotated lengths already bound the output")
    r.set_defaults(func=cmd_restore)

    s = sub.add_parser("sample", help="temperature-sample k fills per template")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--templates", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--top-k", type=int, default=16)
    s.add_argument("--budget", type=int, default=None)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument(
        "--rerank-cmd",
        help="shell command scoring candidates (one per stdin line -> one float "
        "per stdout line); keeps only the best fill per template",
    )
    s.set_defaults(func=cmd_sample)

    q = sub.add_parser("ppl", help="Monte-Carlo corpus perplexity")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--corpus", required=True)
    q.add_argument("--out", required=True, help="per-sentence CSV")
    q.add_argument("--m", type=int, default=10, help="sampled orders per sentence")
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--exhaustive", action="store_true",
                   help="enumerate all orders instead of sampling (short sentences)")
    q.set_defaults(func=cmd_ppl)

    e = sub.add_parser("eval", help="text metrics over aligned files")
    e.add_argument("--metric", required=True, choices=["bleu", "cer", "validity"])
    e.add_argument("--candidates")
    e.add_argument("--references")
    e.add_argument("--templates")
    e.add_argument("--mode", default="word", choices=["word", "char"])
    e.add_argument("--checkpoint", help="bleu: map both sides through this vocabulary")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("make-canvas", help="compile sentences into task canvases")
    m.add_argument("--corpus", required=True)
    m.add_argument("--out", required=True, help="template file")
    m.add_argument("--refs", required=True, help="aligned reference file")
    m.add_argument("--mode", default="word", choices=["word", "char"])
    m.add_argument("--ratio", type=float, help="mask this fraction of positions")
    m.add_argument("--slots", type=int, help="number of exact-length spans (char)")
    m.add_argument("--slot-min", type=int, default=1)
    m.add_argument("--slot-max", type=int, default=10)
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_canvas)

    return p


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("BLANKFILL_LOG", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s",
    )
    threads = os.environ.get("BLANKFILL_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (
        ConfigError,
        CorpusError,
        TemplateError,
        CheckpointError,
        ValueError,
        OSError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
