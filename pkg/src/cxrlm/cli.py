"""Command-line entry point: ``cxrlm <subcommand>``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Relative output paths resolve against ``$CXRLM_OUTPUT_DIR`` when it is set.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from .errors import DataError, NumericError

log = logging.getLogger("cxrlm")

OUTPUT_DIR_ENV = "CXRLM_OUTPUT_DIR"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def tool_version() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("artifact")
    except PackageNotFoundError:
        from . import __version__
        return __version__


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- paths, configs, manifest -----------------------------------------------

def out_path(path: str | os.PathLike) -> Path:
    p = Path(path)
    base = os.environ.get(OUTPUT_DIR_ENV)
    if base and not p.is_absolute():
        p = Path(base) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from exc
    if not text.strip():
        raise DataError(f"{path}: config file is empty")
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise DataError(f"{path}: expected a JSON object")
    return obj


def parse_fractions(text: str) -> list[float]:
    """``"0.8,0.1,0.1"`` -> train/val/test fractions."""
    try:
        fractions = [float(x) for x in text.split(",")]
    except ValueError:
        raise UsageError(f"--split expects comma-separated train,val,test fractions, got {text!r}") from None
    if len(fractions) != 3:
        raise UsageError(f"--split expects exactly three fractions, got {text!r}")
    return fractions


def parse_overrides(pairs: list[str] | None) -> dict:
    """``key=value`` pairs; values are parsed as JSON when possible."""
    out = {}
    for pair in pairs or []:
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"override {pair!r} is not of the form key=value")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def load_config(cls, path, overrides: dict | None = None, allow_empty: bool = True):
    obj = read_json(path) if path else {}
    if path and not obj and not allow_empty:
        raise DataError(f"{path}: config is empty")
    obj.update(overrides or {})
    try:
        return cls.from_dict(obj)
    except TypeError as exc:
        raise DataError(f"bad {cls.__name__}: {exc}") from exc


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class RunManifest:
    """JSON record of a run, written at start and finalized at the end."""

    def __init__(self, path: Path, command: str, argv: list[str]):
        self.path = path
        self.data = {
            "command": command,
            "argv": argv,
            "tool_version": tool_version(),
            "seed": None,
            "config": {},
            "inputs": {},
            "artifacts": {},
            "started_at": _now(),
            "finished_at": None,
            "status": "running",
            "exit_code": None,
        }

    def add_input(self, name: str, path) -> None:
        self.data["inputs"][name] = {"path": str(path), "sha256": sha256_of(path)}

    def write(self) -> None:
        tmp = self.path.with_name(self.path.name + ".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, self.path)

    def finalize(self, exit_code: int, error: str | None = None) -> None:
        self.data["finished_at"] = _now()
        self.data["exit_code"] = exit_code
        self.data["status"] = "ok" if exit_code == EXIT_OK else "failed"
        if error:
            self.data["error"] = error
        self.write()


# -- shared loaders ---------------------------------------------------------

def vocab_path_for(checkpoint) -> Path:
    return Path(f"{checkpoint}.vocab.tsv")


def load_model(args, manifest: RunManifest):
    from .checkpoint import load_checkpoint
    from .kg import load_kg
    from .model import LanguageModel
    from .tokenizer import load_vocab

    manifest.add_input("checkpoint", args.checkpoint)
    manifest.add_input("kg", args.kg)
    params = load_checkpoint(args.checkpoint)
    vocab_file = args.vocab or vocab_path_for(args.checkpoint)
    manifest.add_input("vocab", vocab_file)
    vocab = load_vocab(vocab_file)
    kg = load_kg(args.kg)
    return LanguageModel(params, vocab, kg, use_kg=not args.no_kg)


def decode_config_from(args):
    from .decode import DecodeConfig

    return DecodeConfig(args.strategy, args.beam_width, args.top_p, args.temperature, args.max_new_tokens, args.seed)


# -- commands ---------------------------------------------------------------

def cmd_gen_data(args, manifest: RunManifest) -> int:
    from .data import GeneratorConfig, build_kg, generate_dataset, split, write_jsonl
    from .kg import save_kg

    manifest.add_input("config", args.config)
    config = load_config(GeneratorConfig, args.config, parse_overrides(args.set), allow_empty=False)
    manifest.data["config"] = {"generator": config.to_dict(), "start": args.start, "stop": args.stop, "split": args.split}
    manifest.data["seed"] = config.seed
    manifest.write()

    dataset = generate_dataset(config, args.start, args.stop)
    out = out_path(args.out)
    write_jsonl(dataset, out)
    manifest.data["artifacts"]["dataset"] = str(out)
    if args.split:
        fractions = parse_fractions(args.split)
        for name, part in zip(("train", "val", "test"), split(dataset, fractions, config.seed)):
            p = out.with_name(f"{out.stem}.{name}{out.suffix}")
            write_jsonl(part, p)
            manifest.data["artifacts"][name] = str(p)
    if args.kg_out:
        kg_file = out_path(args.kg_out)
        save_kg(build_kg(config), kg_file)
        manifest.data["artifacts"]["kg"] = str(kg_file)
    print(f"wrote {len(dataset)} examples to {out}")
    return EXIT_OK


def cmd_train(args, manifest: RunManifest) -> int:
    from .checkpoint import save_checkpoint
    from .data import read_jsonl, vocab_corpus
    from .kg import ConceptIndex, load_kg
    from .model import ModelConfig
    from .tokenizer import build_vocab, save_vocab
    from .training import TrainConfig, encode_example, train

    for name in ("data", "kg", "model_config", "train_config"):
        manifest.add_input(name, getattr(args, name))
    dataset = read_jsonl(args.data)
    kg = load_kg(args.kg)
    vocab = build_vocab(vocab_corpus(dataset, kg))
    model_cfg = read_json(args.model_config)
    model_cfg.update(vocab_size=len(vocab), n_concepts=kg.n_concepts, d_know=kg.d_know)
    model_config = ModelConfig.from_dict(model_cfg)
    train_config = load_config(TrainConfig, args.train_config, parse_overrides(args.set))
    manifest.data["config"] = {"model": model_config.to_dict(), "train": train_config.to_dict()}
    manifest.data["seed"] = train_config.seed
    manifest.write()

    index = ConceptIndex(kg, vocab)
    encoded = [encode_example(ex.image_text, ex.instruction, ex.response, vocab, index, model_config.max_seq_len) for ex in dataset]
    ckpt = out_path(args.out)
    loss_log = out_path(args.loss_log) if args.loss_log else Path(f"{ckpt}.loss.tsv")
    with open(loss_log, "w", encoding="utf-8") as fh:
        fh.write("step\tloss\n")

        def on_step(step, value):
            fh.write(f"{step}\t{value!r}\n")
            if step % max(1, args.log_every) == 0:
                log.info("step %d loss %.6f", step, value)

        result = train(encoded, kg, model_config, train_config, on_step=on_step)
    save_checkpoint(result.params, ckpt)
    save_vocab(vocab, vocab_path_for(ckpt))
    manifest.data["artifacts"].update(checkpoint=str(ckpt), vocab=str(vocab_path_for(ckpt)), loss_log=str(loss_log))
    final = result.losses[-1] if result.losses else float("nan")
    print(f"trained {train_config.total_steps} steps, final loss {final:.6f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_generate(args, manifest: RunManifest) -> int:
    from .decode import decode
    from .findings import parse_findings, serialize_findings
    from .tokenizer import build_input

    manifest.add_input("findings", args.findings)
    decode_config = decode_config_from(args)
    manifest.data["config"] = {"decode": decode_config.to_dict(), "instruction": args.instruction, "no_kg": args.no_kg}
    manifest.data["seed"] = decode_config.seed
    manifest.write()
    lm = load_model(args, manifest)
    with open(args.findings, encoding="utf-8") as fh:
        doc = parse_findings(fh.read())
    img = lm.vocab.encode_text(serialize_findings(doc))
    S = build_input(img, lm.vocab.encode_text(args.instruction), lm.vocab, lm.config.max_seq_len)
    out = decode(lm, S, decode_config)
    if args.verbose:
        matched = lm.concepts(S + out)
        names = [lm.kg.concepts[c].name for c in matched]
        print(f"C_S: {', '.join(names) if names else '(none)'}")
    text = lm.vocab.decode_text(out)
    print(text)
    manifest.data["response"] = text
    return EXIT_OK


def _emit_report(rep, json_out, manifest: RunManifest, payload: dict) -> None:
    print(rep.to_table())
    if json_out:
        p = out_path(json_out)
        p.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        manifest.data["artifacts"]["report"] = str(p)


def cmd_eval(args, manifest: RunManifest) -> int:
    from .data import read_jsonl
    from .evaluation import evaluate

    manifest.add_input("data", args.data)
    decode_config = decode_config_from(args)
    manifest.data["config"] = {"decode": decode_config.to_dict(), "no_kg": args.no_kg}
    manifest.data["seed"] = decode_config.seed
    manifest.write()
    lm = load_model(args, manifest)
    rep = evaluate(lm, read_jsonl(args.data), lm.kg, decode_config)
    _emit_report(rep, args.json, manifest, rep.to_dict())
    manifest.data["metrics"] = rep.scalars()
    if rep.has_nan():
        log.error("report contains NaN metrics")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_ablate(args, manifest: RunManifest) -> int:
    from .data import read_jsonl
    from .evaluation import ablation_run
    from .kg import load_kg
    from .model import ModelConfig
    from .training import TrainConfig

    for name in ("data", "kg", "model_config", "train_config"):
        manifest.add_input(name, getattr(args, name))
    try:
        seeds = [int(s) for s in args.seeds.split(",")]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {args.seeds!r}") from None
    dataset = read_jsonl(args.data)
    kg = load_kg(args.kg)
    model_cfg = read_json(args.model_config)
    # vocabulary size and knowledge dimensions come from the data and the graph
    model_cfg.update(vocab_size=1, n_concepts=kg.n_concepts, d_know=kg.d_know)
    model_config = ModelConfig.from_dict(model_cfg)
    train_config = load_config(TrainConfig, args.train_config, parse_overrides(args.set))
    decode_config = decode_config_from(args)
    fractions = parse_fractions(args.split)
    manifest.data["config"] = {"model": model_config.to_dict(), "train": train_config.to_dict(), "decode": decode_config.to_dict(), "seeds": seeds, "split": fractions}
    manifest.data["seed"] = seeds
    manifest.write()

    result = ablation_run(dataset, kg, model_config, train_config, seeds, decode_config, fractions)
    print(result.to_table())
    if args.json:
        p = out_path(args.json)
        p.write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        manifest.data["artifacts"]["report"] = str(p)
    if any(r.has_nan() for reps in result.reports.values() for r in reps):
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_gradcheck(args, manifest: RunManifest) -> int:
    from .model import ModelConfig
    from .training import gradient_check, random_problem

    if args.model_config:
        manifest.add_input("model_config", args.model_config)
        cfg = read_json(args.model_config)
    else:
        cfg = dict(d_model=8, n_layers=2, n_heads=2, d_ff=16, d_know=4, vocab_size=20, max_seq_len=8, n_concepts=6)
    config = ModelConfig.from_dict(cfg)
    manifest.data["config"] = {"model": config.to_dict(), "h": args.h, "tolerance": args.tolerance, "n_examples": args.n_examples}
    manifest.data["seed"] = args.seed
    manifest.write()

    examples, params = random_problem(config, args.seed, args.n_examples)
    errors = gradient_check(examples, params, h=args.h)
    for name, err in errors.items():
        log.info("%-28s %.3e", name, err)
    worst = max(errors, key=errors.get)
    ok = errors[worst] < args.tolerance and all(math.isfinite(e) for e in errors.values())
    manifest.data["max_relative_error"] = errors[worst]
    print(f"{'PASS' if ok else 'FAIL'} max relative error {errors[worst]:.3e} ({worst}), tolerance {args.tolerance:g}")
    return EXIT_OK if ok else EXIT_NUMERIC


# -- parser -----------------------------------------------------------------

def _add_decode_flags(p):
    p.add_argument("--strategy", choices=("greedy", "beam", "nucleus"), default="greedy")
    p.add_argument("--beam-width", type=int, default=4)
    p.add_argument("--top-p", type=float, default=0.9)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--max-new-tokens", type=int, default=48)
    p.add_argument("--seed", type=int, default=0, help="sampling seed (nucleus)")


def _add_model_flags(p):
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--kg", required=True, help="knowledge graph JSON the model was trained with")
    p.add_argument("--vocab", help="vocabulary file (default: <checkpoint>.vocab.tsv)")
    p.add_argument("--no-kg", action="store_true", help="run without knowledge augmentation (for NoKG checkpoints)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cxrlm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose-log", action="store_true", help="debug logging")
    parser.add_argument("--manifest", help="run manifest path (default: <command>.manifest.json in the output dir)")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic instruction dataset")
    p.add_argument("--config", required=True, help="generator config JSON")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--kg-out", help="also write the matching knowledge graph JSON")
    p.add_argument("--start", type=int, default=0, help="first example index (sharding)")
    p.add_argument("--stop", type=int, default=None, help="one past the last example index")
    p.add_argument("--split", help="train,val,test fractions, e.g. 0.8,0.1,0.1")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--kg", required=True)
    p.add_argument("--model-config", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-log", help="loss log path (default: <checkpoint>.loss.tsv)")
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a train config field")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="generate a response for one findings document")
    _add_model_flags(p)
    p.add_argument("--findings", required=True, help="findings document file")
    p.add_argument("--instruction", required=True)
    p.add_argument("--verbose", action="store_true", help="also print the matched concept set C_S")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_model_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--json", help="write the report as JSON")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="paired full vs NoKG training over seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--kg", required=True)
    p.add_argument("--model-config", required=True)
    p.add_argument("--train-config", required=True)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--split", default="0.75,0,0.25", help="train,val,test fractions")
    p.add_argument("--json", help="write per-seed and median reports as JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a train config field")
    _add_decode_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="compare analytic and finite-difference gradients")
    p.add_argument("--model-config", help="model config JSON (default: a tiny 2-layer model)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-examples", type=int, default=2)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"cxrlm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose_log else logging.INFO, format="%(levelname)s %(name)s: %(message)s")

    manifest = RunManifest(out_path(args.manifest or f"{args.command}.manifest.json"), args.command, argv)
    manifest.write()
    start = time.perf_counter()
    code, error = EXIT_OK, None
    try:
        code = args.func(args, manifest)
    except UsageError as exc:
        code, error = EXIT_USAGE, str(exc)
    except (DataError, OSError) as exc:
        code, error = EXIT_DATA, str(exc)
    except (NumericError, FloatingPointError) as exc:
        code, error = EXIT_NUMERIC, str(exc)
    except BaseException as exc:
        manifest.finalize(EXIT_USAGE, f"unexpected {type(exc).__name__}: {exc}")
        raise
    if error:
        print(f"cxrlm: error: {error}", file=sys.stderr)
    manifest.data["elapsed_seconds"] = round(time.perf_counter() - start, 3)
    manifest.finalize(code, error)
    return code


if __name__ == "__main__":
    sys.exit(main())
