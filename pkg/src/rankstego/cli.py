"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 codec or desync error, 3 capacity exhausted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from collections import Counter
from contextlib import redirect_stderr, redirect_stdout
from fractions import Fraction
from io import BytesIO, StringIO, TextIOWrapper
from pathlib import Path
from typing import Mapping, Sequence

from .codec import DEFAULT_TABLE_SIZE, Codebook, SecretKey, build_codebook
from .errors import CapacityExhaustedError, ParameterError, StegoError
from .lm import NgramModel, reference_model, train_ngram
from .metrics import sweep, sweep_jsonl
from .ranking import compress_message
from .stego import StegoConfig, default_codebook, embed, extract, verify_closed_loop

KEY_ENV = "RANKSTEGO_KEY_HEX"

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CODEC = 2
EXIT_CAPACITY = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse exits 2 by default
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def atomic_write(path: str | Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _load_model(args: argparse.Namespace) -> NgramModel:
    if args.model is None:
        return reference_model()
    return NgramModel.load(args.model)


def _load_codebook(args: argparse.Namespace, vocab_size: int) -> Codebook:
    if args.codebook is None:
        return default_codebook(vocab_size)
    return Codebook.load(args.codebook)


def _read_config_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise UsageError(f"config {path} must be a JSON object")
    return data


def _resolve_key(args: argparse.Namespace, env: Mapping[str, str]) -> SecretKey | None:
    # flag > environment > config file (returning None defers to the file)
    text = getattr(args, "key_hex", None) or env.get(KEY_ENV)
    if text:
        return SecretKey.from_hex(text)
    return None


def _load_config(args: argparse.Namespace, env: Mapping[str, str], model: NgramModel, path: str | None = None) -> StegoConfig:
    data = _read_config_json(path or args.config)
    key = _resolve_key(args, env)
    config = StegoConfig.from_dict(data, model.vocab, key)
    if getattr(args, "seed", None) is not None:
        config = config.replace(rng_seed=args.seed)
    return config


def _read_input(path: str) -> bytes:
    if path == "-":
        return sys.stdin.buffer.read()
    return Path(path).read_bytes()


def _parse_stego(text: str, model: NgramModel) -> list[int]:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if lines and all(ln.isdigit() for ln in lines):
        return [int(ln) for ln in lines]
    ids = []
    for word in text.split():
        if word not in model.vocab:
            raise ParameterError(f"stego word {word!r} is not in the model vocabulary")
        ids.append(model.vocab.id_of(word))
    return ids


# --- subcommands ----------------------------------------------------------------


def cmd_train_model(args: argparse.Namespace, env: Mapping[str, str]) -> int:
    model = train_ngram(
        Path(args.corpus),
        args.order,
        Fraction(args.smoothing),
        cache_weight=Fraction(args.cache_weight),
    )
    atomic_write(args.out, model.to_bytes())
    print(f"wrote {args.out}: {model!r}", file=sys.stderr)
    return EXIT_OK


def cmd_train_codebook(args: argparse.Namespace, env: Mapping[str, str]) -> int:
    model = _load_model(args)
    data = _read_config_json(args.config)
    private, _ = model.vocab.encode(str(data.get("private_context", "")))
    histogram: Counter = Counter()
    lines = 0
    for line in Path(args.calibration).read_text(encoding="utf-8").splitlines():
        ids, _ = model.vocab.encode(line)
        if ids:
            histogram.update(compress_message(model, ids, private))
            lines += 1
    if not histogram:
        raise UsageError("calibration file has no usable lines")
    k = min(args.table_size, len(model.vocab))
    codebook = build_codebook(histogram, k, len(model.vocab))
    atomic_write(args.out, codebook.to_bytes())
    print(f"wrote {args.out}: K={k}, {lines} calibration lines, {sum(histogram.values())} ranks", file=sys.stderr)
    return EXIT_OK


def cmd_embed(args: argparse.Namespace, env: Mapping[str, str]) -> int:
    model = _load_model(args)
    config = _load_config(args, env, model)
    codebook = _load_codebook(args, len(model.vocab))
    message = _read_input(args.message_file)
    result = embed(model, config, message, codebook)
    if args.emit == "text":
        out = model.vocab.decode(result.stego_tokens) + "\n"
    else:
        out = "".join(f"{t}\n" for t in result.stego_tokens)
    atomic_write(args.out, out.encode("utf-8"))
    if args.trace:
        lines = "".join(
            json.dumps({"position": s.position, "entropy": s.entropy, "gated": s.gated,
                        "symbol": s.symbol, "token": s.token}) + "\n"
            for s in result.trace
        )
        atomic_write(args.trace, lines.encode("utf-8"))
    gated = sum(s.gated for s in result.trace)
    print(
        f"embedded {len(message)} bytes into {len(result.stego_tokens)} tokens ({gated} gated)",
        file=sys.stderr,
    )
    return EXIT_OK


def cmd_extract(args: argparse.Namespace, env: Mapping[str, str]) -> int:
    model = _load_model(args)
    config = _load_config(args, env, model)
    codebook = _load_codebook(args, len(model.vocab))
    stego = _parse_stego(_read_input(args.stego_file).decode("utf-8"), model)
    message = extract(model, config, stego, codebook)
    atomic_write(args.out, message)
    print(f"recovered {len(message)} bytes from {len(stego)} tokens", file=sys.stderr)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace, env: Mapping[str, str]) -> int:
    model = _load_model(args)
    config = _load_config(args, env, model)
    receiver = None
    if args.receiver_config:
        receiver = _load_config(args, env, model, args.receiver_config)
    codebook = _load_codebook(args, len(model.vocab))
    message = _read_input(args.message_file)
    report = verify_closed_loop(model, config, message, codebook, receiver_config=receiver)
    print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK if report.ok else EXIT_CODEC


def cmd_sweep(args: argparse.Namespace, env: Mapping[str, str]) -> int:
    model = _load_model(args)
    config = _load_config(args, env, model)
    codebook = _load_codebook(args, len(model.vocab))
    try:
        alphas = [float(a) for a in args.alphas.split(",")]
        betas = [int(b) for b in args.betas.split(",")]
    except ValueError as exc:
        raise UsageError(f"bad grid: {exc}") from exc
    corpus = [ln for ln in Path(args.messages).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not corpus:
        raise UsageError("messages file is empty")
    cells = sweep(model, config, alphas, betas, corpus, codebook, workers=args.workers)
    atomic_write(args.out, sweep_jsonl(cells).encode("utf-8"))
    for cell in cells:
        r = cell.report
        payload = "-" if r.payload_pct is None else f"{r.payload_pct:.2f}%"
        print(f"alpha={r.alpha} beta={r.beta} ok={r.n_ok}/{r.n_messages} payload={payload}", file=sys.stderr)
    return EXIT_OK


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rankstego", description="Hide text in the token ranks of generated text.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser, config: bool = True, codebook: bool = True) -> None:
        p.add_argument("--model", help="NGM1 model file (default: bundled reference model)")
        if config:
            p.add_argument("--config", required=True, help="session config JSON")
        if codebook:
            p.add_argument("--codebook", help="RCB1 codebook (default: built-in rank prior)")

    def keyed(p: argparse.ArgumentParser) -> None:
        p.add_argument("--key-hex", help=f"64 hex chars; overrides ${KEY_ENV} and the config file")
        p.add_argument("--seed", type=int, help="override the config rng_seed")

    p = sub.add_parser("train-model", help="train an n-gram model from a text corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--order", type=int, default=2)
    p.add_argument("--smoothing", default="1/100")
    p.add_argument("--cache-weight", default="1/10")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_model)

    p = sub.add_parser("train-codebook", help="calibrate the rank codebook under the private context")
    common(p, codebook=False)
    p.add_argument("--calibration", required=True, help="text file, one message per line")
    p.add_argument("--table-size", type=int, default=DEFAULT_TABLE_SIZE)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_codebook)

    p = sub.add_parser("embed", help="hide a message in generated text")
    common(p)
    keyed(p)
    p.add_argument("--message-file", required=True, help="raw UTF-8 message, - for stdin")
    p.add_argument("--out", required=True)
    p.add_argument("--emit", choices=("tokens", "text"), default="tokens")
    p.add_argument("--trace", help="write the per-step gate trace as JSON lines")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("extract", help="recover a message from stego tokens or text")
    common(p)
    keyed(p)
    p.add_argument("--stego-file", required=True, help="token ids or text, - for stdin")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("verify", help="embed then extract and report stage-by-stage equality")
    common(p)
    keyed(p)
    p.add_argument("--message-file", required=True, help="raw UTF-8 message, - for stdin")
    p.add_argument("--receiver-config", help="extract with this config instead")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("sweep", help="payload and perplexity over an alpha x beta grid")
    common(p)
    keyed(p)
    p.add_argument("--messages", required=True, help="text file, one message per line")
    p.add_argument("--alphas", default="0.4,0.6,0.8")
    p.add_argument("--betas", default="1,2,3,4")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    return parser


def main(argv: Sequence[str] | None = None, env: Mapping[str, str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    env = os.environ if env is None else env
    try:
        return args.func(args, env)
    except CapacityExhaustedError as exc:
        print(f"error: capacity exhausted: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except (UsageError, ParameterError, OSError, UnicodeDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StegoError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CODEC


def run(
    argv: Sequence[str], stdin: bytes = b"", env: Mapping[str, str] | None = None
) -> tuple[bytes, bytes, int]:
    """Run in-process and capture output: ``(stdout, stderr, exit_code)``.

    ``env`` defaults to empty, not to ``os.environ``, so tests stay hermetic.
    """
    out, err = StringIO(), StringIO()
    saved = sys.stdin
    sys.stdin = TextIOWrapper(BytesIO(stdin), encoding="utf-8")
    try:
        with redirect_stdout(out), redirect_stderr(err):
            code = main(argv, env if env is not None else {})
    finally:
        sys.stdin = saved
    return out.getvalue().encode("utf-8"), err.getvalue().encode("utf-8"), code


if __name__ == "__main__":
    sys.exit(main())
