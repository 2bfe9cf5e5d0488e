"""Run the inference service: ``rankstego-serve --model m.ngm --port 8000``."""

from __future__ import annotations

import argparse
import sys
from typing import Sequence

from ..lm import NgramModel, reference_model
from .app import create_app


def main(argv: Sequence[str] | None = None) -> int:
    import uvicorn

    parser = argparse.ArgumentParser(prog="rankstego-serve", description="Serve a model over HTTP.")
    parser.add_argument("--model", help="NGM1 model file (default: bundled reference model)")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument("--top-m", type=int, help="list only the M most likely tokens per answer")
    args = parser.parse_args(argv)
    model = reference_model() if args.model is None else NgramModel.load(args.model)
    uvicorn.run(create_app(model, top_m=args.top_m), host=args.host, port=args.port)
    return 0


if __name__ == "__main__":
    sys.exit(main())
