"""Command-line launcher: one model checkpoint per server instance."""

from __future__ import annotations

import argparse
import sys

import uvicorn

from .app import build_app
from .service import AdapterConfig, ModelService


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="logprob-adapter",
        description="Serve a transformer checkpoint on the logprob wire protocol.",
    )
    parser.add_argument("--model", required=True,
                        help="checkpoint directory or hub identifier")
    parser.add_argument("--device", default="cpu", help="torch device")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8601)
    parser.add_argument("--max-context-tokens", type=int, default=None,
                        dest="max_context_tokens",
                        help="token limit; defaults to the model maximum")
    parser.add_argument("--max-context-chars", type=int, default=1_000_000,
                        dest="max_context_chars",
                        help="character guard applied before tokenization")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = AdapterConfig(
        model=args.model,
        device=args.device,
        max_context_tokens=args.max_context_tokens,
        max_context_chars=args.max_context_chars,
        host=args.host,
        port=args.port,
    )
    service = ModelService(config)
    print(f"serving {service.name!r} (vocab {service.vocab_size}) "
          f"on http://{config.host}:{config.port}", file=sys.stderr)
    uvicorn.run(build_app(service), host=config.host, port=config.port,
                log_level="warning")
    return 0


if __name__ == "__main__":
    sys.exit(main())
