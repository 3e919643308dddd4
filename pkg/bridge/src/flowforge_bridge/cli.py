"""Command line entry point for the bridge server.

Usage:

    bridge --listen 127.0.0.1:7455 --model anchor-flow --device cpu

The server prints ``listening on HOST:PORT`` once the socket is bound
(useful with port 0, where the OS picks a free port) and then serves
one connection at a time until a client sends ``shutdown``.
"""

from __future__ import annotations

import argparse
import sys

from .codec import DctCodec
from .errors import BridgeError
from .models import load_model
from .server import BridgeServer

__all__ = ["build_parser", "entrypoint"]


def _listen_addr(text: str) -> tuple[str, int]:
    host, sep, port_text = text.rpartition(":")
    if not sep or not host:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}")
    try:
        port = int(port_text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"port must be an integer, got {port_text!r}")
    if not 0 <= port <= 65535:
        raise argparse.ArgumentTypeError(f"port must be in [0, 65535], got {port}")
    return host, port


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bridge",
        description="Serve a velocity model and image codec over the framed JSON protocol.",
    )
    parser.add_argument(
        "--listen",
        type=_listen_addr,
        default=("127.0.0.1", 0),
        metavar="HOST:PORT",
        help="address to bind; port 0 picks a free port (default: 127.0.0.1:0)",
    )
    parser.add_argument(
        "--model",
        default="anchor-flow",
        help="built-in model name or 'module:factory' plugin path (default: anchor-flow)",
    )
    parser.add_argument(
        "--device",
        default="cpu",
        help="device handed to the model factory (default: cpu)",
    )
    parser.add_argument(
        "--luma-coeffs",
        type=int,
        default=10,
        metavar="N",
        help="block coefficients kept for the brightness channel (default: 10)",
    )
    parser.add_argument(
        "--chroma-coeffs",
        type=int,
        default=3,
        metavar="N",
        help="block coefficients kept per opponent-color channel (default: 3)",
    )
    return parser


def entrypoint(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    host, port = args.listen
    try:
        codec = DctCodec(n_luma=args.luma_coeffs, n_chroma=args.chroma_coeffs)
        model = load_model(args.model, codec.latent_channels, args.device)
        server = BridgeServer(model, codec, host=host, port=port)
    except BridgeError as exc:
        print(f"bridge: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"bridge: cannot bind {host}:{port}: {exc}", file=sys.stderr)
        return 2
    bound_host, bound_port = server.address[:2]
    print(f"listening on {bound_host}:{bound_port}", flush=True)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    sys.exit(entrypoint())
