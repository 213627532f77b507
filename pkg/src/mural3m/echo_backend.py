"""Reference external inpainting client: echoes every tile back unchanged.

This is the conformance template for external backend authors. It speaks
the wire protocol purely with the stdlib and deliberately shares no code
with the in-package codec, so the two sides cross-check each other.

    python -m mural3m.echo_backend [--mode echo]

Fault-injection modes for protocol tests:
    echo        answer each request with the request's tile (default)
    wrong-magic answer with a corrupted response magic
    truncate    answer with half a response body, then exit
    wrong-dims  answer with swapped-off-by-one dimensions
    sleep       consume the request, then never answer
    die         consume the request, then exit abruptly
"""

from __future__ import annotations

import argparse
import os
import struct
import sys
import time

REQ_HEADER = struct.Struct("<4sHHHBHB")
RESP_HEADER = struct.Struct("<4sHH")
REQ_MAGIC = b"M3MI"
RESP_MAGIC = b"M3MO"


def _read_exact(stream, n: int) -> bytes | None:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            return None
        buf.extend(chunk)
    return bytes(buf)


def serve(mode: str) -> int:
    stdin = sys.stdin.buffer
    stdout = sys.stdout.buffer
    while True:
        header = _read_exact(stdin, REQ_HEADER.size)
        if header is None:
            return 0  # clean shutdown between rounds
        magic, version, width, height, band, scale_milli, perspective = (
            REQ_HEADER.unpack(header)
        )
        if magic != REQ_MAGIC:
            sys.stderr.write(f"echo-backend: bad request magic {magic!r}\n")
            return 3
        if version != 1:
            sys.stderr.write(f"echo-backend: unsupported version {version}\n")
            return 3
        tile = _read_exact(stdin, width * height * 3 * 4)
        mask = _read_exact(stdin, width * height)
        if tile is None or mask is None:
            sys.stderr.write("echo-backend: truncated request\n")
            return 3

        if mode == "sleep":
            time.sleep(3600.0)
            return 0
        if mode == "die":
            os._exit(9)
        if mode == "wrong-magic":
            stdout.write(b"XXXX" + RESP_HEADER.pack(RESP_MAGIC, width, height)[4:])
            stdout.write(tile)
        elif mode == "wrong-dims":
            stdout.write(RESP_HEADER.pack(RESP_MAGIC, width + 1, height))
            stdout.write(tile)
        elif mode == "truncate":
            stdout.write(RESP_HEADER.pack(RESP_MAGIC, width, height))
            stdout.write(tile[: len(tile) // 2])
            stdout.flush()
            return 0
        else:
            stdout.write(RESP_HEADER.pack(RESP_MAGIC, width, height))
            stdout.write(tile)
        stdout.flush()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument(
        "--mode",
        default="echo",
        choices=["echo", "wrong-magic", "truncate", "wrong-dims", "sleep", "die"],
    )
    args = parser.parse_args(argv)
    try:
        return serve(args.mode)
    except BrokenPipeError:
        return 0


if __name__ == "__main__":
    sys.exit(main())
