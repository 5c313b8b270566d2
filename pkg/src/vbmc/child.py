"""Serve a built-in demo target over the child-process protocol.

Usage: ``python -m vbmc.child <demo> <dim>``
"""

import argparse

from .demos import DEMOS
from .target import serve


def main(argv=None):
    parser = argparse.ArgumentParser(prog="python -m vbmc.child")
    parser.add_argument("demo", choices=sorted(DEMOS))
    parser.add_argument("dim", type=int)
    args = parser.parse_args(argv)
    serve(DEMOS[args.demo](args.dim), args.dim)


if __name__ == "__main__":
    main()
