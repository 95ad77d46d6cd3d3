"""Shared setup for the experiment scripts."""

import argparse
import time

from texseg.evaluation import SynthSpec, synth_textured_mesh
from texseg.patches import PatchConfig
from texseg.pipeline import prepare


def base_parser(description):
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--side", type=int, default=64, help="synthetic grid side (vertices)")
    p.add_argument("--pattern", default="sine", choices=["sine", "bumps"])
    p.add_argument("--mask", default="half", choices=["half", "disc", "band"])
    p.add_argument("--grid", type=int, default=24, help="patch grid side n")
    p.add_argument("--max-epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="print JSON lines instead of a table")
    return p


def synth(args):
    return synth_textured_mesh(SynthSpec(side=args.side, pattern=args.pattern, mask=args.mask))


def prepared(mesh, args):
    prep = prepare(mesh, PatchConfig(n=args.grid))
    if not len(prep.centers):
        raise SystemExit(f"no interior patches for grid {args.grid}; use a larger --side")
    return prep


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0
