"""Sensitivity to the patch grid side and to the descriptor channels.

Larger grids need larger meshes: a facet only gets a patch when n - 1
complete rings fit around it.
"""

import itertools

from _common import Timer, base_parser, synth
from texseg.evaluation import emit_report, evaluate, report_lines
from texseg.patches import DescriptorKind, PatchConfig
from texseg.pipeline import prepare, segment
from texseg.trainer import TrainConfig


def channel_sets(names):
    kinds = [DescriptorKind.parse(n) for n in names.split(",")]
    for r in range(1, len(kinds) + 1):
        yield from itertools.combinations(kinds, r)


def main():
    p = base_parser(__doc__.splitlines()[0])
    p.add_argument("--grids", default="8,16,24")
    p.add_argument("--channels", default="SV,LD,Cur", help="every non-empty subset is tried")
    p.add_argument("--study", choices=["grid", "channels", "both"], default="both")
    args = p.parse_args()
    mesh, gt = synth(args)
    cfg = TrainConfig(max_epochs=args.max_epochs, seed=args.seed)

    configs = []
    if args.study in ("grid", "both"):
        configs += [(f"n={n}", PatchConfig(n=int(n))) for n in args.grids.split(",")]
    if args.study in ("channels", "both"):
        configs += [("+".join(k.value for k in ch), PatchConfig(n=args.grid, channel_ids=ch))
                    for ch in channel_sets(args.channels)]

    runs = []
    for name, pcfg in configs:
        with Timer() as t:
            prep = prepare(mesh, pcfg)
            if not len(prep.centers):
                print(f"{name}: no interior patches, skipped")
                continue
            pred = segment(prep, cfg)
        runs.append((name, evaluate(pred, gt), t.seconds))
        print(f"{name}: {len(prep.centers)} patches, {t.seconds:.1f}s", flush=True)
    if runs:
        rep = emit_report(runs)
        print(report_lines(rep) if args.json else rep["table"])


if __name__ == "__main__":
    main()
