"""Every ablation variant on one synthetic mesh, sharing the same features."""

from _common import Timer, base_parser, prepared, synth
from texseg.evaluation import emit_report, evaluate, report_lines
from texseg.pipeline import segment
from texseg.trainer import VARIANTS, TrainConfig


def main():
    p = base_parser(__doc__)
    p.add_argument("--variants", default=",".join(VARIANTS))
    args = p.parse_args()
    mesh, gt = synth(args)
    prep = prepared(mesh, args)
    cfg = TrainConfig(max_epochs=args.max_epochs, seed=args.seed)
    runs = []
    for name in args.variants.split(","):
        with Timer() as t:
            pred = segment(prep, cfg, variant=name)
        runs.append((name, evaluate(pred, gt), t.seconds))
        print(f"{name}: {t.seconds:.1f}s, {pred.iteration} epochs", flush=True)
    rep = emit_report(runs)
    print(report_lines(rep) if args.json else rep["table"])


if __name__ == "__main__":
    main()
