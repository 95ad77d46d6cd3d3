"""Full pipeline against the clustering baselines on a synthetic textured grid.

    python scripts/benchmark.py --side 64 --max-epochs 50
"""

import numpy as np

from _common import Timer, base_parser, prepared, synth
from texseg.errors import AllNoise
from texseg.evaluation import baseline_segment, emit_report, evaluate, report_lines
from texseg.pipeline import segment, to_facets
from texseg.trainer import TrainConfig


def main():
    args = base_parser(__doc__.splitlines()[0]).parse_args()
    mesh, gt = synth(args)
    with Timer() as t:
        prep = prepared(mesh, args)
    print(f"{len(prep.centers)} interior patches out of {mesh.facet_count} facets ({t.seconds:.1f}s)")

    runs = []
    with Timer() as t:
        pred = segment(prep, TrainConfig(max_epochs=args.max_epochs, seed=args.seed))
    runs.append(("full", evaluate(pred, gt), t.seconds))

    gt_inst = gt.labels[prep.centers]
    for method in ("kmeans2", "gmm2", "dbscan"):
        with Timer() as t:
            try:
                lab = baseline_segment(prep.features, method, gt=gt_inst, seed=args.seed)
            except AllNoise:
                lab = np.full(len(prep.centers), -1)
        runs.append((method, evaluate(to_facets(prep, lab), gt), t.seconds))

    rep = emit_report(runs)
    print(report_lines(rep) if args.json else rep["table"])


if __name__ == "__main__":
    main()
