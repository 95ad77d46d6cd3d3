"""Per-facet label state and the ``facet_id,label`` CSV format."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import MalformedLine

log = logging.getLogger(__name__)

VALID = (-1, 0, 1)


@dataclass(eq=False)
class LabelState:
    """Labels (1 texture, 0 non-texture, -1 excluded) plus training history."""

    labels: np.ndarray
    history: list = field(default_factory=list)
    iteration: int = 0
    audit: dict = field(default_factory=dict)
    trace: dict = field(default_factory=dict)
    models: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)

    def __len__(self):
        return len(self.labels)

    def counts(self) -> dict:
        lab = self.labels
        return {"texture": int((lab == 1).sum()), "non_texture": int((lab == 0).sum()),
                "excluded": int((lab == -1).sum())}


def _as_array(labels) -> np.ndarray:
    return np.asarray(getattr(labels, "labels", labels), dtype=np.int8)


def write_labels(labels, path) -> None:
    lab = _as_array(labels)
    with open(path, "w", encoding="ascii") as fh:
        fh.writelines(f"{i},{int(v)}\n" for i, v in enumerate(lab.tolist()))


def read_labels(path) -> LabelState:
    """Read a label CSV; facet ids must cover ``0..N-1`` exactly once."""
    pairs = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise MalformedLine(f"expected 'facet_id,label', got {line!r}", lineno, path)
            try:
                fid, val = int(parts[0]), int(parts[1])
            except ValueError:
                raise MalformedLine(f"non-integer field in {line!r}", lineno, path)
            if val not in VALID:
                raise MalformedLine(f"label {val} not in {{0, 1, -1}}", lineno, path)
            if fid < 0 or fid in pairs:
                raise MalformedLine(f"bad or duplicate facet id {fid}", lineno, path)
            pairs[fid] = val
    if not pairs:
        log.warning("%s: no labels", path)
        return LabelState(np.zeros(0, dtype=np.int8))
    n = max(pairs) + 1
    if len(pairs) != n:
        missing = next(i for i in range(n) if i not in pairs)
        raise MalformedLine(f"facet id {missing} missing", None, path)
    lab = np.empty(n, dtype=np.int8)
    for k, v in pairs.items():
        lab[k] = v
    return LabelState(lab)
