"""Ranking and MAP@R evaluation for cross-modal retrieval."""

import logging
from dataclasses import dataclass

import numpy as np

from .dataset import MULTI_LABEL, SINGLE_LABEL
from .errors import ConfigError, ValidationError

log = logging.getLogger(__name__)

METRICS = ("cosine", "dot", "euclidean")
I_Q = "image_query_text_db"
T_Q = "text_query_image_db"


def similarity(query_reps, db_reps, metric="cosine"):
    """``(n_query, n_db)`` similarity matrix between representation columns."""
    q = np.asarray(query_reps, dtype=np.float64)
    d = np.asarray(db_reps, dtype=np.float64)
    if q.shape[0] != d.shape[0]:
        raise ConfigError(f"query dim {q.shape[0]} != database dim {d.shape[0]}")
    if metric == "dot":
        return q.T @ d
    if metric == "euclidean":
        diff = q[:, :, None] - d[:, None, :]
        return -np.sqrt(np.einsum("knm,knm->nm", diff, diff))
    if metric != "cosine":
        raise ConfigError(f"unknown metric {metric!r}")
    dots = q.T @ d
    nq = np.linalg.norm(q, axis=0)
    nd = np.linalg.norm(d, axis=0)
    denom = np.outer(nq, nd)
    zero = denom == 0
    if zero.any():
        log.warning("zero-norm representation: using dot product for %d pairs", int(zero.sum()))
    return np.where(zero, dots, dots / np.where(zero, 1.0, denom))


def rank(query_reps, db_reps, metric="cosine"):
    """Database indices per query, by descending similarity, ties by ascending index."""
    s = similarity(query_reps, db_reps, metric)
    # stable sort on the negated scores keeps equal scores in index order
    return np.argsort(-s, axis=1, kind="stable")


def relevance(query_labels, db_labels, mode):
    """Relevance matrix ``(n_query, n_db)``: same class (single-label) or any shared tag."""
    q = np.asarray(query_labels, dtype=np.float64)
    d = np.asarray(db_labels, dtype=np.float64)
    if q.ndim == 1:
        q = q[:, None]
    if d.ndim == 1:
        d = d[:, None]
    if q.shape[0] != d.shape[0]:
        raise ValidationError("query and database labels have different dimensions")
    if mode == SINGLE_LABEL:
        if not (np.all(q.sum(axis=0) == 1) and np.all(d.sum(axis=0) == 1)):
            raise ValidationError("single-label relevance needs one-hot labels")
        return (np.argmax(q, axis=0)[:, None] == np.argmax(d, axis=0)[None, :]).astype(np.int8)
    if mode == MULTI_LABEL:
        return ((q.T @ d) >= 1).astype(np.int8)
    raise ValidationError(f"unknown label mode {mode!r}")


def average_precision(rel, cutoff=None):
    """AP over the first ``cutoff`` ranked items (all when ``None``); 0 if none is relevant."""
    rel = np.asarray(rel, dtype=np.float64).reshape(-1)
    if rel.size == 0:
        raise ValidationError("empty ranking")
    if cutoff is not None:
        if cutoff < 1:
            raise ValidationError("cutoff must be >= 1")
        rel = rel[:cutoff]
    hits = rel.sum()
    if hits == 0:
        return 0.0
    precision = np.cumsum(rel) / np.arange(1, rel.size + 1)
    return float(np.sum(precision * rel) / hits)


def parse_cutoff(c):
    if c is None or c == "all":
        return None
    return int(c)


def cutoff_name(c):
    return "all" if c is None else str(c)


@dataclass
class RetrievalRun:
    """Ranked database indices and their relevance bits, one row per query."""

    direction: str
    ranking: np.ndarray
    relevance: np.ndarray

    @classmethod
    def build(cls, direction, query_reps, db_reps, query_labels, db_labels, mode,
              metric="cosine"):
        order = rank(query_reps, db_reps, metric)
        rel = relevance(query_labels, db_labels, mode)
        ranked_rel = np.take_along_axis(rel, order, axis=1)
        return cls(direction, order, ranked_rel)

    def map_at(self, cutoff=None):
        if self.relevance.shape[0] == 0:
            raise ValidationError("retrieval run has no queries")
        return float(np.mean([average_precision(r, cutoff) for r in self.relevance]))


def map_report(runs, cutoffs=(50, None)):
    """MAP per direction and cutoff plus the two-direction average.

    ``runs`` maps a short direction key (``"I-Q"``, ``"T-Q"``) to a
    :class:`RetrievalRun`.  Returns
    ``{"I-Q": {"50": .., "all": ..}, "T-Q": {...}, "Avg": {...}}``.
    """
    if not runs:
        raise ValidationError("no retrieval runs")
    report = {}
    for key, run in runs.items():
        report[key] = {cutoff_name(c): run.map_at(c) for c in cutoffs}
    report["Avg"] = {
        cutoff_name(c): float(np.mean([report[k][cutoff_name(c)] for k in runs]))
        for c in cutoffs
    }
    return report


def evaluate(rep_x, rep_y, labels, mode, cutoffs=(50, None), metric="cosine"):
    """Both retrieval directions on a paired test set.

    Image queries (x) search the text database (y) and vice versa.
    """
    runs = {
        "I-Q": RetrievalRun.build(I_Q, rep_x, rep_y, labels, labels, mode, metric),
        "T-Q": RetrievalRun.build(T_Q, rep_y, rep_x, labels, labels, mode, metric),
    }
    return map_report(runs, cutoffs)


def format_table(report, title="Ours"):
    """Aligned text table in the shape: method | R=.. T-Q I-Q Avg | ..."""
    cutoffs = list(report["Avg"].keys())
    head = ["Method"]
    for c in cutoffs:
        head += [f"R={c} T-Q", f"R={c} I-Q", f"R={c} Avg"]
    row = [title]
    for c in cutoffs:
        row += [f"{report['T-Q'][c]:.3f}", f"{report['I-Q'][c]:.3f}", f"{report['Avg'][c]:.3f}"]
    widths = [max(len(a), len(b)) for a, b in zip(head, row)]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    return fmt.format(*head) + "\n" + fmt.format(*row) + "\n"
