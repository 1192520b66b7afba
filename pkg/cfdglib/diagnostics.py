# -*- coding: utf-8 -*-
"""
Distribution-shift diagnostics and learning-curve bookkeeping.

Jensen-Shannon divergence is estimated per dimension on a shared uniform
histogram grid and averaged over dimensions, in bits.
"""
import csv
import math
import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import rel_entr

from cfdglib.envsuite import TransitionBatch
from cfdglib.lab_def import InvalidInputError, LabIOError

DEFAULT_BINS = 20
CURVE_HEADER = ['step', 'return', 'normalized_score', 'loss_q', 'loss_pi', 'loss_v']
DIVERGENCE_HEADER = ['quantity', 'pair', 'value']

QUANTITIES = ('State', 'Action', 'Transition')
PAIRS = ('off_vs_on', 'syn_on_vs_on', 'syn_off_vs_on', 'syn_all_vs_on')


# -----------------------------------------------------
# Jensen-Shannon divergence
# -----------------------------------------------------

@dataclass
class HistogramGrid:
    """Bin edges per dimension; bins are half-open except the last."""
    edges: List[np.ndarray]

    def __post_init__(self):
        for k, e in enumerate(self.edges):
            if e.ndim != 1 or e.shape[0] < 2 or np.any(np.diff(e) <= 0):
                raise InvalidInputError(f"dimension {k}: edges must be strictly increasing")

    @property
    def dims(self) -> int:
        return len(self.edges)

    def check_covers(self, x: np.ndarray, name: str):
        """Every sample must fall inside the outer edges of every dimension."""
        for k, e in enumerate(self.edges):
            outside = int(np.count_nonzero((x[:, k] < e[0]) | (x[:, k] > e[-1])))
            if outside:
                raise InvalidInputError(f"dimension {k}: {outside} samples of {name} fall outside the grid "
                                        f"[{e[0]!r}, {e[-1]!r}]")


def _as_samples(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[0] == 0:
        raise InvalidInputError("sample set must be a nonempty list of vectors")
    return x


def build_grid(samples_p, samples_q, bins: int = DEFAULT_BINS) -> HistogramGrid:
    """Uniform edges over the pooled min/max of both sets, per dimension."""
    p, q = _as_samples(samples_p), _as_samples(samples_q)
    if p.shape[1] != q.shape[1]:
        raise InvalidInputError(f"dimension mismatch: {p.shape[1]} vs {q.shape[1]}")
    if bins < 1:
        raise InvalidInputError(f"bins must be >= 1, got {bins}")
    pooled = np.concatenate([p, q])
    edges = []
    for lo, hi in zip(pooled.min(axis=0), pooled.max(axis=0)):
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        edges.append(np.linspace(lo, hi, bins + 1))
    return HistogramGrid(edges)


def js_divergence_from_histograms(p_counts, q_counts) -> float:
    """JS divergence in bits between two (unnormalized) histograms."""
    p = np.asarray(p_counts, dtype=np.float64)
    q = np.asarray(q_counts, dtype=np.float64)
    if p.shape != q.shape or p.sum() <= 0 or q.sum() <= 0:
        raise InvalidInputError("histograms must have equal shape and positive mass")
    p = p / p.sum()
    q = q / q.sum()
    m = 0.5 * (p + q)
    js = (0.5 * np.sum(rel_entr(p, m)) + 0.5 * np.sum(rel_entr(q, m))) / math.log(2.0)
    return float(min(max(js, 0.0), 1.0))


def _canonical_subsample(x: np.ndarray, size: int, seed: int) -> np.ndarray:
    """Order-independent subsample: sort rows, then pick `size` of them."""
    ordered = x[np.lexsort(x.T[::-1])]
    if ordered.shape[0] == size:
        return ordered
    idx = np.random.default_rng(seed).choice(ordered.shape[0], size=size, replace=False)
    return ordered[np.sort(idx)]


def js_divergence(samples_p, samples_q, grid: Optional[HistogramGrid] = None, bins: int = DEFAULT_BINS,
                  seed: int = 0) -> float:
    """
    Mean per-dimension JS divergence between two sample sets.

    The larger set is subsampled (seeded) to the size of the smaller one.

    Args:
        samples_p: (n, d) samples
        samples_q: (m, d) samples
        grid: Shared histogram grid; built from the pooled range if None
        bins: Bins per dimension when the grid is built here
        seed: Subsampling seed

    Returns:
        Divergence in [0, 1]

    Raises:
        InvalidInputError: On a dimension mismatch or when a sample falls outside the grid
    """
    p, q = _as_samples(samples_p), _as_samples(samples_q)
    if p.shape[1] != q.shape[1]:
        raise InvalidInputError(f"dimension mismatch: {p.shape[1]} vs {q.shape[1]}")
    if grid is None:
        grid = build_grid(p, q, bins)
    if grid.dims != p.shape[1]:
        raise InvalidInputError(f"grid has {grid.dims} dimensions, samples have {p.shape[1]}")
    grid.check_covers(p, 'samples_p')
    grid.check_covers(q, 'samples_q')
    size = min(p.shape[0], q.shape[0])
    p = _canonical_subsample(p, size, seed)
    q = _canonical_subsample(q, size, seed)
    values = []
    for k, edges in enumerate(grid.edges):
        hp, _ = np.histogram(p[:, k], bins=edges)
        hq, _ = np.histogram(q[:, k], bins=edges)
        values.append(js_divergence_from_histograms(hp, hq))
    return float(np.mean(values))


@dataclass(frozen=True)
class DivergenceEntry:
    quantity: str
    pair: str
    value: float


def divergence_report(buffers, codec, bins: int = DEFAULT_BINS, seed: int = 0) -> List[DivergenceEntry]:
    """
    JS divergence of each buffer against the online buffer.

    State, Action and Transition (encoded) quantities for the pairs
    off_vs_on, syn_on_vs_on, syn_off_vs_on and syn_all_vs_on. Pairs whose
    synthetic buffer is empty are left out.
    """
    online = buffers.d_on.contents()
    offline = buffers.d_off.contents()
    if len(online) == 0 or len(offline) == 0:
        raise InvalidInputError("divergence report needs nonempty online and offline buffers")
    syn_on = buffers.d_on_syn.contents()
    syn_off = buffers.d_off_syn.contents()

    candidates = [('off_vs_on', offline), ('syn_on_vs_on', syn_on), ('syn_off_vs_on', syn_off)]
    syn_parts = [b for b in (syn_on, syn_off) if len(b) > 0]
    if syn_parts:
        candidates.append(('syn_all_vs_on', TransitionBatch.concatenate(syn_parts)))

    views = {
        'State': lambda b: b.states,
        'Action': lambda b: b.actions,
        'Transition': codec.encode,
    }
    entries = []
    for quantity in QUANTITIES:
        ref = views[quantity](online)
        for pair, batch in candidates:
            if len(batch) == 0:
                continue
            entries.append(DivergenceEntry(quantity, pair, js_divergence(views[quantity](batch), ref, bins=bins,
                                                                         seed=seed)))
    return entries


def write_divergence_csv(path: str, entries: Sequence[DivergenceEntry]):
    rows = [[e.quantity, e.pair, repr(float(e.value))] for e in entries]
    write_table(path, DIVERGENCE_HEADER, rows)


def read_divergence_csv(path: str) -> List[DivergenceEntry]:
    return [DivergenceEntry(r['quantity'], r['pair'], float(r['value'])) for r in _read_csv(path, DIVERGENCE_HEADER)]


# -----------------------------------------------------
# Learning curves
# -----------------------------------------------------

@dataclass(frozen=True)
class CurveRow:
    step: int
    ret: float
    normalized_score: float
    loss_q: float
    loss_pi: float
    loss_v: float


class LossTracker:
    """Running means of the training losses between evaluation rows."""

    KEYS = ('loss_q', 'loss_pi', 'loss_v')

    def __init__(self):
        self.reset()

    def reset(self):
        self._sums = {k: 0.0 for k in self.KEYS}
        self._count = 0

    def add(self, diagnostics: Dict[str, float]):
        for k in self.KEYS:
            self._sums[k] += diagnostics[k]
        self._count += 1

    def flush(self) -> Dict[str, float]:
        if self._count == 0:
            means = {k: float('nan') for k in self.KEYS}
        else:
            means = {k: v / self._count for k, v in self._sums.items()}
        self.reset()
        return means


def write_curve_csv(path: str, rows: Iterable[CurveRow]):
    out = [[str(r.step), repr(float(r.ret)), repr(float(r.normalized_score)), repr(float(r.loss_q)),
            repr(float(r.loss_pi)), repr(float(r.loss_v))] for r in rows]
    write_table(path, CURVE_HEADER, out)


def read_curve_csv(path: str) -> List[CurveRow]:
    return [CurveRow(int(r['step']), float(r['return']), float(r['normalized_score']), float(r['loss_q']),
                     float(r['loss_pi']), float(r['loss_v'])) for r in _read_csv(path, CURVE_HEADER)]


@dataclass
class CurveSeries:
    steps: np.ndarray
    values: np.ndarray

    @classmethod
    def from_rows(cls, rows: Sequence[CurveRow], field: str = 'normalized_score') -> 'CurveSeries':
        return cls(np.array([r.step for r in rows], dtype=np.int64),
                   np.array([getattr(r, field) for r in rows], dtype=np.float64))


@dataclass
class AggregateCurve:
    steps: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    n_runs: int


def aggregate_curves(runs: Sequence[CurveSeries]) -> AggregateCurve:
    """
    Pointwise mean and population standard deviation.

    Raises:
        InvalidInputError: No runs, or runs with different evaluation steps
    """
    if not runs:
        raise InvalidInputError("no curves to aggregate")
    steps = runs[0].steps
    for k, run in enumerate(runs[1:], start=1):
        if run.steps.shape != steps.shape or np.any(run.steps != steps):
            raise InvalidInputError(f"run {k} has a different evaluation cadence")
    values = np.stack([run.values for run in runs])
    return AggregateCurve(steps.copy(), values.mean(axis=0), values.std(axis=0), len(runs))


def summarize(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and population std."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise InvalidInputError("nothing to summarize")
    return float(arr.mean()), float(arr.std())


# -----------------------------------------------------
# CSV helpers
# -----------------------------------------------------

def write_table(path: str, header: List[str], rows: List[List[str]]):
    try:
        directory = os.path.dirname(path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(header)
            writer.writerows(rows)
    except OSError as e:
        raise LabIOError(f"cannot write {path}: {e}")


def _read_csv(path: str, header: List[str]) -> List[Dict[str, str]]:
    try:
        with open(path, 'r', newline='', encoding='utf-8') as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != header:
                raise InvalidInputError(f"{path}: expected header {','.join(header)}, got {reader.fieldnames}")
            return list(reader)
    except OSError as e:
        raise LabIOError(f"cannot read {path}: {e}")
