"""Bounded, contractive divergences on probability rows.

Three kinds are supported, all symmetric, zero iff the arguments agree, and
contractive under stochastic post-processing (the data-processing
inequality), which is what makes them usable as distinguishability measures:

* ``tv``        total variation, 0.5 * sum |p_i - q_i|, range [0, 1]
* ``js``        Jensen-Shannon with base-2 logarithms, range [0, 1]
* ``hellinger`` 0.5 * || sqrt(p) - sqrt(q) ||_2, range [0, sqrt(2)/2]

The Hellinger coefficient is deliberately 1/2 (not the conventional
1/sqrt(2)), so its maximum over disjoint supports is sqrt(2)/2.

Matrix variants average the per-row divergence, which preserves the
data-processing property row-wise.
"""

import numpy as np

KINDS = ("tv", "js", "hellinger")

_ROW_SUM_TOL = 1e-6


def _as_prob_rows(a, name: str) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if np.any(rows < -1e-12):
        raise ValueError(f"{name} has negative entries")
    sums = rows.sum(axis=1)
    if np.any(np.abs(sums - 1.0) > _ROW_SUM_TOL):
        worst = float(np.max(np.abs(sums - 1.0)))
        raise ValueError(f"{name} rows are not normalized (max deviation {worst:.3e})")
    return np.clip(rows, 0.0, None) / sums[:, None]


def _row_values(kind: str, p: np.ndarray, q: np.ndarray) -> np.ndarray:
    if kind == "tv":
        return 0.5 * np.abs(p - q).sum(axis=1)
    if kind == "hellinger":
        diff = np.sqrt(p) - np.sqrt(q)
        return 0.5 * np.sqrt((diff * diff).sum(axis=1))
    if kind == "js":
        m = 0.5 * (p + q)
        # m vanishes only where both p and q do, so the ratios below are
        # evaluated on strictly positive entries and JS is always finite.
        with np.errstate(divide="ignore", invalid="ignore"):
            term_p = np.where(p > 0.0, p * np.log2(np.where(p > 0.0, p, 1.0) / np.where(m > 0.0, m, 1.0)), 0.0)
            term_q = np.where(q > 0.0, q * np.log2(np.where(q > 0.0, q, 1.0) / np.where(m > 0.0, m, 1.0)), 0.0)
        return 0.5 * term_p.sum(axis=1) + 0.5 * term_q.sum(axis=1)
    raise ValueError(f"unknown divergence kind: {kind!r}")


def div_row(kind: str, p, q) -> float:
    """Divergence between two probability vectors.

    Inputs whose sums deviate from 1 by less than 1e-6 are renormalized;
    larger deviations raise, so drift does not silently mask bugs.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    pr = _as_prob_rows(p, "p")
    qr = _as_prob_rows(q, "q")
    return float(_row_values(kind, pr, qr)[0])


def _unwrap(predictions):
    probs = getattr(predictions, "probs", predictions)
    probe_id = getattr(predictions, "probe_id", None)
    return np.asarray(probs, dtype=np.float64), probe_id


def div_avg(kind: str, predictions_p, predictions_q) -> float:
    """Mean per-row divergence between two prediction matrices.

    Accepts raw N x C arrays or ProbePredictions; when both sides carry a
    probe id the ids must agree.
    """
    p, pid = _unwrap(predictions_p)
    q, qid = _unwrap(predictions_q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    if pid is not None and qid is not None and pid != qid:
        raise ValueError(f"probe mismatch: {pid!r} vs {qid!r}")
    pr = _as_prob_rows(p, "p")
    qr = _as_prob_rows(q, "q")
    return float(_row_values(kind, pr, qr).mean())
