"""Pure numpy version of the scan kernels in ``_scan.pyx``.

Row scores are float64 sums along each row (numpy's pairwise summation over a
contiguous row), so as in the compiled kernel a row's score does not depend on
its position. Results agree with the compiled kernel to rounding.
"""

from __future__ import annotations

import numpy as np


def _block_scores(block: np.ndarray, query: np.ndarray) -> np.ndarray:
    return (block.astype(np.float64) * query).sum(axis=1)


def scan_scores(vectors: np.ndarray, query: np.ndarray, out: np.ndarray) -> None:
    if query.shape[0] != vectors.shape[1] or out.shape[0] != vectors.shape[0]:
        raise ValueError("scan_scores: shape mismatch")
    out[:] = _block_scores(vectors, query)


def _best(pos: np.ndarray, scores: np.ndarray, ids: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    if pos.size > k:
        # everything strictly above the k-th best score survives, ties resolved by id below
        kth = np.partition(scores, pos.size - k)[pos.size - k]
        keep = scores >= kth
        pos, scores = pos[keep], scores[keep]
    order = np.lexsort((ids[pos], -scores))[:k]
    return pos[order], scores[order]


def scan_top_k(vectors: np.ndarray, ids: np.ndarray, query: np.ndarray, k: int,
               block: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Blocked scan keeping the best ``k`` by (score desc, id asc)."""
    n, d = vectors.shape
    if query.shape[0] != d or ids.shape[0] != n:
        raise ValueError("scan_top_k: shape mismatch")
    k = min(k, n)
    if k <= 0:
        return np.empty(0, dtype=np.int64), np.empty(0)
    best_pos = np.empty(0, dtype=np.int64)
    best_scores = np.empty(0)
    for start in range(0, n, block):
        scores = _block_scores(vectors[start:start + block], query)
        pos = np.arange(start, start + scores.size, dtype=np.int64)
        best_pos, best_scores = _best(np.concatenate([best_pos, pos]), np.concatenate([best_scores, scores]), ids, k)
    return best_pos, best_scores
