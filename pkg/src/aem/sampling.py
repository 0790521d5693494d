"""Effect-frame selection: rank frames by semantic relevance and visual clarity."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass
class FrameScores:
    relevance: np.ndarray
    clarity: np.ndarray
    combined: np.ndarray
    selected: int

    @property
    def distribution(self) -> np.ndarray:
        """``combined`` normalised to sum to one; the frame-sampling probability."""
        return self.combined / self.combined.sum()


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def semantic_relevance(X: np.ndarray, descriptions: np.ndarray) -> np.ndarray:
    """Softmax over frames of the mean cosine between each frame and the descriptions."""
    X = np.asarray(X, dtype=np.float64)
    D = np.atleast_2d(np.asarray(descriptions, dtype=np.float64))
    if D.shape[0] < 1:
        raise ValueError("need at least one description")
    norms = np.maximum(np.linalg.norm(X, axis=1, keepdims=True), 1e-12)
    dn = D / np.maximum(np.linalg.norm(D, axis=1, keepdims=True), 1e-12)
    mean_cos = ((X / norms) @ dn.T).mean(axis=1)
    return _softmax(mean_cos)


def laplacian_variance(patch: np.ndarray) -> float:
    """Population variance of the valid-padded 3x3 Laplacian response."""
    p = np.asarray(patch, dtype=np.float64)
    h, w = p.shape
    resp = (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] - 4.0 * p[1:-1, 1:-1])
    assert resp.shape == (h - 2, w - 2)
    return float(resp.var())


def clarity_from_raw(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    p5, p95 = np.percentile(raw, [5, 95])  # linear interpolation between order statistics
    if p95 - p5 < 1e-12:
        return np.full(raw.shape, 0.5)
    return np.clip((raw - p5) / (p95 - p5), 0.0, 1.0)


def visual_clarity(patches) -> np.ndarray:
    if len(patches) < 1:
        raise ValueError("need at least one patch")
    return clarity_from_raw([laplacian_variance(p) for p in patches])


def combine(relevance: np.ndarray, clarity: np.ndarray) -> FrameScores:
    combined = (relevance + clarity) / 2.0
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return FrameScores(relevance, clarity, combined, int(np.argmax(combined)))


def select_effect_frame(X, patches, descriptions) -> FrameScores:
    X = np.asarray(X)
    if X.shape[0] == 0:
        raise ValueError("cannot select a frame from an empty segment")
    if len(patches) != X.shape[0]:
        raise ValueError(f"{X.shape[0]} frames but {len(patches)} patches")
    return combine(semantic_relevance(X, descriptions), visual_clarity(patches))


def last_frame_baseline(segment) -> int:
    T = segment if isinstance(segment, int) else segment.T
    if T < 1:
        raise ValueError("empty segment")
    return T - 1


def sampler_accuracy(dataset, split: str = "test", normal_only: bool = True) -> dict:
    """Fraction of segments where each sampler hits the simulator's effect frame."""
    hits_ranked = hits_last = n = 0
    desc = {a: dataset.descriptions(a) for a in dataset.spec.actions}
    for s in dataset.splits[split]:
        if normal_only and s.mistake:
            continue
        n += 1
        fs = select_effect_frame(s.frames, s.patches, desc[s.action])
        hits_ranked += fs.selected == s.gt_effect_index
        hits_last += last_frame_baseline(s) == s.gt_effect_index
    return {"segments": n, "ranked": hits_ranked / max(n, 1), "last_frame": hits_last / max(n, 1)}


def sample_effect_frame(segment, descriptions, sampler: str = "ranked") -> int:
    """Index of the effect frame chosen by ``sampler`` ("ranked" or "last_frame")."""
    if sampler == "last_frame":
        return last_frame_baseline(segment)
    if sampler != "ranked":
        raise ValueError(f"unknown sampler {sampler!r}")
    return select_effect_frame(segment.frames, segment.patches, descriptions).selected
