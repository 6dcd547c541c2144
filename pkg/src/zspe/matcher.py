"""Coarse-to-fine correspondence search.

Coarse descriptors pair up candidate visible regions; fine descriptors inside
each region pair yield point correspondences. A dustbin row/column soaks up
points without a convincing partner.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .descriptor import HierarchicalCloud
from .geometry import GeometryError

DUSTBIN_SCORE = 0.0
TEMPERATURE = 0.1
MIN_CONFIDENCE = 0.01
DEFAULT_K = 256


@dataclass(frozen=True)
class RegionPair:
    model_region: int
    scene_region: int
    score: float


@dataclass(frozen=True)
class CorrespondenceSet:
    model_idx: np.ndarray
    scene_idx: np.ndarray
    confidence: np.ndarray
    model_region: np.ndarray
    scene_region: np.ndarray

    def __len__(self) -> int:
        return len(self.model_idx)

    @classmethod
    def empty(cls) -> "CorrespondenceSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, np.zeros(0), z, z)

    def pairs(self) -> set:
        return set(zip(self.model_idx.tolist(), self.scene_idx.tolist()))


def coarse_match(model: HierarchicalCloud, scene: HierarchicalCloud, k: int = DEFAULT_K) -> list[RegionPair]:
    """Top-``k`` coarse (model, scene) pairs by cosine similarity; ties keep index order."""
    if model.coarse_features is None or scene.coarse_features is None:
        raise GeometryError("coarse features missing")
    if k < 1:
        raise GeometryError("k must be >= 1")
    sim = model.coarse_features @ scene.coarse_features.T
    flat = sim.ravel()
    k = min(k, flat.size)
    order = np.argsort(-flat, kind="stable")[:k]
    n_scene = sim.shape[1]
    return [RegionPair(int(i // n_scene), int(i % n_scene), float(np.clip(flat[i], -1.0, 1.0)))
            for i in order]


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def match_block(f_model: np.ndarray, f_scene: np.ndarray, temperature: float = TEMPERATURE,
                dustbin: float = DUSTBIN_SCORE, min_confidence: float = MIN_CONFIDENCE):
    """Dual-softmax mutual-argmax matching of two feature blocks.

    Returns local (row, col, confidence) arrays.
    """
    m, n = len(f_model), len(f_scene)
    scores = np.full((m + 1, n + 1), dustbin, dtype=float)
    scores[:m, :n] = f_model @ f_scene.T
    logits = scores / temperature
    p_row = _softmax(logits, axis=1)
    p_col = _softmax(logits, axis=0)
    best_col = np.argmax(scores[:m], axis=1)
    best_row = np.argmax(scores[:, :n], axis=0)
    rows = np.flatnonzero(best_col < n)
    cols = best_col[rows]
    mutual = best_row[cols] == rows
    rows, cols = rows[mutual], cols[mutual]
    conf = p_row[rows, cols] * p_col[rows, cols]
    keep = conf > min_confidence
    return rows[keep], cols[keep], conf[keep]


def fine_match(model: HierarchicalCloud, scene: HierarchicalCloud, pairs: Sequence[RegionPair],
               temperature: float = TEMPERATURE, dustbin: float = DUSTBIN_SCORE,
               min_confidence: float = MIN_CONFIDENCE) -> CorrespondenceSet:
    """Point correspondences restricted to the given region pairs, sorted by
    (model index, scene index)."""
    if model.fine_features is None or scene.fine_features is None:
        raise GeometryError("fine features missing")
    seen = set()
    chunks = []
    for pair in pairs:
        key = (pair.model_region, pair.scene_region)
        if key in seen:
            continue
        seen.add(key)
        mi = model.region(pair.model_region)
        si = scene.region(pair.scene_region)
        if not len(mi) or not len(si):
            continue
        r, c, conf = match_block(model.fine_features[mi], scene.fine_features[si],
                                 temperature, dustbin, min_confidence)
        if len(r):
            chunks.append((mi[r], si[c], conf, np.full(len(r), key[0]), np.full(len(r), key[1])))
    if not chunks:
        return CorrespondenceSet.empty()
    mi, si, conf, mr, sr = (np.concatenate(x) for x in zip(*chunks))
    order = np.lexsort((si, mi))
    return CorrespondenceSet(mi[order].astype(np.int64), si[order].astype(np.int64), conf[order],
                             mr[order].astype(np.int64), sr[order].astype(np.int64))
