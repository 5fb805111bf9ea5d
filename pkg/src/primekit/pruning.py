"""Cue-based post-processing baselines: detection filtering and the two
segmentation pruning types (score masking vs relabeling)."""

from __future__ import annotations

import numpy as np

from .nets import Detection
from .priming import Cue
from .tensor import Tensor

__all__ = ["NEG_SENTINEL", "prune_detections", "prune_seg_type1", "prune_seg_type2"]

# most-negative finite double instead of -inf keeps downstream arithmetic NaN-free
NEG_SENTINEL = float(np.finfo(np.float64).min)


def prune_detections(dets: list[Detection], h: Cue) -> list[Detection]:
    """Keep detections whose class bit is set, preserving order."""
    n = len(h)
    for d in dets:
        if not 0 <= d.class_id < n:
            raise ValueError(f"detection class {d.class_id} out of range for cue length {n}")
    return [d for d in dets if h.bits[d.class_id]]


def _scores_array(scores) -> np.ndarray:
    arr = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected [C+1,H,W] scores, got shape {arr.shape}")
    return arr


def prune_seg_type1(scores, h: Cue) -> np.ndarray:
    """Mask score maps of cue-off foreground classes to the minimum
    representable value; background (channel 0) and cue-on channels are
    untouched. Raises the effective rank of the cued classes."""
    arr = _scores_array(scores).copy()
    if arr.shape[0] != len(h) + 1:
        raise ValueError(f"scores have {arr.shape[0]} channels, cue expects {len(h) + 1}")
    for c, bit in enumerate(h.bits):
        if not bit:
            arr[c + 1] = NEG_SENTINEL
    return arr


def prune_seg_type2(labels: np.ndarray, h: Cue) -> np.ndarray:
    """Relabel pixels of cue-off foreground classes to background. Raises
    precision of the cued classes; cannot raise their recall."""
    out = np.asarray(labels).copy()
    n = len(h)
    fg = (out != 0) & (out != 255)
    if fg.any() and int(out[fg].max()) > n:
        raise ValueError(f"label {int(out[fg].max())} out of range for cue length {n}")
    for c, bit in enumerate(h.bits):
        if not bit:
            out[out == c + 1] = 0
    return out
