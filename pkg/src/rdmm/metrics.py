"""Evaluation measures for registered maps and label images."""

from __future__ import annotations

import numpy as np

from .exceptions import ShapeMismatchError
from .fields import interpolate_nearest, jacobian_determinant

__all__ = ["fold_measure", "dice", "dice_per_label", "warp_labels"]


def fold_measure(phi_inv, interior_only: bool = False):
    """Count and mass of nodes where the Jacobian determinant is negative.

    Returns
    -------
    count : int
        Number of folded nodes.
    mass : float
        ``|sum of det J over folded nodes| * cell_volume``.
    """
    det = jacobian_determinant(phi_inv)
    cell_volume = 1.0 / det.size
    if interior_only:
        det = det[(slice(1, -1),) * det.ndim]
    folded = det < 0
    mass = abs(float(np.sum(det[folded]))) * cell_volume
    return int(np.count_nonzero(folded)), mass


def dice(labels_a, labels_b, label_id) -> float:
    """Overlap ``2|A & B| / (|A| + |B|)`` of one label; 1.0 when both are empty."""
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    if labels_a.shape != labels_b.shape:
        raise ShapeMismatchError(f"grid mismatch: {labels_a.shape} vs {labels_b.shape}")
    a = labels_a == label_id
    b = labels_b == label_id
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def dice_per_label(labels_a, labels_b, labels=None) -> dict:
    """Dice for every non-zero label present in either map."""
    if labels is None:
        labels = np.union1d(np.unique(labels_a), np.unique(labels_b))
        labels = [int(x) for x in labels if x != 0]
    return {int(lab): dice(labels_a, labels_b, lab) for lab in labels}


def warp_labels(labels, phi_inv) -> np.ndarray:
    """Pull an integer label map through ``phi_inv`` with nearest-node sampling."""
    labels = np.asarray(labels)
    if labels.shape != phi_inv.shape[1:]:
        raise ShapeMismatchError(f"grid mismatch: {labels.shape} vs {phi_inv.shape[1:]}")
    return interpolate_nearest(labels, phi_inv)
