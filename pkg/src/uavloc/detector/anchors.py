"""Anchor grid, residual box coding, and IoU-based target assignment."""

from dataclasses import dataclass

import numpy as np

from ..geometry import Cuboid, bev_iou_matrix

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
# IoUs within this relative distance of a truth's best count as tied
TIE_RTOL = 1e-9


def make_anchors(grid, net):
    """Anchors for every feature-map cell, shape (H' * W' * A, 7).

    Ordering is row-major over the feature map, then over the anchor yaws, which
    matches how the head's outputs are flattened.
    """
    f = grid.ds_factor
    h, w = grid.y_n // f, grid.x_n // f
    cx = grid.x_min + (np.arange(w) + 0.5) * grid.x_step * f
    cy = grid.y_min + (np.arange(h) + 0.5) * grid.y_step * f
    yaws = np.asarray(net.anchor_yaws, dtype=np.float64)
    a = len(yaws)
    out = np.empty((h, w, a, 7))
    out[..., 0] = cx[None, :, None]
    out[..., 1] = cy[:, None, None]
    out[..., 2] = net.anchor_z
    out[..., 3:6] = net.anchor_size
    out[..., 6] = yaws[None, None, :]
    return out.reshape(-1, 7)


def encode_boxes(boxes, anchors):
    """Residuals ``(dx, dy, dz, dl, dw, dh, dtheta)`` of ``boxes`` w.r.t. ``anchors``.

    Centers are normalised by the anchor's BEV diagonal (x, y) and height (z);
    sizes are log ratios; yaw is a plain difference.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    diag = np.hypot(anchors[..., 3], anchors[..., 4])
    out = np.empty(np.broadcast_shapes(boxes.shape, anchors.shape))
    out[..., 0] = (boxes[..., 0] - anchors[..., 0]) / diag
    out[..., 1] = (boxes[..., 1] - anchors[..., 1]) / diag
    out[..., 2] = (boxes[..., 2] - anchors[..., 2]) / anchors[..., 5]
    out[..., 3:6] = np.log(boxes[..., 3:6] / anchors[..., 3:6])
    out[..., 6] = boxes[..., 6] - anchors[..., 6]
    return out


def decode_boxes(residuals, anchors):
    """Inverse of :func:`encode_boxes`."""
    r = np.asarray(residuals, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    diag = np.hypot(anchors[..., 3], anchors[..., 4])
    out = np.empty(np.broadcast_shapes(r.shape, anchors.shape))
    out[..., 0] = r[..., 0] * diag + anchors[..., 0]
    out[..., 1] = r[..., 1] * diag + anchors[..., 1]
    out[..., 2] = r[..., 2] * anchors[..., 5] + anchors[..., 2]
    out[..., 3:6] = np.exp(r[..., 3:6]) * anchors[..., 3:6]
    out[..., 6] = r[..., 6] + anchors[..., 6]
    return out


@dataclass(frozen=True, eq=False)
class RegressionTargets:
    labels: np.ndarray  # (K,) POSITIVE / NEGATIVE / IGNORE
    residuals: np.ndarray  # (K, 7), zero where not positive
    matched: np.ndarray  # (K,) truth index, -1 where not positive

    @property
    def n_positive(self):
        return int(np.sum(self.labels == POSITIVE))


def _truth_array(truth_boxes):
    rows = [b.to_box7() if isinstance(b, Cuboid) else np.asarray(b, dtype=np.float64) for b in truth_boxes]
    return np.array(rows, dtype=np.float64).reshape(-1, 7)


def assign_targets(anchors, truth_boxes, net):
    """Label anchors against truth boxes by BEV IoU.

    An anchor is positive when its best IoU reaches ``match_iou_pos`` or when it
    attains the (non-zero) maximum IoU for some truth box; anchors tied at that
    maximum, to a relative ``TIE_RTOL``, are all positive. Anchors below
    ``match_iou_neg`` are negative and the rest are ignored. Positives are
    matched to the truth of highest IoU, except forced matches, which keep the
    truth that selected them.
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    truth = _truth_array(truth_boxes)
    k = len(anchors)
    labels = np.full(k, IGNORE, dtype=np.int8)
    matched = np.full(k, -1, dtype=np.int64)
    residuals = np.zeros((k, 7))
    if len(truth) == 0:
        labels[:] = NEGATIVE
        return RegressionTargets(labels, residuals, matched)

    iou = bev_iou_matrix(anchors, truth)
    best_truth = np.argmax(iou, axis=1)
    best_iou = iou[np.arange(k), best_truth]
    labels[best_iou < net.match_iou_neg] = NEGATIVE
    pos = best_iou >= net.match_iou_pos
    labels[pos] = POSITIVE
    matched[pos] = best_truth[pos]
    for t in range(len(truth)):
        col = iou[:, t]
        top = col.max()
        if top <= 0:
            continue
        forced = np.nonzero((col >= top * (1 - TIE_RTOL)) & ~pos)[0]
        labels[forced] = POSITIVE
        matched[forced] = t
    sel = labels == POSITIVE
    residuals[sel] = encode_boxes(truth[matched[sel]], anchors[sel])
    return RegressionTargets(labels, residuals, matched)
