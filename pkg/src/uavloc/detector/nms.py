import numpy as np

from ..geometry import bev_iou_matrix


def nms(detections, iou_threshold=0.5, score_threshold=0.0):
    """Greedy non-maximum suppression on BEV IoU.

    Detections scoring below ``score_threshold`` are dropped. The best remaining
    detection is kept and every other one overlapping it by more than
    ``iou_threshold`` is suppressed; equal scores favour the earlier input.
    Returns the kept detections by descending score.
    """
    dets = [d for d in detections if d.score >= score_threshold]
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    boxes = np.array([dets[i].box.to_box7() for i in order])
    iou = bev_iou_matrix(boxes, boxes)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for pos in range(len(order)):
        if not alive[pos]:
            continue
        keep.append(dets[order[pos]])
        alive &= ~(iou[pos] > iou_threshold)
        alive[pos] = False
    return keep
