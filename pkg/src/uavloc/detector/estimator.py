"""Inference pipeline and the scikit-learn style detector estimator."""

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .._fileio import atomic_write
from ..cloud_io import PointCloud, crop
from ..geometry import Cuboid, Detection, PositionEstimate
from ..pillars import PillarTensor, encode_pillars, resolve_grid
from ..validation import ContractError
from .anchors import decode_boxes, make_anchors
from .network import DESK_NETWORK, PillarNet
from .nms import nms
from .train import DESK_TRAINING, train
from .weights import dump_weights, load_weights


def decode_detections(scores, residuals, anchors, net):
    """Turn one sample's anchor scores/residuals into NMS-filtered detections."""
    keep = np.nonzero(scores >= net.score_threshold)[0]
    if keep.size == 0:
        return []
    keep = keep[np.argsort(-scores[keep], kind="stable")][: net.pre_nms_top_k]
    boxes = decode_boxes(residuals[keep], anchors[keep])
    dets = [
        Detection(Cuboid.from_array(b), float(min(max(s, 0.0), 1.0)))
        for b, s in zip(boxes, scores[keep])
        if np.all(np.isfinite(b)) and np.all(b[3:6] > 0)
    ]
    return nms(dets, net.nms_iou_threshold, net.score_threshold)


def to_estimate(detections, timestamp):
    """Position of the top-scoring detection, or None (no prediction)."""
    if not detections:
        return None
    b = detections[0].box
    return PositionEstimate(b.x_ctr, b.y_ctr, b.z_ctr, float(timestamp), "network")


def detect(cloud, net_model, max_pillars=6400, max_points_per_pillar=32, seed=0):
    """Crop, encode, run the network in eval mode, decode and suppress.

    Returns ``(detections, estimate)`` where ``estimate`` is None when no
    detection survives.
    """
    grid, net = net_model.grid, net_model.net
    cropped = crop(cloud, grid.bounds)
    pillars = encode_pillars(cropped, grid, max_pillars, max_points_per_pillar, seed)
    anchors = make_anchors(grid, net)
    if pillars.n_pillars == 0:
        return [], None
    scores, resid = net_model.predict_raw([pillars])
    dets = decode_detections(scores[0], resid[0], anchors, net)
    return dets, to_estimate(dets, cloud.timestamp)


def _truth_list(y):
    if isinstance(y, Cuboid):
        return [y]
    return list(y)


class PillarDetector(BaseEstimator):
    """Desk-scale pillar detector with ``fit`` / ``predict``.

    Parameters
    ----------
    grid : GridParams or {"desk", "tunnel"}, default="desk"
    network : NetworkConfig, optional
        Defaults to the desk-scale architecture.
    training : TrainConfig, optional
        Defaults to ``DESK_TRAINING`` (30 epochs, otherwise the standard
        optimizer settings).
    max_pillars : int, default=6400
    max_points_per_pillar : int, default=32
    random_state : int, default=0
        Seeds pillar truncation. Weight init and batch order follow
        ``training.seed``.

    Attributes
    ----------
    net_ : PillarNet
    loss_trace_ : list of float
        Mean training loss per epoch.
    """

    def __init__(self, grid="desk", network=None, training=None, max_pillars=6400,
                 max_points_per_pillar=32, random_state=0):
        self.grid = grid
        self.network = network
        self.training = training
        self.max_pillars = max_pillars
        self.max_points_per_pillar = max_points_per_pillar
        self.random_state = random_state

    def _configs(self):
        grid = resolve_grid(self.grid)
        net = self.network if self.network is not None else DESK_NETWORK
        tr = self.training if self.training is not None else DESK_TRAINING
        return grid, net, tr

    def _encode(self, X):
        grid = resolve_grid(self.grid)
        items = [X] if isinstance(X, (PointCloud, PillarTensor)) else list(X)
        out = []
        for item in items:
            if isinstance(item, PillarTensor):
                out.append(item)
            else:
                out.append(
                    encode_pillars(crop(item, grid.bounds), grid, self.max_pillars,
                                   self.max_points_per_pillar, self.random_state)
                )
        return out

    def fit(self, X, y, callback=None):
        """Train on clouds (or pre-encoded PillarTensors) ``X`` with truth boxes ``y``.

        Each entry of ``y`` is a Cuboid or a list of Cuboids for that frame.
        """
        grid, net, tr = self._configs()
        tensors = self._encode(X)
        truths = [_truth_list(t) for t in y]
        if len(tensors) != len(truths):
            raise ContractError(f"{len(tensors)} samples but {len(truths)} label sets")
        result = train(list(zip(tensors, truths)), tr, net, grid, callback=callback)
        self.net_ = result.net
        self.loss_trace_ = result.loss_trace
        self.lr_trace_ = result.lr_trace
        return self

    def decision_function(self, X):
        """Per-anchor scores, shape (n_samples, n_anchors)."""
        check_is_fitted(self, "net_")
        return np.concatenate([self.net_.predict_raw([t])[0] for t in self._encode(X)])

    def detect(self, cloud):
        check_is_fitted(self, "net_")
        return detect(cloud, self.net_, self.max_pillars, self.max_points_per_pillar,
                      self.random_state)[0]

    def predict(self, X):
        """One PositionEstimate (source ``"network"``) or None per cloud."""
        check_is_fitted(self, "net_")
        clouds = [X] if isinstance(X, PointCloud) else list(X)
        return [
            detect(c, self.net_, self.max_pillars, self.max_points_per_pillar, self.random_state)[1]
            for c in clouds
        ]

    def score(self, X, y, threshold=0.2):
        """Fraction of frames whose estimate lies within ``threshold`` m of the truth center."""
        preds = self.predict(X)
        hits = 0
        for p, t in zip(preds, y):
            box = _truth_list(t)[0]
            if p is not None and np.linalg.norm(p.xyz - box.center) < threshold:
                hits += 1
        return hits / max(len(preds), 1)

    @property
    def weights_(self):
        check_is_fitted(self, "net_")
        return self.net_.state_dict()

    def save_weights(self, path):
        atomic_write(path, dump_weights(self.weights_))

    def load_weights(self, source):
        """Load weights from a path, raw bytes, or a state dict; marks the estimator fitted."""
        grid, net, tr = self._configs()
        if isinstance(source, dict):
            state = source
        elif isinstance(source, (bytes, bytearray)):
            state = load_weights(source)
        else:
            state = load_weights(Path(source).read_bytes())
        model = PillarNet(net, grid, seed=tr.seed)
        model.load_state_dict(state)
        self.net_ = model
        self.loss_trace_ = []
        return self
