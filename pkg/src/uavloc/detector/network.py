"""Pillar feature net, 2D backbone and SSD-style head, with an explicit backward pass."""

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from ..pillars import N_FEATURES, scatter
from ..validation import ConfigError, ContractError, check_int, check_positive, check_unit_interval
from .anchors import NEGATIVE, POSITIVE
from .layers import (
    BatchNorm,
    Conv2d,
    ConvTranspose2d,
    Linear,
    MaskedMax,
    ReLU,
    bce_loss,
    focal_loss,
    sigmoid,
    smooth_l1_loss,
)

N_BOX = 7


@dataclass(frozen=True)
class NetworkConfig:
    """Architecture, anchor, matching, loss and post-processing settings.

    ``backbone_blocks`` holds ``(n_layers, channels, stride)`` per block: the
    first conv of a block has the block's stride, the rest stride 1.
    ``upsample_channels`` gives the transposed-conv output width per block.
    """

    pfn_channels: int = 16
    pfn_batchnorm: bool = True
    backbone_blocks: tuple = ((2, 16, 2), (2, 32, 2))
    upsample_channels: tuple = (16, 16)
    anchor_size: tuple = (0.5, 0.5, 0.3)
    anchor_z: float = 0.5
    anchor_yaws: tuple = (0.0, math.pi / 2)
    match_iou_pos: float = 0.5
    match_iou_neg: float = 0.35
    loss: str = "focal"
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    loc_weight: float = 2.0
    smooth_l1_beta: float = 1.0 / 9.0
    prior_prob: float = 0.01
    score_threshold: float = 0.6
    nms_iou_threshold: float = 0.5
    pre_nms_top_k: int = 100

    def __post_init__(self):
        check_int(self.pfn_channels, "pfn_channels", minimum=1)
        if not self.backbone_blocks:
            raise ConfigError("backbone needs at least one block")
        if len(self.upsample_channels) != len(self.backbone_blocks):
            raise ConfigError("upsample_channels needs one entry per backbone block")
        for n_layers, channels, stride in self.backbone_blocks:
            check_int(n_layers, "block layer count", minimum=1)
            check_int(channels, "block channels", minimum=1)
            check_int(stride, "block stride", minimum=1)
        for c in self.upsample_channels:
            check_int(c, "upsample channels", minimum=1)
        for v in self.anchor_size:
            check_positive(v, "anchor size")
        if not self.anchor_yaws:
            raise ConfigError("need at least one anchor yaw")
        check_unit_interval(self.match_iou_pos, "match_iou_pos")
        check_unit_interval(self.match_iou_neg, "match_iou_neg")
        if not self.match_iou_neg < self.match_iou_pos:
            raise ConfigError("match_iou_neg must be below match_iou_pos")
        if self.loss not in ("focal", "bce"):
            raise ConfigError(f"loss must be 'focal' or 'bce', got {self.loss!r}")
        check_unit_interval(self.prior_prob, "prior_prob", open_ends=True)
        check_unit_interval(self.score_threshold, "score_threshold")
        check_unit_interval(self.nms_iou_threshold, "nms_iou_threshold")

    @property
    def n_anchors_per_cell(self):
        return len(self.anchor_yaws)

    def block_strides(self):
        """Cumulative stride at the output of every block."""
        out, s = [], 1
        for _, _, stride in self.backbone_blocks:
            s *= stride
            out.append(s)
        return out


DESK_NETWORK = NetworkConfig()


class PillarNet:
    """Trainable pillar detector for a fixed grid.

    Parameters are exposed through :meth:`state_dict` as flat
    ``"<layer>.<param>"`` names; batch-norm running statistics are included.
    """

    def __init__(self, net, grid, dtype=np.float32, seed=0):
        self.net = net
        self.grid = grid
        self.dtype = np.dtype(dtype)
        f = grid.ds_factor
        for s in net.block_strides():
            if s % f:
                raise ConfigError(f"block stride {s} is not a multiple of ds_factor {f}")
        total = net.block_strides()[-1]
        if grid.x_n % total or grid.y_n % total:
            raise ConfigError(
                f"pseudo-image {grid.y_n}x{grid.x_n} not divisible by backbone stride {total}"
            )
        self.feature_shape = (grid.y_n // f, grid.x_n // f)

        L = {}
        C = net.pfn_channels
        L["pfn.linear"] = Linear(N_FEATURES, C, bias=not net.pfn_batchnorm, dtype=dtype)
        if net.pfn_batchnorm:
            L["pfn.bn"] = BatchNorm(C, dtype=dtype)
        self._block_layers = []
        c_in = C
        for b, (n_layers, channels, stride) in enumerate(net.backbone_blocks):
            names = []
            for j in range(n_layers):
                s = stride if j == 0 else 1
                L[f"block{b}.conv{j}"] = Conv2d(c_in, channels, 3, s, dtype=dtype)
                L[f"block{b}.bn{j}"] = BatchNorm(channels, dtype=dtype)
                names.append(j)
                c_in = channels
            self._block_layers.append(names)
        for b, (up, cum) in enumerate(zip(net.upsample_channels, net.block_strides())):
            c_block = net.backbone_blocks[b][1]
            L[f"up{b}.deconv"] = ConvTranspose2d(c_block, up, cum // f, dtype=dtype)
            L[f"up{b}.bn"] = BatchNorm(up, dtype=dtype)
        c_feat = sum(net.upsample_channels)
        A = net.n_anchors_per_cell
        L["head.cls"] = Conv2d(c_feat, A, kernel=1, bias=True, dtype=dtype)
        L["head.reg"] = Conv2d(c_feat, A * N_BOX, kernel=1, bias=True, dtype=dtype)
        self.layers = L
        self._relus = {}
        self._pool = MaskedMax()
        self.init_weights(seed)

    # ------------------------------------------------------------------ params
    def init_weights(self, seed=0):
        rng = np.random.default_rng(seed)
        for name, layer in self.layers.items():
            for key, p in layer.params.items():
                if key == "weight":
                    if name.startswith("head."):
                        val = rng.normal(0.0, 0.01, p.shape)
                    else:
                        if isinstance(layer, ConvTranspose2d):
                            fan_in = p.shape[0]
                        elif p.ndim == 2:
                            fan_in = p.shape[0]
                        else:
                            fan_in = int(np.prod(p.shape[1:]))
                        val = rng.normal(0.0, math.sqrt(2.0 / fan_in), p.shape)
                elif key == "gamma":
                    val = np.ones(p.shape)
                elif key == "bias" and name == "head.cls":
                    prior = self.net.prior_prob
                    val = np.full(p.shape, -math.log((1 - prior) / prior))
                else:
                    val = np.zeros(p.shape)
                layer.params[key] = val.astype(self.dtype)
            for key, b in layer.buffers.items():
                layer.buffers[key] = (np.ones if key == "running_var" else np.zeros)(b.shape, self.dtype)
        self.zero_grad()

    def named_parameters(self):
        for name, layer in self.layers.items():
            for key in layer.params:
                yield f"{name}.{key}", layer, key

    def parameter_groups(self):
        return [full for full, _, _ in self.named_parameters()]

    def state_dict(self):
        out = {}
        for name, layer in self.layers.items():
            for key, v in layer.params.items():
                out[f"{name}.{key}"] = v.copy()
            for key, v in layer.buffers.items():
                out[f"{name}.{key}"] = v.copy()
        return out

    def load_state_dict(self, state):
        expected = self.state_dict()
        missing = set(expected) - set(state)
        extra = set(state) - set(expected)
        if missing or extra:
            raise ContractError(f"weights mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for full, arr in state.items():
            name, key = full.rsplit(".", 1)
            layer = self.layers[name]
            target = layer.params if key in layer.params else layer.buffers
            if target[key].shape != np.shape(arr):
                raise ContractError(f"{full}: shape {np.shape(arr)} != {target[key].shape}")
            target[key] = np.array(arr, dtype=self.dtype)

    def zero_grad(self):
        for layer in self.layers.values():
            layer.zero_grad()

    def gradients(self):
        return {full: layer.grads[key] for full, layer, key in self.named_parameters()}

    def activation_pattern(self):
        """Digest of the last forward pass's piecewise-linear branch choices
        (ReLU masks and max-pool winners); equal digests mean the loss was
        evaluated on the same smooth piece."""
        parts = [np.packbits(r._cache).tobytes() for _, r in sorted(self._relus.items())]
        parts.append(self._pool._cache[0].tobytes())
        return hashlib.sha1(b"".join(parts)).hexdigest()

    def _relu(self, name):
        if name not in self._relus:
            self._relus[name] = ReLU()
        return self._relus[name]

    # ----------------------------------------------------------------- forward
    def pfn_forward(self, pillars, train=False):
        """Per-pillar features (P, C) for a single PillarTensor or a list of them."""
        if not isinstance(pillars, (list, tuple)):
            pillars = [pillars]
        feats = [p.features for p in pillars]
        masks = [p.mask() for p in pillars]
        for p in pillars:
            if p.features.ndim != 3 or p.features.shape[2] != N_FEATURES:
                raise ContractError(f"pillar features must be (P, N, {N_FEATURES})")
        n_max = {f.shape[1] for f in feats}
        if len(n_max) > 1:
            raise ContractError("all pillar tensors in a batch need the same max_points")
        x = np.concatenate(feats).astype(self.dtype)
        mask = np.concatenate(masks)
        C = self.net.pfn_channels
        real = x[mask]
        self._pfn_cache = (x.shape, mask, len(real))
        if len(real) == 0:
            return np.zeros((x.shape[0], C), dtype=self.dtype)
        h = self.layers["pfn.linear"].forward(real, train)
        if self.net.pfn_batchnorm:
            h = self.layers["pfn.bn"].forward(h, train)
        h = self._relu("pfn").forward(h, train)
        dense = np.zeros((x.shape[0], x.shape[1], C), dtype=self.dtype)
        dense[mask] = h
        return self._pool.forward(dense, mask)

    def _pfn_backward(self, d_pillar):
        shape, mask, n_real = self._pfn_cache
        if n_real == 0:
            return
        dense = self._pool.backward(d_pillar)
        dh = dense[mask]
        dh = self._relu("pfn").backward(dh)
        if self.net.pfn_batchnorm:
            dh = self.layers["pfn.bn"].backward(dh)
        self.layers["pfn.linear"].backward(dh, need_input_grad=False)

    def scatter_batch(self, pillar_feats, batch):
        images = []
        start = 0
        for p in batch:
            end = start + p.n_pillars
            images.append(scatter(pillar_feats[start:end], p.indices, self.grid))
            start = end
        return np.stack(images)

    def backbone_forward(self, image, train=False):
        """Concatenated multi-scale feature map, shape (B, sum(upsample), H/f, W/f)."""
        x = image.astype(self.dtype, copy=False)
        total = self.net.block_strides()[-1]
        if x.shape[2] % total or x.shape[3] % total:
            raise ConfigError(f"image {x.shape[2:]} not divisible by backbone stride {total}")
        ups = []
        for b, convs in enumerate(self._block_layers):
            for j in convs:
                x = self.layers[f"block{b}.conv{j}"].forward(x, train)
                x = self.layers[f"block{b}.bn{j}"].forward(x, train)
                x = self._relu(f"block{b}.{j}").forward(x, train)
            u = self.layers[f"up{b}.deconv"].forward(x, train)
            u = self.layers[f"up{b}.bn"].forward(u, train)
            ups.append(self._relu(f"up{b}").forward(u, train))
        self._up_channels = [u.shape[1] for u in ups]
        return np.concatenate(ups, axis=1)

    def _backbone_backward(self, dfeat):
        splits = np.cumsum(self._up_channels)[:-1]
        dups = np.split(dfeat, splits, axis=1)
        dx = None
        for b in reversed(range(len(self._block_layers))):
            du = self._relu(f"up{b}").backward(dups[b])
            du = self.layers[f"up{b}.bn"].backward(du)
            d_block = self.layers[f"up{b}.deconv"].backward(du)
            if dx is not None:
                d_block = d_block + dx
            for j in reversed(self._block_layers[b]):
                d_block = self._relu(f"block{b}.{j}").backward(d_block)
                d_block = self.layers[f"block{b}.bn{j}"].backward(d_block)
                d_block = self.layers[f"block{b}.conv{j}"].backward(d_block)
            dx = d_block
        return dx

    def head_forward(self, feat, train=False):
        """Return flattened ``(logits (B, K), residuals (B, K, 7))``."""
        B, _, H, W = feat.shape
        A = self.net.n_anchors_per_cell
        cls = self.layers["head.cls"].forward(feat, train)
        reg = self.layers["head.reg"].forward(feat, train)
        logits = cls.transpose(0, 2, 3, 1).reshape(B, H * W * A)
        resid = reg.reshape(B, A, N_BOX, H, W).transpose(0, 3, 4, 1, 2).reshape(B, H * W * A, N_BOX)
        self._head_shape = (B, H, W)
        return logits, resid

    def _head_backward(self, dlogits, dresid):
        B, H, W = self._head_shape
        A = self.net.n_anchors_per_cell
        dcls = dlogits.reshape(B, H, W, A).transpose(0, 3, 1, 2)
        dreg = dresid.reshape(B, H, W, A, N_BOX).transpose(0, 3, 4, 1, 2).reshape(B, A * N_BOX, H, W)
        return self.layers["head.cls"].backward(np.ascontiguousarray(dcls)) + self.layers[
            "head.reg"
        ].backward(np.ascontiguousarray(dreg))

    def forward(self, batch, train=False):
        if not isinstance(batch, (list, tuple)):
            batch = [batch]
        for p in batch:
            if (p.x_n, p.y_n) != (self.grid.x_n, self.grid.y_n):
                raise ContractError(f"pillar tensor grid {p.y_n}x{p.x_n} does not match the network")
        self._batch = batch
        pf = self.pfn_forward(list(batch), train)
        image = self.scatter_batch(pf, batch)
        feat = self.backbone_forward(image, train)
        return self.head_forward(feat, train)

    def backward(self, dlogits, dresid):
        dfeat = self._head_backward(dlogits, dresid)
        dimage = self._backbone_backward(dfeat)
        rows, cols, chunks = [], [], []
        for b, p in enumerate(self._batch):
            chunks.append(dimage[b][:, p.indices[:, 0], p.indices[:, 1]].T)
        d_pillar = np.concatenate(chunks) if chunks else np.zeros((0, self.net.pfn_channels), self.dtype)
        self._pfn_backward(np.ascontiguousarray(d_pillar, dtype=self.dtype))

    # -------------------------------------------------------------------- loss
    def loss(self, batch, targets, train=True, backward=True):
        """Total detection loss for a batch, optionally back-propagated.

        Classification (focal or BCE) over non-ignored anchors plus
        ``loc_weight`` times smooth-L1 over positive anchors, both divided by the
        batch's positive count (at least 1).
        """
        net = self.net
        logits, resid = self.forward(batch, train)
        labels = np.stack([t.labels for t in targets])
        tgt_res = np.stack([t.residuals for t in targets])
        pos = labels == POSITIVE
        cls_w = ((labels == POSITIVE) | (labels == NEGATIVE)).astype(np.float64)
        norm = max(int(pos.sum()), 1)
        if net.loss == "focal":
            cls_loss, dlog = focal_loss(logits, pos.astype(np.float64), cls_w, net.focal_alpha, net.focal_gamma)
        else:
            cls_loss, dlog = bce_loss(logits, pos.astype(np.float64), cls_w)
        loc_loss, dres = smooth_l1_loss(resid, tgt_res, pos[..., None].astype(np.float64), net.smooth_l1_beta)
        total = (cls_loss + net.loc_weight * loc_loss) / norm
        if backward:
            self.backward(
                (dlog / norm).astype(self.dtype),
                (dres * (net.loc_weight / norm)).astype(self.dtype),
            )
        return total

    def predict_raw(self, batch):
        """Eval-mode scores (B, K) and residuals (B, K, 7)."""
        logits, resid = self.forward(batch, train=False)
        return sigmoid(logits.astype(np.float64)), resid.astype(np.float64)
