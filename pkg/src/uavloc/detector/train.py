"""Mini-batch Adam training with a step learning-rate schedule."""

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..validation import check_int, check_positive, check_unit_interval
from .anchors import assign_targets, make_anchors
from .network import PillarNet

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, loss):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"training diverged at epoch {epoch}: loss {loss}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings.

    ``gradient_decay`` is Adam's first-moment decay and
    ``squared_gradient_decay`` its second-moment decay. The learning rate is
    multiplied by ``lr_drop_factor`` every ``lr_drop_period`` epochs.
    """

    mini_batch: int = 2
    learning_rate: float = 2e-4
    lr_drop_period: int = 15
    lr_drop_factor: float = 0.8
    gradient_decay: float = 0.9
    squared_gradient_decay: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 70
    seed: int = 0

    def __post_init__(self):
        check_int(self.mini_batch, "mini_batch", minimum=1)
        check_positive(self.learning_rate, "learning_rate")
        check_int(self.lr_drop_period, "lr_drop_period", minimum=1)
        check_unit_interval(self.lr_drop_factor, "lr_drop_factor", open_ends=True)
        check_unit_interval(self.gradient_decay, "gradient_decay", open_ends=True)
        check_unit_interval(self.squared_gradient_decay, "squared_gradient_decay", open_ends=True)
        check_positive(self.epsilon, "epsilon")
        check_int(self.epochs, "epochs", minimum=1)
        check_int(self.seed, "seed")

    def learning_rate_at(self, epoch):
        """Learning rate used during 0-based ``epoch``."""
        return self.learning_rate * self.lr_drop_factor ** (epoch // self.lr_drop_period)


# desk-scale preset: the optimizer settings above with a shorter schedule
DESK_TRAINING = TrainConfig(epochs=30)


class Adam:
    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m, self.v = {}, {}
        self.t = 0

    def step(self, net, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for full, layer, key in net.named_parameters():
            g = layer.grads[key].astype(np.float64)
            m = self.m.get(full, 0.0) * b1 + (1 - b1) * g
            v = self.v.get(full, 0.0) * b2 + (1 - b2) * g * g
            self.m[full], self.v[full] = m, v
            upd = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            layer.params[key] = (layer.params[key] - upd).astype(layer.params[key].dtype)


@dataclass
class TrainResult:
    net: PillarNet
    loss_trace: list
    lr_trace: list

    @property
    def weights(self):
        return self.net.state_dict()


def build_targets(anchors, dataset, net_cfg):
    return [assign_targets(anchors, truth, net_cfg) for _, truth in dataset]


def train(dataset, cfg, net_cfg, grid, net=None, dtype=np.float32, callback=None):
    """Fit a :class:`PillarNet` on ``[(PillarTensor, [Cuboid, ...]), ...]``.

    Batches are drawn from a seeded shuffle each epoch; the last batch may be
    short. The recorded loss per epoch is the mean batch loss.

    Raises
    ------
    TrainingDivergedError
        If any batch loss is not finite.
    """
    if not dataset:
        raise ValueError("training needs a non-empty dataset")
    if net is None:
        net = PillarNet(net_cfg, grid, dtype=dtype, seed=cfg.seed)
    anchors = make_anchors(grid, net_cfg)
    targets = build_targets(anchors, dataset, net_cfg)
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(cfg.gradient_decay, cfg.squared_gradient_decay, cfg.epsilon)
    losses, lrs = [], []
    n = len(dataset)
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate_at(epoch)
        order = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.mini_batch):
            idx = order[start:start + cfg.mini_batch]
            net.zero_grad()
            loss = net.loss([dataset[i][0] for i in idx], [targets[i] for i in idx], train=True)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            opt.step(net, lr)
            batch_losses.append(loss)
        epoch_loss = float(np.mean(batch_losses))
        losses.append(epoch_loss)
        lrs.append(lr)
        log.info("epoch %d lr %.3g loss %.5f", epoch, lr, epoch_loss)
        if callback is not None:
            callback(epoch, epoch_loss)
    return TrainResult(net, losses, lrs)
