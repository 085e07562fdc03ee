"""Central-difference check of the hand-written backward passes."""

from dataclasses import dataclass

import numpy as np


def relative_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


@dataclass
class GradCheckResult:
    errors: dict  # parameter name -> max relative error over checked entries
    checked: dict  # parameter name -> number of entries compared
    kinks: int  # entries skipped because the stencil crossed a ReLU / max kink

    @property
    def worst(self):
        return max(self.errors.items(), key=lambda kv: kv[1])


def check_gradients(net, batch, targets, n_samples=3, eps=1e-5, seed=0, max_draws=50):
    """Compare analytic and numerical gradients of ``net.loss``.

    For every parameter group ``n_samples`` entries are drawn (seeded) and the
    analytic gradient is compared against ``(L(w + eps) - L(w - eps)) / 2 eps``
    with the network in training mode. Use a float64 network.

    The pillar net is piecewise smooth: when the ReLU masks or max-pool
    winners at ``w +- eps`` differ from those at ``w`` the difference quotient
    straddles a kink and says nothing about the derivative, so that entry is
    skipped and another one drawn (at most ``max_draws`` per group).
    """
    rng = np.random.default_rng(seed)
    net.zero_grad()
    net.loss(batch, targets, train=True, backward=True)
    base = net.activation_pattern()
    analytic = {full: layer.grads[key].copy() for full, layer, key in net.named_parameters()}
    errors, checked, kinks = {}, {}, 0
    for full, layer, key in net.named_parameters():
        flat = layer.params[key].reshape(-1)
        order = rng.permutation(flat.size)[:max_draws]
        worst, n_ok = 0.0, 0
        for i in order:
            if n_ok == n_samples:
                break
            orig = flat[i]
            flat[i] = orig + eps
            lp = net.loss(batch, targets, train=True, backward=False)
            sp = net.activation_pattern()
            flat[i] = orig - eps
            lm = net.loss(batch, targets, train=True, backward=False)
            sm = net.activation_pattern()
            flat[i] = orig
            if sp != base or sm != base:
                kinks += 1
                continue
            numeric = (lp - lm) / (2 * eps)
            worst = max(worst, relative_error(float(analytic[full].reshape(-1)[i]), numeric))
            n_ok += 1
        errors[full] = worst
        checked[full] = n_ok
    return GradCheckResult(errors, checked, kinks)
