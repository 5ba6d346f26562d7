"""One-step-lookahead meta-gradients on per-instance and per-class
learning rates and on the weight-decay coefficient.

A training step writes the next model parameters as an explicit function
of the data parameters:

    theta' = theta - (lr / B) * sum_i w_eff(i) * g_i - lr * lam_wd * theta

with g_i the per-sample gradient of sample i and w_eff the instance or
class multiplier. Differentiating the meta-set loss at theta' through
this expression gives, per sampled instance,

    d L_meta / d w_i = -(lr / B) * <dL_meta/dtheta', g_i>

and for a class, the sum of its batch members' instance terms. The
per-sample gradients are treated as constants in w, which is exact for
the one-step rollout; no second-order term exists. The weight-decay
coefficient enters the rollout linearly, so

    d L_meta / d lam_wd = -lr * <dL_meta/dtheta', theta>.

Data parameters are updated by plain SGD on these meta-gradients and
clamped at zero.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import losses as losses_mod
from . import nn
from .errors import ShapeError

META_MODES = ("instance", "class", "none")


@dataclass
class DataParamState:
    """Learnable per-instance/per-class rate multipliers, the weight-decay
    coefficient, and optional temperature tables."""

    w_inst: np.ndarray
    w_class: np.ndarray
    lam_wd: float
    mode: str = "none"
    wd_learnable: bool = False
    history_reset: bool = False
    sigma_class: np.ndarray | None = None
    sigma_inst: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in META_MODES:
            raise ValueError(f"unknown meta mode {self.mode!r}")
        if self.lam_wd < 0:
            raise ValueError("weight-decay coefficient must be non-negative")

    @classmethod
    def initial(
        cls,
        n_instances,
        n_classes,
        mode="none",
        wd_init=5e-4,
        wd_learnable=False,
        history_reset=False,
        temperature_mode=None,
    ):
        """All multipliers start at 1. Temperature tables are allocated only
        when a temperature mode is named; in joint mode the class table
        starts at 1 and the instance table at 0 so the effective starting
        temperature is 1."""
        sigma_class = sigma_inst = None
        if temperature_mode == "class":
            sigma_class = np.ones(n_classes)
        elif temperature_mode == "instance":
            sigma_inst = np.ones(n_instances)
        elif temperature_mode == "joint":
            sigma_class = np.ones(n_classes)
            sigma_inst = np.zeros(n_instances)
        elif temperature_mode is not None:
            raise ValueError(f"unknown temperature mode {temperature_mode!r}")
        return cls(
            w_inst=np.ones(n_instances),
            w_class=np.ones(n_classes),
            lam_wd=float(wd_init),
            mode=mode,
            wd_learnable=wd_learnable,
            history_reset=history_reset,
            sigma_class=sigma_class,
            sigma_inst=sigma_inst,
        )

    def copy(self):
        return replace(
            self,
            w_inst=self.w_inst.copy(),
            w_class=self.w_class.copy(),
            sigma_class=None if self.sigma_class is None else self.sigma_class.copy(),
            sigma_inst=None if self.sigma_inst is None else self.sigma_inst.copy(),
        )


@dataclass
class MetaStepReport:
    """Everything one meta step computed, for logging and verification."""

    rollout_theta: nn.ParamVector
    meta_loss: float
    per_instance_metagrad: dict
    per_class_metagrad: dict
    wd_metagrad: float
    clamp_count: int = 0


def effective_weights(dps, batch):
    """Per-sample multiplier under the current mode; ones in mode none."""
    if dps.mode == "instance":
        return dps.w_inst[batch.indices]
    if dps.mode == "class":
        return dps.w_class[batch.labels]
    return np.ones(batch.size)


def rollout_one_step(theta, grads, batch, dps, lr):
    """theta' as an explicit function of the data parameters.

    ``grads`` are the per-sample gradients of the batch at ``theta``.
    """
    if grads.shape != (batch.size, theta.values.size):
        raise ShapeError(
            f"per-sample grads {grads.shape} do not match batch {batch.size} "
            f"and parameter count {theta.values.size}"
        )
    w_eff = effective_weights(dps, batch)
    new = theta.values - (lr / batch.size) * (w_eff @ grads) - lr * dps.lam_wd * theta.values
    return theta.with_values(new)


def instance_metagrad(grads, indices, meta_grad, lr):
    """Meta-gradient per sampled instance: -(lr/B) <meta_grad, g_i>.

    Instances absent from the batch receive no entry.
    """
    if grads.shape[1] != meta_grad.shape[0]:
        raise ShapeError(
            f"per-sample grads have {grads.shape[1]} columns, meta gradient has "
            f"{meta_grad.shape[0]}"
        )
    b = grads.shape[0]
    dots = grads @ meta_grad
    return {int(idx): float(-(lr / b) * d) for idx, d in zip(indices, dots)}


def class_metagrad(grads, labels, meta_grad, lr, n_classes=None):
    """Meta-gradient per class present in the batch.

    Equals -(lr * n_c / B) <meta_grad, mean of member gradients>, which is
    the sum of the members' instance meta-gradients. Absent classes get
    no entry.
    """
    if grads.shape[1] != meta_grad.shape[0]:
        raise ShapeError(
            f"per-sample grads have {grads.shape[1]} columns, meta gradient has "
            f"{meta_grad.shape[0]}"
        )
    labels = np.asarray(labels)
    if n_classes is not None and labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    b = grads.shape[0]
    dots = grads @ meta_grad
    out = {}
    for c in np.unique(labels):
        members = dots[labels == c]
        out[int(c)] = float(-(lr * members.size / b) * members.mean())
    return out


def wd_metagrad(theta, meta_grad, lr):
    """Meta-gradient on the weight-decay coefficient: -lr <meta_grad, theta>."""
    return float(-lr * (meta_grad @ theta.values))


def apply_data_param_update(dps, report, data_lr, wd_lr):
    """SGD on the data parameters with clamping at zero.

    Only entries named in the report's maps are touched; the clamp count
    is written back into the report. Plain SGD, no momentum, no decay.
    """
    out = dps.copy()
    clamps = 0
    if dps.mode == "instance":
        for idx, g in report.per_instance_metagrad.items():
            new = out.w_inst[idx] - data_lr * g
            if new < 0.0:
                new = 0.0
                clamps += 1
            out.w_inst[idx] = new
    elif dps.mode == "class":
        for c, g in report.per_class_metagrad.items():
            new = out.w_class[c] - data_lr * g
            if new < 0.0:
                new = 0.0
                clamps += 1
            out.w_class[c] = new
    if dps.wd_learnable:
        new_wd = out.lam_wd - wd_lr * report.wd_metagrad
        if new_wd < 0.0:
            new_wd = 0.0
            clamps += 1
        out.lam_wd = new_wd
    report.clamp_count = clamps
    return out


def meta_train_step(theta, dps, train_batch, meta_batch, lr, data_lr, wd_lr):
    """One full step: rollout, meta loss at theta', meta-gradients, data
    parameter update. The committed model parameters are the rollout
    itself; the data parameters seen by this step are the pre-update ones.

    Returns (theta_next, dps_next, report).
    """
    if train_batch.size != meta_batch.size:
        raise ShapeError(
            f"train batch ({train_batch.size}) and meta batch ({meta_batch.size}) "
            "must have equal size"
        )
    _, grads = nn.per_sample_backward(theta, train_batch)
    theta_next = rollout_one_step(theta, grads, train_batch, dps, lr)

    meta_losses, meta_grads = nn.per_sample_backward(theta_next, meta_batch)
    meta_grad = meta_grads.mean(axis=0)

    report = MetaStepReport(
        rollout_theta=theta_next,
        meta_loss=float(meta_losses.mean()),
        per_instance_metagrad=instance_metagrad(grads, train_batch.indices, meta_grad, lr),
        per_class_metagrad=class_metagrad(
            grads, train_batch.labels, meta_grad, lr, n_classes=dps.w_class.size
        ),
        wd_metagrad=wd_metagrad(theta, meta_grad, lr),
    )
    dps_next = apply_data_param_update(dps, report, data_lr, wd_lr)
    if dps.history_reset:
        dps_next.w_inst[:] = 1.0
        dps_next.w_class[:] = 1.0
    return theta_next, dps_next, report


def replay_schedule(trajectory, epoch):
    """Frozen weight tables for one epoch of a recorded trajectory.

    Used to retrain on the full train set with the learned schedule as
    fixed multipliers; no meta set and no meta-gradients are involved.
    """
    snap = trajectory.snapshot(epoch)
    return snap.as_tables()
