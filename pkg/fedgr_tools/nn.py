# -*- coding: utf-8 -*-
"""Minimal MLP with hand-written backpropagation.

The model is a ReLU backbone f(.) followed by a linear head h(.). All
parameters live in one flat float64 vector so that aggregation, EMA blending
and transmission are plain vector arithmetic.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np
from scipy.special import log_softmax, softmax

from fedgr_tools.utils import ParameterError, ShapeError

logger = logging.getLogger(__name__)


def count_params(shape_spec):
    return int(sum(n_out * n_in + n_out for n_in, n_out in zip(shape_spec[:-1], shape_spec[1:])))


@dataclass(eq=False)
class ModelParams:
    """Flat parameter vector with layer shape metadata.

    Parameters
    ----------
    flat : np.ndarray
        Concatenation of (weight matrix row-major, bias) for every layer.
    shape_spec : tuple of int
        Layer widths (d_in, h_1, ..., C). Every layer but the last belongs to
        the backbone and is followed by a ReLU; the last layer is the head.
    """

    flat: np.ndarray
    shape_spec: tuple

    def __post_init__(self):
        self.shape_spec = tuple(int(s) for s in self.shape_spec)
        if len(self.shape_spec) < 2 or min(self.shape_spec) < 1:
            raise ShapeError(f"shape_spec needs >= 2 positive widths (got {self.shape_spec})")
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.ndim != 1 or self.flat.size != count_params(self.shape_spec):
            raise ShapeError(
                f"Expected {count_params(self.shape_spec)} parameters for "
                f"shape_spec {self.shape_spec} (got array of shape {self.flat.shape})"
            )
        if not np.all(np.isfinite(self.flat)):
            raise ParameterError("Model parameters must be finite")

    @property
    def param_count(self):
        return self.flat.size

    @property
    def input_dim(self):
        return self.shape_spec[0]

    @property
    def n_classes(self):
        return self.shape_spec[-1]

    @property
    def representation_dim(self):
        return self.shape_spec[-2]

    @property
    def layers(self):
        """List of (weight, bias) views into ``flat``; weight is (out, in)."""
        out, offset = [], 0
        for n_in, n_out in zip(self.shape_spec[:-1], self.shape_spec[1:]):
            W = self.flat[offset : offset + n_out * n_in].reshape(n_out, n_in)
            offset += n_out * n_in
            b = self.flat[offset : offset + n_out]
            offset += n_out
            out.append((W, b))
        return out

    @classmethod
    def from_layers(cls, layers):
        shape_spec = [np.shape(layers[0][0])[1]] + [np.shape(W)[0] for W, _ in layers]
        flat = np.concatenate([np.concatenate([np.ravel(W), np.ravel(b)]) for W, b in layers])
        return cls(flat, tuple(shape_spec))

    @classmethod
    def zeros(cls, shape_spec):
        return cls(np.zeros(count_params(shape_spec)), shape_spec)

    def zeros_like(self):
        return type(self)(np.zeros_like(self.flat), self.shape_spec)

    def copy(self):
        return type(self)(self.flat.copy(), self.shape_spec)

    def _check_compatible(self, other):
        if self.shape_spec != other.shape_spec:
            raise ShapeError(f"shape_spec mismatch: {self.shape_spec} vs {other.shape_spec}")

    def __add__(self, other):
        self._check_compatible(other)
        return type(self)(self.flat + other.flat, self.shape_spec)

    def __sub__(self, other):
        self._check_compatible(other)
        return type(self)(self.flat - other.flat, self.shape_spec)

    def __mul__(self, scalar):
        return type(self)(self.flat * float(scalar), self.shape_spec)

    __rmul__ = __mul__

    def __neg__(self):
        return type(self)(-self.flat, self.shape_spec)


class GradientBuffer(ModelParams):
    """Gradients (or SGD velocity) laid out exactly like the model they belong to."""


class ForwardOutput(NamedTuple):
    representation: np.ndarray
    logits: np.ndarray


def init_params(shape_spec, rng):
    """He-uniform weights, zero biases."""
    layers = []
    for n_in, n_out in zip(shape_spec[:-1], shape_spec[1:]):
        a = np.sqrt(6.0 / n_in)
        layers.append((rng.uniform(-a, a, size=(n_out, n_in)), np.zeros(n_out)))
    return ModelParams.from_layers(layers)


def _as_batch(params, x):
    x = np.asarray(x, dtype=np.float64)
    X = np.atleast_2d(x)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise ShapeError(f"Input dimension {x.shape} does not match model input {params.input_dim}")
    return X, x.ndim == 1


def _forward_cache(params, X):
    # acts[l] is the input of layer l; pre[l] its pre-activation (backbone only)
    layers = params.layers
    acts, pre = [X], []
    h = X
    for W, b in layers[:-1]:
        z = h @ W.T + b
        h = np.maximum(z, 0.0)
        pre.append(z)
        acts.append(h)
    W, b = layers[-1]
    logits = h @ W.T + b
    return acts, pre, logits


def forward(params: ModelParams, x) -> ForwardOutput:
    """Representation f(x) and logits h(f(x)) for one sample or a batch."""
    X, single = _as_batch(params, x)
    acts, _, logits = _forward_cache(params, X)
    rep = acts[-1]
    if single:
        return ForwardOutput(rep[0], logits[0])
    return ForwardOutput(rep, logits)


def predict(params, X):
    return np.argmax(forward(params, np.atleast_2d(X)).logits, axis=1)


#
# Losses
#
def _check_pair(a, b, what):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def cross_entropy(logits, target):
    """-sum_c target_c log softmax(logits)_c.

    Works on a single sample (returns a float) or row-wise on a batch (returns
    one loss per row). An all-zero target yields zero loss.
    """
    logits, target = _check_pair(logits, target, "cross_entropy")
    if np.any(target < 0):
        raise ParameterError("cross_entropy targets must be nonnegative")
    loss = -np.sum(target * log_softmax(logits, axis=-1), axis=-1)
    return float(loss) if loss.ndim == 0 else loss


def kl_divergence_softened(teacher_logits, student_logits, tau):
    """KL(softmax(teacher / tau) || softmax(student / tau)), row-wise for batches."""
    if tau <= 0:
        raise ParameterError(f"Temperature tau must be positive (got {tau})")
    teacher_logits, student_logits = _check_pair(teacher_logits, student_logits, "kl_divergence_softened")
    log_pt = log_softmax(teacher_logits / tau, axis=-1)
    log_ps = log_softmax(student_logits / tau, axis=-1)
    # KL >= 0; clip negative rounding noise
    kl = np.maximum(np.sum(np.exp(log_pt) * (log_pt - log_ps), axis=-1), 0.0)
    return float(kl) if kl.ndim == 0 else kl


@dataclass(eq=False)
class LossSpec:
    """Weighted composite objective for one mini-batch.

    total = mean_i [ H(p_i, targets_i)
                     + lambda_b * KL(teacher_logits_i / tau || p_i / tau)
                     + lambda_r * KL(teacher_representation_i / tau || f_i / tau) ]

    Teacher outputs are plain arrays, so no gradient can reach the teachers.
    """

    targets: np.ndarray
    teacher_logits: Optional[np.ndarray] = None
    lambda_b: float = 0.0
    teacher_representation: Optional[np.ndarray] = None
    lambda_r: float = 0.0
    tau: float = 0.5

    def __post_init__(self):
        if self.tau <= 0:
            raise ParameterError(f"Temperature tau must be positive (got {self.tau})")

    @property
    def uses_distillation(self):
        return self.teacher_logits is not None and self.lambda_b != 0

    @property
    def uses_regularization(self):
        return self.teacher_representation is not None and self.lambda_r != 0


def _composite_loss(logits, rep, spec):
    if spec.targets.shape != logits.shape:
        raise ShapeError(f"targets {spec.targets.shape} do not match logits {logits.shape}")
    loss = np.mean(cross_entropy(logits, spec.targets))
    if spec.uses_distillation:
        loss += spec.lambda_b * np.mean(kl_divergence_softened(spec.teacher_logits, logits, spec.tau))
    if spec.uses_regularization:
        loss += spec.lambda_r * np.mean(kl_divergence_softened(spec.teacher_representation, rep, spec.tau))
    return float(loss)


def loss_value(params, x, spec: LossSpec):
    """Batch-mean composite loss without gradients."""
    X, _ = _as_batch(params, x)
    acts, _, logits = _forward_cache(params, X)
    return _composite_loss(logits, acts[-1], spec)


def backward(params: ModelParams, x, spec: LossSpec):
    """Batch-mean composite loss and its gradient w.r.t. every parameter.

    Returns
    -------
    loss : float
    grads : GradientBuffer
    """
    X, _ = _as_batch(params, x)
    n = X.shape[0]
    layers = params.layers
    acts, pre, logits = _forward_cache(params, X)
    rep = acts[-1]
    loss = _composite_loss(logits, rep, spec)

    targets = spec.targets
    p = softmax(logits, axis=1)
    dlogits = (targets.sum(axis=1, keepdims=True) * p - targets) / n
    if spec.uses_distillation:
        ps = softmax(logits / spec.tau, axis=1)
        pt = softmax(spec.teacher_logits / spec.tau, axis=1)
        dlogits += spec.lambda_b * (ps - pt) / (spec.tau * n)

    W_head, _ = layers[-1]
    grads = [None] * len(layers)
    grads[-1] = (dlogits.T @ rep, dlogits.sum(axis=0))
    drep = dlogits @ W_head
    if spec.uses_regularization:
        ps = softmax(rep / spec.tau, axis=1)
        pt = softmax(spec.teacher_representation / spec.tau, axis=1)
        drep = drep + spec.lambda_r * (ps - pt) / (spec.tau * n)

    for l in reversed(range(len(layers) - 1)):
        dz = drep * (pre[l] > 0)
        grads[l] = (dz.T @ acts[l], dz.sum(axis=0))
        drep = dz @ layers[l][0]

    flat = np.concatenate([np.concatenate([dW.ravel(), db]) for dW, db in grads])
    return loss, GradientBuffer(flat, params.shape_spec)


def sgd_step(params, grads, lr, momentum=0.0, weight_decay=0.0, velocity=None):
    """One SGD step with heavy-ball momentum and L2 weight decay.

    v <- momentum * v + grad + weight_decay * param
    param <- param - lr * v
    """
    if lr <= 0:
        raise ParameterError(f"Learning rate must be positive (got {lr})")
    params._check_compatible(grads)
    if velocity is None:
        v = grads.flat + weight_decay * params.flat
    else:
        params._check_compatible(velocity)
        v = momentum * velocity.flat + grads.flat + weight_decay * params.flat
    return ModelParams(params.flat - lr * v, params.shape_spec), GradientBuffer(v, params.shape_spec)
