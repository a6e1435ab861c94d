"""Feed-forward softmax classifier with exact backpropagation and SGD.

The network is ``d -> h_1 -> ... -> h_m -> K`` with ReLU hidden layers and a
linear output layer producing logits. Loss gradients arrive as ``dL/du``
(with respect to the softmax output) and are pushed through the softmax
Jacobian ``diag(u) - u u^T`` here.
"""

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from vblab.errors import ContractError, DivergenceError, ParameterError
from vblab.logging import get_logger
from vblab.rng import make_rng

logger = get_logger('nn')

CHECKPOINT_MAGIC = 'VBLAB-MLP-1'


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max subtraction."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


class MlpModel:
    """Multilayer perceptron with ReLU hidden layers and softmax output."""

    def __init__(self, layer_dims: Sequence[int], weights: Sequence[np.ndarray],
                 biases: Sequence[np.ndarray]):
        self.layer_dims = [int(n) for n in layer_dims]
        if len(self.layer_dims) < 2 or min(self.layer_dims) < 1:
            raise ContractError(f"Invalid layer dimensions: {self.layer_dims}")
        if self.layer_dims[-1] < 2:
            raise ContractError("The output layer needs K >= 2 classes")
        self.weights = [np.asarray(w, dtype=float) for w in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        expected = list(zip(self.layer_dims[:-1], self.layer_dims[1:]))
        if len(self.weights) != len(expected) or len(self.biases) != len(expected):
            raise ContractError("Parameter count does not match layer dimensions")
        for (fan_in, fan_out), w, b in zip(expected, self.weights, self.biases):
            if w.shape != (fan_in, fan_out) or b.shape != (fan_out,):
                raise ContractError(
                    f"Layer {fan_in}->{fan_out} has weights {w.shape}, biases {b.shape}"
                )

    @classmethod
    def initialize(cls, layer_dims: Sequence[int], seed: int) -> 'MlpModel':
        """He-normal weights (std ``sqrt(2 / fan_in)``), zero biases."""
        rng = make_rng(seed, 'init')
        weights, biases = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            weights.append(rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in))
            biases.append(np.zeros(fan_out))
        return cls(layer_dims, weights, biases)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def num_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def parameters(self) -> List[np.ndarray]:
        """Parameters in update order: ``W0, b0, W1, b1, ...``."""
        params: List[np.ndarray] = []
        for w, b in zip(self.weights, self.biases):
            params.extend([w, b])
        return params

    def copy(self) -> 'MlpModel':
        return MlpModel(self.layer_dims, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases])

    def _check_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch, dtype=float)
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise ContractError(
                f"Expected a batch of width {self.input_dim}, got shape {batch.shape}"
            )
        return batch

    def _forward_layers(self, batch: np.ndarray) -> Tuple[List[np.ndarray], List[np.ndarray]]:
        inputs, pre = [batch], []
        activation = batch
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = activation @ w + b
            pre.append(z)
            activation = z if i == last else np.maximum(z, 0.0)
            if i != last:
                inputs.append(activation)
        return inputs, pre

    def forward(self, batch: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Return ``(logits, probs)`` for a batch of feature rows."""
        batch = self._check_batch(batch)
        _, pre = self._forward_layers(batch)
        logits = pre[-1]
        return logits, softmax(logits)

    def predict_proba(self, batch: np.ndarray) -> np.ndarray:
        return self.forward(batch)[1]


def forward(model: MlpModel, batch: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Functional alias of ``MlpModel.forward``."""
    return model.forward(batch)


def softmax_backward(probs: np.ndarray, dL_dprobs: np.ndarray) -> np.ndarray:
    """Push ``dL/du`` through the softmax Jacobian to ``dL/dlogits``."""
    inner = (dL_dprobs * probs).sum(axis=1, keepdims=True)
    return probs * (dL_dprobs - inner)


def backward(model: MlpModel, batch: np.ndarray,
             dL_dprobs: np.ndarray) -> List[np.ndarray]:
    """Gradients of the mean batch loss for every parameter.

    Args:
        model: The network.
        batch: ``N x d`` inputs.
        dL_dprobs: ``N x K`` per-sample gradients of the loss w.r.t. the
            softmax output.

    Returns:
        Gradients in the order of ``model.parameters``.
    """
    batch = model._check_batch(batch)
    inputs, pre = model._forward_layers(batch)
    probs = softmax(pre[-1])
    dL_dprobs = np.asarray(dL_dprobs, dtype=float)
    if dL_dprobs.shape != probs.shape:
        raise ContractError(
            f"dL_dprobs has shape {dL_dprobs.shape}, expected {probs.shape}"
        )

    delta = softmax_backward(probs, dL_dprobs) / batch.shape[0]
    grads: List[np.ndarray] = []
    for i in reversed(range(len(model.weights))):
        grads.append(delta.sum(axis=0))
        grads.append(inputs[i].T @ delta)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (pre[i - 1] > 0)
    grads.reverse()
    return grads


class Schedule(str, Enum):
    CONSTANT = 'constant'
    COSINE = 'cosine'
    EXPONENTIAL = 'exponential'


@dataclass
class OptimizerState:
    """SGD with momentum, L1 decay and a per-epoch learning-rate schedule."""
    lr0: float
    momentum: float = 0.9
    l1_decay: float = 0.0
    schedule: Schedule = Schedule.COSINE
    total_epochs: int = 1
    gamma: float = 0.97
    velocity: List[np.ndarray] = field(default_factory=list, repr=False)

    def __post_init__(self) -> None:
        self.schedule = Schedule(self.schedule)
        if not self.lr0 >= 0:
            raise ParameterError(f"lr0 must be >= 0, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ParameterError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.l1_decay < 0:
            raise ParameterError(f"l1_decay must be >= 0, got {self.l1_decay}")
        if self.total_epochs < 1:
            raise ParameterError(f"total_epochs must be >= 1, got {self.total_epochs}")

    @classmethod
    def for_model(cls, model: MlpModel, **kwargs) -> 'OptimizerState':
        state = cls(**kwargs)
        state.velocity = [np.zeros_like(p) for p in model.parameters]
        return state

    def learning_rate(self, epoch: int) -> float:
        if self.schedule is Schedule.CONSTANT:
            return self.lr0
        if self.schedule is Schedule.EXPONENTIAL:
            return self.lr0 * self.gamma ** epoch
        return self.lr0 * 0.5 * (1.0 + math.cos(math.pi * epoch / self.total_epochs))


def sgd_step(model: MlpModel, grads: Sequence[np.ndarray], opt: OptimizerState,
             epoch: int) -> MlpModel:
    """One in-place SGD update; returns ``model``.

    ``v <- momentum * v + grad + l1_decay * sign(param)``, then
    ``param <- param - lr * v``. The update is all-or-nothing: on
    ``DivergenceError`` neither parameters nor velocity have changed.
    """
    if not 0 <= epoch < opt.total_epochs:
        raise ParameterError(f"epoch must lie in [0, {opt.total_epochs}), got {epoch}")
    params = model.parameters
    if len(grads) != len(params):
        raise ContractError(f"Expected {len(params)} gradients, got {len(grads)}")
    for i, g in enumerate(grads):
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"Non-finite gradient in parameter {i} at epoch {epoch}")
    if not opt.velocity:
        opt.velocity = [np.zeros_like(p) for p in params]

    lr = opt.learning_rate(epoch)
    new_velocity, new_params = [], []
    for p, g, v in zip(params, grads, opt.velocity):
        if v.shape != p.shape:
            raise ContractError(f"Velocity shape {v.shape} != parameter shape {p.shape}")
        step = opt.momentum * v + g
        if opt.l1_decay:
            step += opt.l1_decay * np.sign(p)
        updated = p - lr * step
        if not np.all(np.isfinite(updated)):
            raise DivergenceError(f"Parameters became non-finite at epoch {epoch}")
        new_velocity.append(step)
        new_params.append(updated)

    for p, v, step, updated in zip(params, opt.velocity, new_velocity, new_params):
        v[...] = step
        p[...] = updated
    return model


# Checkpoints ----------------------------------------------------------------

def save_checkpoint(model: MlpModel, path: Path) -> Path:
    """Write the model as JSON with the ``VBLAB-MLP-1`` header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {
        'magic': CHECKPOINT_MAGIC,
        'layer_dims': model.layer_dims,
        'activation': 'relu',
        'layers': [
            {'weights': w.ravel().tolist(), 'biases': b.tolist()}
            for w, b in zip(model.weights, model.biases)
        ],
    }
    path.write_text(json.dumps(document), encoding='utf-8')
    logger.info("Saved checkpoint to %s", path)
    return path


def load_checkpoint(path: Path) -> MlpModel:
    """Read a checkpoint written by ``save_checkpoint``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    document = json.loads(path.read_text(encoding='utf-8'))
    if document.get('magic') != CHECKPOINT_MAGIC:
        raise ContractError(f"{path} is not a {CHECKPOINT_MAGIC} checkpoint")
    dims: List[int] = document['layer_dims']
    weights, biases = [], []
    for (fan_in, fan_out), layer in zip(zip(dims[:-1], dims[1:]), document['layers']):
        weights.append(np.array(layer['weights'], dtype=float).reshape(fan_in, fan_out))
        biases.append(np.array(layer['biases'], dtype=float))
    return MlpModel(dims, weights, biases)


def build_model(input_dim: int, hidden: Sequence[int], num_classes: int,
                seed: int, checkpoint: Optional[Path] = None) -> MlpModel:
    """Fresh model for ``input_dim -> hidden -> num_classes`` (or a checkpoint)."""
    if checkpoint is not None:
        model = load_checkpoint(checkpoint)
        expected = [input_dim, *hidden, num_classes]
        if model.layer_dims != expected:
            raise ContractError(
                f"Checkpoint dims {model.layer_dims} do not match {expected}"
            )
        return model
    return MlpModel.initialize([input_dim, *hidden, num_classes], seed)
