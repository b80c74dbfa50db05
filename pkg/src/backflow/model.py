"""Minimal differentiable classifiers with closed-form gradients.

Two normalization-free architectures are provided: a softmax linear model
and a one-hidden-layer MLP (tanh or relu).  Parameters live in a single
flat float64 vector so the optimizer can treat them opaquely.  All
operations are pure functions of their inputs.
"""

from dataclasses import dataclass

import numpy as np

from .errors import NanGuardError

KINDS = ("softmax_linear", "mlp1")
ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class ModelSpec:
    kind: str
    input_dim: int
    num_classes: int
    hidden_dim: int | None = None
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.input_dim < 1:
            raise ValueError("input_dim must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.kind == "mlp1":
            if self.hidden_dim is None or self.hidden_dim < 1:
                raise ValueError("mlp1 requires a positive hidden_dim")
            if self.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class ProbePredictions:
    """Row-stochastic softmax outputs on a fixed probe set."""

    probs: np.ndarray
    probe_id: str = "adhoc"


def parameter_count(spec: ModelSpec) -> int:
    d, c = spec.input_dim, spec.num_classes
    if spec.kind == "softmax_linear":
        return d * c + c
    h = spec.hidden_dim
    return d * h + h + h * c + c


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Seeded uniform(-a, a) weight init with a = sqrt(6/(fan_in+fan_out)).

    Biases start at zero.  Identical (spec, seed) yield bit-identical vectors.
    """
    rng = np.random.default_rng(seed)
    d, c = spec.input_dim, spec.num_classes

    def layer(fan_in, fan_out):
        a = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_out, fan_in))

    if spec.kind == "softmax_linear":
        w = layer(d, c)
        return np.concatenate([w.ravel(), np.zeros(c)])
    h = spec.hidden_dim
    w1 = layer(d, h)
    w2 = layer(h, c)
    return np.concatenate([w1.ravel(), np.zeros(h), w2.ravel(), np.zeros(c)])


def _unpack(spec: ModelSpec, params: np.ndarray):
    d, c = spec.input_dim, spec.num_classes
    if params.shape != (parameter_count(spec),):
        raise ValueError(
            f"parameter vector has length {params.shape}, expected {parameter_count(spec)}"
        )
    if spec.kind == "softmax_linear":
        w = params[: d * c].reshape(c, d)
        b = params[d * c :]
        return w, b
    h = spec.hidden_dim
    off = 0
    w1 = params[off : off + d * h].reshape(h, d)
    off += d * h
    b1 = params[off : off + h]
    off += h
    w2 = params[off : off + h * c].reshape(c, h)
    off += h * c
    b2 = params[off:]
    return w1, b1, w2, b2


def _check_inputs(spec: ModelSpec, inputs: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(inputs, dtype=np.float64))
    if x.shape[1] != spec.input_dim:
        raise ValueError(f"inputs have {x.shape[1]} features, spec expects {spec.input_dim}")
    return x


def _activation(spec: ModelSpec, pre: np.ndarray) -> np.ndarray:
    if spec.activation == "tanh":
        return np.tanh(pre)
    return np.maximum(pre, 0.0)


def _logits(spec: ModelSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    if spec.kind == "softmax_linear":
        w, b = _unpack(spec, params)
        return x @ w.T + b
    w1, b1, w2, b2 = _unpack(spec, params)
    hidden = _activation(spec, x @ w1.T + b1)
    return hidden @ w2.T + b2


def _softmax(z: np.ndarray) -> np.ndarray:
    # Max subtraction keeps the exponentials bounded for the NaN guard.
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def forward(spec: ModelSpec, params: np.ndarray, inputs, probe_id: str = "adhoc") -> ProbePredictions:
    """Softmax class probabilities for a batch of feature vectors."""
    x = _check_inputs(spec, inputs)
    return ProbePredictions(_softmax(_logits(spec, params, x)), probe_id)


def loss_and_grad(spec: ModelSpec, params: np.ndarray, inputs, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient in the flat layout."""
    x = _check_inputs(spec, inputs)
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (x.shape[0],):
        raise ValueError("labels must be one integer per input row")
    if np.any(y < 0) or np.any(y >= spec.num_classes):
        raise ValueError("labels out of range")
    n = x.shape[0]

    if spec.kind == "softmax_linear":
        w, b = _unpack(spec, params)
        z = x @ w.T + b
        hidden = pre = None
    else:
        w1, b1, w2, b2 = _unpack(spec, params)
        pre = x @ w1.T + b1
        hidden = _activation(spec, pre)
        z = hidden @ w2.T + b2

    with np.errstate(over="ignore", invalid="ignore"):  # NaN guard below decides
        zmax = z.max(axis=1, keepdims=True)
        logsum = np.log(np.exp(z - zmax).sum(axis=1, keepdims=True)) + zmax
        loss = float((logsum[:, 0] - z[np.arange(n), y]).mean())

        dz = np.exp(z - logsum)  # softmax probabilities
        dz[np.arange(n), y] -= 1.0
        dz /= n

    if spec.kind == "softmax_linear":
        grad = np.concatenate([(dz.T @ x).ravel(), dz.sum(axis=0)])
    else:
        gw2 = dz.T @ hidden
        gb2 = dz.sum(axis=0)
        dh = dz @ w2
        if spec.activation == "tanh":
            dpre = dh * (1.0 - hidden * hidden)
        else:
            dpre = dh * (pre > 0.0)
        grad = np.concatenate([(dpre.T @ x).ravel(), dpre.sum(axis=0), gw2.ravel(), gb2])

    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NanGuardError("non-finite loss or gradient", {"loss": loss, "kind": spec.kind})
    return loss, grad


def penultimate_features(spec: ModelSpec, params: np.ndarray, inputs) -> np.ndarray:
    """Input to the final linear layer (the inputs themselves for the linear model)."""
    x = _check_inputs(spec, inputs)
    if spec.kind == "softmax_linear":
        return x.copy()
    w1, b1, _, _ = _unpack(spec, params)
    return _activation(spec, x @ w1.T + b1)
