"""Dense float64 primitives with hand-derived backward passes, SGD and gradient checking."""

import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

CHECKPOINT_MAGIC = b"RANCKPT1"


class DimensionError(ValueError):
    """Raised when array shapes do not agree."""


class NonFiniteError(ValueError):
    """Raised when a loss, gradient or parameter is NaN or infinite."""


@dataclass(eq=False)
class Parameter:
    """A trainable array with an accumulated gradient of the same shape."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.grad.shape != self.value.shape:
            raise DimensionError(f"grad shape {self.grad.shape} != value shape {self.value.shape} for {self.name}")

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def accumulate(self, grad: np.ndarray):
        if grad.shape != self.value.shape:
            raise DimensionError(f"cannot accumulate {grad.shape} into {self.name} {self.value.shape}")
        self.grad += grad


def as_vector(values) -> np.ndarray:
    """Return a finite 1-D float64 array."""
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size == 0:
        raise DimensionError(f"expected a non-empty vector, got shape {vec.shape}")
    return vec


def as_matrix(values) -> np.ndarray:
    """Return a 2-D float64 array."""
    mat = np.asarray(values, dtype=np.float64)
    if mat.ndim != 2 or mat.size == 0:
        raise DimensionError(f"expected a non-empty matrix, got shape {mat.shape}")
    return mat


def ensure_finite(name: str, values: np.ndarray):
    if not np.all(np.isfinite(values)):
        bad = int(np.size(values) - np.count_nonzero(np.isfinite(values)))
        raise NonFiniteError(f"{name} has {bad} non-finite entries")


# ---------------------------------------------------------------------------
# Primitives. Every forward accepts leading batch dimensions.
# ---------------------------------------------------------------------------

def affine(x: np.ndarray, W: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Return W x + b over the last axis of x."""
    if W.ndim != 2 or b.ndim != 1:
        raise DimensionError(f"affine expects a matrix and a vector, got {W.shape} and {b.shape}")
    if x.shape[-1] != W.shape[1] or b.shape[0] != W.shape[0]:
        raise DimensionError(f"affine shapes disagree: x {x.shape}, W {W.shape}, b {b.shape}")
    return x @ W.T + b


def affine_backward(x: np.ndarray, W: np.ndarray, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of affine w.r.t. (x, W, b), summed over batch dimensions."""
    grad_x = grad_out @ W
    flat_g = grad_out.reshape(-1, W.shape[0])
    flat_x = x.reshape(-1, W.shape[1])
    return grad_x, flat_g.T @ flat_x, flat_g.sum(axis=0)


def sigmoid(z):
    """Logistic function in the branch-free form exp(-log(1 + exp(-z))).

    Saturates in float64: the result is exactly 1.0 for z above about 37
    and underflows toward 0.0 only far below -700, so callers must not
    rely on a value strictly below 1.
    """
    return np.exp(-np.logaddexp(0.0, -np.asarray(z, dtype=np.float64)))


def sigmoid_grad(s):
    """Derivative of the sigmoid expressed through its output s."""
    return s * (1.0 - s)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with max subtraction."""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, label) -> Tuple[np.ndarray, np.ndarray]:
    """Return (-log softmax(logits)[label], softmax - onehot).

    Accepts a single logit vector with an int label, or a (B, C) batch with a
    (B,) label array; the loss is then per sample.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(label)
    num_classes = logits.shape[-1]
    if num_classes < 2:
        raise DimensionError("softmax_cross_entropy needs at least 2 classes")
    if labels.shape != logits.shape[:-1]:
        raise DimensionError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, labels[..., None].astype(np.int64), axis=-1)[..., 0]
    loss = log_norm - picked
    grad = softmax(logits)
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, labels[..., None].astype(np.int64), 1.0, axis=-1)
    return loss, grad - onehot


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------

def sgd_step(params: Iterable[Parameter], lr: float, momentum: float, velocity: Dict[str, np.ndarray]):
    """Classical momentum: v <- m v + g; value <- value - lr v.

    `velocity` is keyed by parameter name and updated in place.
    """
    params = list(params)
    for param in params:
        if not np.all(np.isfinite(param.grad)):
            raise NonFiniteError(
                f"non-finite gradient in {param.name}: max |g| = {np.nanmax(np.abs(param.grad))}, "
                f"nan count = {int(np.isnan(param.grad).sum())}"
            )
    for param in params:
        if momentum == 0.0:
            param.value -= lr * param.grad
            continue
        v = velocity.get(param.name)
        if v is None:
            v = np.zeros_like(param.value)
        v = momentum * v + param.grad
        velocity[param.name] = v
        param.value -= lr * v


class SGD:
    """Momentum SGD over a fixed parameter list."""

    def __init__(self, params: Iterable[Parameter], lr: float = 0.01, momentum: float = 0.9):
        self.params = list(params)
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate parameter names: {names}")
        self.lr = lr
        self.momentum = momentum
        self.velocity: Dict[str, np.ndarray] = {}

    def zero_grad(self):
        for param in self.params:
            param.zero_grad()

    def step(self):
        sgd_step(self.params, self.lr, self.momentum, self.velocity)


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------

def finite_diff_grad(loss_fn: Callable[[], float], params: Iterable[Parameter],
                     epsilon: float = 1e-5) -> Dict[str, np.ndarray]:
    """Central differences (f(p+e) - f(p-e)) / 2e for every scalar entry.

    loss_fn takes no arguments and reads the current parameter values.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    numeric = {}
    for param in params:
        grad = np.zeros_like(param.value)
        flat = param.value.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + epsilon
            plus = float(loss_fn())
            flat[i] = original - epsilon
            minus = float(loss_fn())
            flat[i] = original
            grad.reshape(-1)[i] = (plus - minus) / (2.0 * epsilon)
        numeric[param.name] = grad
    return numeric


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3,
                   abs_tol: float = 1e-7) -> float:
    """Max relative error between two gradients.

    Entries where both magnitudes are below `floor` are scored as
    diff / abs_tol * 1e-4, so they pass the 1e-4 threshold iff diff < abs_tol.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    diff = np.abs(analytic - numeric)
    large = scale >= floor
    rel = np.zeros_like(diff)
    rel[large] = diff[large] / scale[large]
    rel[~large] = diff[~large] / abs_tol * 1e-4
    return float(rel.max()) if rel.size else 0.0


@dataclass
class GradientCheck:
    name: str
    max_relative_error: float
    max_absolute_error: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < 1e-4


def check_gradients(loss_fn: Callable[[], float], params: List[Parameter],
                    epsilon: float = 1e-5) -> List[GradientCheck]:
    """Compare each parameter's accumulated .grad with central differences."""
    numeric = finite_diff_grad(loss_fn, params, epsilon)
    report = []
    for param in params:
        num = numeric[param.name]
        report.append(GradientCheck(
            name=param.name,
            max_relative_error=relative_error(param.grad, num),
            max_absolute_error=float(np.max(np.abs(param.grad - num))) if num.size else 0.0,
        ))
    return report


# ---------------------------------------------------------------------------
# Checkpoint container
#
#   magic    8 bytes  b"RANCKPT1"
#   count    uint32 LE
#   entries  uint16 LE name length, UTF-8 name, uint8 ndim,
#            ndim x uint32 LE dims, prod(dims) float64 LE values
# ---------------------------------------------------------------------------

def save_checkpoint(path: str, params: Iterable[Parameter]):
    """Write parameters to the binary container."""
    params = list(params)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(params)))
        for param in params:
            name = param.name.encode("utf-8")
            f.write(struct.pack("<H", len(name)))
            f.write(name)
            f.write(struct.pack("<B", param.value.ndim))
            f.write(struct.pack(f"<{param.value.ndim}I", *param.value.shape))
            f.write(np.ascontiguousarray(param.value, dtype="<f8").tobytes())


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    """Read the binary container into a name -> array mapping."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    offset = 8
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(blob, dtype="<f8", count=size, offset=offset)
        offset += 8 * size
        if name in arrays:
            raise ValueError(f"duplicate entry {name} in {path}")
        arrays[name] = values.astype(np.float64).reshape(shape)
    if offset != len(blob):
        raise ValueError(f"{path} has {len(blob) - offset} trailing bytes")
    return arrays


def assign_checkpoint(params: Iterable[Parameter], arrays: Dict[str, np.ndarray],
                      strict: bool = True) -> List[str]:
    """Copy arrays into matching parameters; returns the names that were loaded."""
    loaded = []
    for param in params:
        if param.name not in arrays:
            if strict:
                raise KeyError(f"checkpoint has no entry for {param.name}")
            continue
        value = arrays[param.name]
        if value.shape != param.value.shape:
            raise DimensionError(f"{param.name}: checkpoint shape {value.shape} != model shape {param.value.shape}")
        param.value[...] = value
        loaded.append(param.name)
    return loaded


def random_parameter(rng: np.random.Generator, name: str, shape: Tuple[int, ...],
                     scale: Optional[float] = None) -> Parameter:
    """Uniform Glorot-style initialisation."""
    if scale is None:
        fan = sum(shape) if len(shape) > 1 else shape[0]
        scale = np.sqrt(6.0 / max(fan, 1))
    return Parameter(name, rng.uniform(-scale, scale, size=shape))
