"""Minimal reverse-mode differentiable kernel.

Every tensor produced by an operation remembers its parents and a closure that maps the
output gradient to parent gradients. `Tensor.backward()` walks the graph in reverse
topological order and accumulates into the `grad` buffers of leaf tensors that asked for
gradients. Arrays are plain numpy arrays; no operation here ever runs on another device.
"""
import enum
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from inrhsi.errors import ConfigurationError, DimensionError, NumericError, PrecisionError

logger = logging.getLogger(__name__)

DEFAULT_SLOPE = 0.01
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPSILON = 1e-8
NORM_EPSILON = 1e-5


class Precision(enum.Enum):
    STANDARD = "standard"
    VERIFICATION = "verification"

    @property
    def dtype(self):
        return np.float32 if self is Precision.STANDARD else np.float64

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError as exc:
            raise ConfigurationError(f"Unknown precision mode: {value!r}") from exc


class Tensor:
    """Dense real array with optional gradient tracking.

    Leaf tensors created with ``requires_grad=True`` own a zero-initialised ``grad`` buffer of
    the same shape. Intermediate results track gradients but do not keep a buffer.
    """

    def __init__(self, data, requires_grad=False, precision=Precision.STANDARD, _parents=(), _backward=None, name=""):
        precision = Precision.parse(precision)
        array = np.asarray(data, dtype=precision.dtype)
        if not np.all(np.isfinite(array)):
            raise NumericError(f"Non-finite value in tensor {name or 'result'} of shape {array.shape}")
        self.data = array
        self.precision = precision
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = tuple(_parents)
        self._backward = _backward
        self.grad = np.zeros_like(array) if self.requires_grad and not self._parents else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return not self._parents

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, precision=self.precision, name=self.name)

    def zero_grad(self):
        if self.requires_grad and self.is_leaf:
            self.grad = np.zeros_like(self.data)

    def backward(self, grad=None):
        if not self.requires_grad:
            return
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() without a seed gradient needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(_topological_order(self)):
            node_grad = grads.pop(id(node), None)
            if node_grad is None:
                continue
            if node._backward is None:
                node.grad += node_grad
                continue
            for parent, parent_grad in zip(node._parents, node._backward(node_grad)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(parent_grad)):
                    raise NumericError(f"Non-finite gradient flowing into tensor of shape {parent.shape}")
                key = id(parent)
                grads[key] = grads[key] + parent_grad if key in grads else parent_grad

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, precision={self.precision.value}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def _check_precision(*tensors):
    modes = {tensor.precision for tensor in tensors}
    if len(modes) > 1:
        raise PrecisionError("Standard and verification tensors cannot be mixed in one graph")
    return modes.pop()


def _as_tensor(value, like):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, precision=like.precision)


def _result(data, parents, backward):
    precision = _check_precision(*parents)
    requires_grad = any(parent.requires_grad for parent in parents)
    if not requires_grad:
        return Tensor(data, precision=precision)
    return Tensor(data, requires_grad=True, precision=precision, _parents=parents, _backward=backward)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise and structural operations


def add(a, b):
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise DimensionError(f"Cannot broadcast shapes {a.shape} and {b.shape}") from exc

    def backward(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return _result(out, (a, b), backward)


def mul(a, b):
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise DimensionError(f"Cannot broadcast shapes {a.shape} and {b.shape}") from exc

    def backward(grad):
        return _unbroadcast(grad * b.data, a.shape), _unbroadcast(grad * a.data, b.shape)

    return _result(out, (a, b), backward)


def scale(x, factor):
    factor = float(factor)

    def backward(grad):
        return (grad * factor,)

    return _result(x.data * factor, (x,), backward)


def matmul(a, b):
    """2-D product, or a batched product when both operands carry the same leading dimension."""
    b = _as_tensor(b, a)
    if a.ndim not in (2, 3) or a.ndim != b.ndim or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if a.ndim == 3 and a.shape[0] != b.shape[0]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")

    def backward(grad):
        return grad @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ grad

    return _result(a.data @ b.data, (a, b), backward)


def reshape(x, shape):
    original = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"Cannot reshape {original} into {tuple(shape)}") from exc

    def backward(grad):
        return (grad.reshape(original),)

    return _result(out, (x,), backward)


def transpose(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(grad):
        return (np.transpose(grad, inverse),)

    return _result(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), backward)


def getitem(x, index):
    """Basic slicing only; the backward scatter relies on the selection being duplicate-free."""
    out = x.data[index]

    def backward(grad):
        full = np.zeros_like(x.data)
        full[index] += grad
        return (full,)

    return _result(np.array(out, copy=True), (x,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat needs at least one tensor")
    sizes = [tensor.shape[axis] for tensor in tensors]
    try:
        out = np.concatenate([tensor.data for tensor in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"Cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from exc
    splits = np.cumsum(sizes)[:-1]

    def backward(grad):
        return tuple(np.split(grad, splits, axis=axis))

    return _result(out, tuple(tensors), backward)


# activations


def leaky_relu(x, slope=DEFAULT_SLOPE):
    if not 0.0 < slope < 1.0:
        raise ConfigurationError(f"Leaky-ReLU slope must lie in (0, 1), got {slope}")
    positive = x.data >= 0

    def backward(grad):
        return (np.where(positive, grad, grad * slope),)

    return _result(np.where(positive, x.data, x.data * slope), (x,), backward)


def relu(x):
    positive = x.data > 0

    def backward(grad):
        return (np.where(positive, grad, 0.0).astype(grad.dtype),)

    return _result(np.where(positive, x.data, 0.0), (x,), backward)


def sigmoid(x):
    out = expit(x.data)

    def backward(grad):
        return (grad * out * (1.0 - out),)

    return _result(out, (x,), backward)


def clamp_unit(x):
    inside = (x.data >= 0.0) & (x.data <= 1.0)

    def backward(grad):
        return (np.where(inside, grad, 0.0).astype(grad.dtype),)

    return _result(np.clip(x.data, 0.0, 1.0), (x,), backward)


# layers


def dense_forward(x, w, b):
    """Affine layer ``x @ w + b`` for x[batch, in_dim], w[in_dim, out_dim], b[out_dim]."""
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"dense_forward: input shape {x.shape} does not fit weight shape {w.shape}")
    if b.shape != (w.shape[1],):
        raise DimensionError(f"dense_forward: bias shape {b.shape} does not fit weight shape {w.shape}")
    return add(matmul(x, w), b)


def conv_output_size(size, kernel, stride, padding):
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise ConfigurationError(
            f"Convolution geometry is not an exact fit: size={size}, kernel={kernel}, "
            f"stride={stride}, padding={padding}"
        )
    return span // stride + 1


def conv2d_forward(x, kernels, bias, stride=1, padding=0):
    """Cross-correlation of x[C_in, H, W] with kernels[C_out, C_in, k, k] via im2col."""
    if x.ndim != 3 or kernels.ndim != 4 or kernels.shape[1] != x.shape[0] or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"conv2d_forward: input shape {x.shape} does not fit kernel shape {kernels.shape}")
    if bias.shape != (kernels.shape[0],):
        raise DimensionError(f"conv2d_forward: bias shape {bias.shape} does not fit kernel shape {kernels.shape}")
    if stride < 1 or padding < 0:
        raise ConfigurationError(f"Invalid stride {stride} or padding {padding}")
    c_in, height, width = x.shape
    c_out, _, k, _ = kernels.shape
    out_h = conv_output_size(height, k, stride, padding)
    out_w = conv_output_size(width, k, stride, padding)

    padded = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    padded = np.ascontiguousarray(padded)
    s_c, s_h, s_w = padded.strides
    patches = np.lib.stride_tricks.as_strided(
        padded,
        shape=(c_in, k, k, out_h, out_w),
        strides=(s_c, s_h, s_w, stride * s_h, stride * s_w),
        writeable=False,
    )
    cols = patches.reshape(c_in * k * k, out_h * out_w)
    w_mat = kernels.data.reshape(c_out, -1)
    out = (w_mat @ cols + bias.data[:, None]).reshape(c_out, out_h, out_w)

    def backward(grad):
        grad_mat = grad.reshape(c_out, out_h * out_w)
        grad_kernels = (grad_mat @ cols.T).reshape(kernels.shape)
        grad_bias = grad_mat.sum(axis=1)
        grad_cols = (w_mat.T @ grad_mat).reshape(c_in, k, k, out_h, out_w)
        grad_padded = np.zeros_like(padded)
        for ki in range(k):
            for kj in range(k):
                grad_padded[:, ki:ki + stride * out_h:stride, kj:kj + stride * out_w:stride] += grad_cols[:, ki, kj]
        grad_x = grad_padded[:, padding:padding + height, padding:padding + width]
        return grad_x, grad_kernels, grad_bias

    return _result(out, (x, kernels, bias), backward)


def instance_norm(x, eps=NORM_EPSILON):
    """Per-channel normalisation of x[C, H, W] over its spatial positions."""
    if x.ndim != 3:
        raise DimensionError(f"instance_norm expects [C, H, W], got {x.shape}")
    count = x.shape[1] * x.shape[2]
    centered = x.data - x.data.mean(axis=(1, 2), keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=(1, 2), keepdims=True) + eps)
    normed = centered * inv_std

    def backward(grad):
        grad_sum = grad.sum(axis=(1, 2), keepdims=True)
        dot = (grad * normed).sum(axis=(1, 2), keepdims=True)
        return (inv_std / count * (count * grad - grad_sum - normed * dot),)

    return _result(normed, (x,), backward)


# losses


def _loss_operands(pred, target, label):
    target = _as_tensor(target.data if isinstance(target, Tensor) else target, pred)
    if pred.shape != target.shape:
        raise DimensionError(f"{label}: prediction shape {pred.shape} differs from target shape {target.shape}")
    return target


def l1_loss(pred, target):
    """Mean absolute difference; the subgradient at an exact tie is 0."""
    target = _loss_operands(pred, target, "l1_loss")
    diff = pred.data - target.data
    count = diff.size

    def backward(grad):
        return (np.sign(diff) * (grad / count),)

    return _result(np.abs(diff).mean(), (pred,), backward)


def mse_loss(pred, target):
    target = _loss_operands(pred, target, "mse_loss")
    diff = pred.data - target.data
    count = diff.size

    def backward(grad):
        return (diff * (2.0 * grad / count),)

    return _result((diff ** 2).mean(), (pred,), backward)


# optimisation


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    epsilon: float = ADAM_EPSILON

    @classmethod
    def fresh(cls, like, **hyper):
        data = like.data if isinstance(like, Tensor) else np.asarray(like)
        return cls(m=np.zeros_like(data), v=np.zeros_like(data), **hyper)


def adam_step(params, grads, state, lr):
    """Bias-corrected Adam update applied in place to ``params.data``."""
    grads = grads.data if isinstance(grads, Tensor) else np.asarray(grads)
    if grads.shape != params.shape or state.m.shape != params.shape or state.v.shape != params.shape:
        raise DimensionError(
            f"adam_step: parameter shape {params.shape}, gradient shape {grads.shape}, "
            f"moment shape {state.m.shape} must agree"
        )
    grads = grads.astype(params.data.dtype, copy=False)
    state.step_count += 1
    step = state.step_count
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1 ** step)
    v_hat = state.v / (1.0 - state.beta2 ** step)
    update = lr * m_hat / (np.sqrt(v_hat) + state.epsilon)
    if not np.all(np.isfinite(update)):
        raise NumericError(f"Non-finite Adam update for parameter {params.name or params.shape}")
    params.data -= update.astype(params.data.dtype, copy=False)
    return params, state


# verification


def _scalar(value):
    if isinstance(value, Tensor):
        return value.item()
    return float(value)


def grad_check(f, theta, h=1e-5, max_coords=None, rng=None):
    """Largest relative gap between the analytic gradient of ``f`` and central differences.

    ``f`` maps a flat parameter tensor to a scalar. Errors are scaled by
    ``max(1, |analytic|, |numeric|)``. With ``max_coords`` only a random subset is probed.
    """
    if theta.precision is not Precision.VERIFICATION:
        raise PrecisionError("grad_check runs in verification precision only")
    if h <= 0:
        raise ConfigurationError(f"Finite-difference step must be positive, got {h}")

    leaf = Tensor(theta.data.copy(), requires_grad=True, precision=Precision.VERIFICATION)
    out = f(leaf)
    if isinstance(out, Tensor) and out.requires_grad:
        out.backward()
    analytic = leaf.grad.reshape(-1)

    probe = Tensor(theta.data.copy(), precision=Precision.VERIFICATION)
    flat = probe.data.reshape(-1)
    coords = np.arange(flat.size)
    if max_coords is not None and max_coords < flat.size:
        rng = rng if rng is not None else np.random.default_rng(0)
        coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))

    worst = 0.0
    for index in coords:
        original = flat[index]
        flat[index] = original + h
        upper = _scalar(f(probe))
        flat[index] = original - h
        lower = _scalar(f(probe))
        flat[index] = original
        numeric = (upper - lower) / (2.0 * h)
        if not np.isfinite(numeric):
            raise NumericError(f"Non-finite finite difference at coordinate {index}")
        exact = float(analytic[index])
        error = abs(exact - numeric) / max(1.0, abs(exact), abs(numeric))
        worst = max(worst, error)
    logger.debug("grad_check probed %d coordinates, max relative error %.3e", len(coords), worst)
    return worst
