"""Layer primitives with explicit forward/backward passes.

Tensors are NHWC numpy arrays. Every layer caches what its backward pass
needs during ``forward`` and writes parameter gradients into ``grads`` on
``backward``. Composite modules register children and expose a flat,
dotted namespace of parameters and buffers.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np

from . import _kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ShapeError(ValueError):
    pass


class Module:
    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}

    def add(self, name: str, module: "Module") -> "Module":
        self.children[name] = module
        return module

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self.children.values():
            yield from child.modules()

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.params.items():
            yield prefix + k, v
        for name, child in self.children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def named_grads(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k in self.params:
            yield prefix + k, self.grads[k]
        for name, child in self.children.items():
            yield from child.named_grads(f"{prefix}{name}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for k, v in self.buffers.items():
            yield prefix + k, v
        for name, child in self.children.items():
            yield from child.named_buffers(f"{prefix}{name}.")

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {f"param:{k}": v for k, v in self.named_parameters()}
        state.update({f"buffer:{k}": v for k, v in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.state_dict()
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if strict and (missing or unexpected):
            raise KeyError(f"state mismatch; missing={missing[:5]} unexpected={unexpected[:5]}")
        for key, dst in own.items():
            if key not in state:
                continue
            src = np.asarray(state[key])
            if src.shape != dst.shape:
                raise ShapeError(f"{key}: expected shape {dst.shape}, got {src.shape}")
            dst[...] = src

    def zero_grad(self) -> None:
        for m in self.modules():
            for k, p in m.params.items():
                m.grads[k] = np.zeros_like(p)

    def astype(self, dtype) -> "Module":
        for m in self.modules():
            for k in list(m.params):
                m.params[k] = m.params[k].astype(dtype)
                m.grads[k] = np.zeros_like(m.params[k])
            for k in list(m.buffers):
                m.buffers[k] = m.buffers[k].astype(dtype)
        return self

    def reseed(self, seed: int) -> None:
        """Reset the random stream of every stochastic layer."""
        for i, m in enumerate(self.modules()):
            if isinstance(m, Dropout):
                m.rng = np.random.default_rng([seed, i])

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError

    __call__ = forward


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d(Module):
    """Cross-correlation with zero padding; weight layout (k, k, Cin, Cout)."""

    def __init__(self, cin, cout, k=3, stride=1, pad=None, bias=True, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout, self.k, self.stride = cin, cout, k, stride
        self.pad = k // 2 if pad is None else pad
        self.params["weight"] = _he_normal(rng, (k, k, cin, cout), k * k * cin)
        if bias:
            self.params["bias"] = np.zeros(cout)
        self.need_input_grad = True
        self._workspace = None
        self.zero_grad()

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[-1] != self.cin:
            raise ShapeError(f"conv2d expects N x H x W x {self.cin}, got {x.shape}")
        p, k, s = self.pad, self.k, self.stride
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        n, hp, wp, _ = xp.shape
        if hp < k or wp < k:
            raise ShapeError(f"input {x.shape} too small for a {k}x{k} kernel")
        ho, wo = (hp - k) // s + 1, (wp - k) // s + 1
        w = self.params["weight"]
        if k == 1 and s == 1:
            cols = xp.reshape(-1, self.cin)
        else:
            cols = _kernels.im2col(xp, k, k, s, out=self._workspace)
            self._workspace = cols
        out = cols @ w.reshape(-1, self.cout)
        if "bias" in self.params:
            out += self.params["bias"]
        self._cache = (cols, xp.shape)
        return out.reshape(n, ho, wo, self.cout)

    def backward(self, dout):
        cols, xp_shape = self._cache
        k, s, p = self.k, self.stride, self.pad
        d2 = dout.reshape(-1, self.cout)
        w = self.params["weight"]
        self.grads["weight"] = (cols.T @ d2).reshape(w.shape)
        if "bias" in self.params:
            self.grads["bias"] = d2.sum(axis=0)
        if not self.need_input_grad:
            return None
        dcols = d2 @ w.reshape(-1, self.cout).T
        if k == 1 and s == 1:
            dxp = dcols.reshape(xp_shape)
        else:
            dxp = _kernels.col2im(dcols, xp_shape, k, k, s)
        if p:
            dxp = dxp[:, p:-p, p:-p, :]
        return dxp


class BatchNorm(Module):
    """Per-channel normalisation over every axis but the last."""

    def __init__(self, c, eps=BN_EPS, momentum=BN_MOMENTUM):
        super().__init__()
        self.c, self.eps, self.momentum = c, eps, momentum
        self.params["gamma"] = np.ones(c)
        self.params["beta"] = np.zeros(c)
        self.buffers["running_mean"] = np.zeros(c)
        self.buffers["running_var"] = np.ones(c)
        self.zero_grad()

    def forward(self, x, train=False):
        if x.shape[-1] != self.c:
            raise ShapeError(f"batch_norm expects {self.c} channels, got {x.shape[-1]}")
        g, b = self.params["gamma"], self.params["beta"]
        if train:
            if x.shape[0] < 2:
                raise ValueError("batch_norm in train mode needs a batch of at least 2")
            m = x.size // self.c
            out, xhat, mean, var, inv = _kernels.batchnorm_train(x.reshape(-1, self.c), g, b, self.eps)
            mom = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1.0 - mom
            rm += mom * mean
            rv *= 1.0 - mom
            rv += mom * var * (m / max(m - 1, 1))
            self._cache = (xhat.reshape(x.shape), inv, True)
            return out.reshape(x.shape)
        else:
            inv = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            xhat = (x - self.buffers["running_mean"]) * inv
            self._cache = (xhat, inv, False)
        return xhat * g + b

    def backward(self, dout):
        xhat, inv, train = self._cache
        g = self.params["gamma"]
        if not train:
            axes = tuple(range(dout.ndim - 1))
            self.grads["gamma"] = (dout * xhat).sum(axis=axes)
            self.grads["beta"] = dout.sum(axis=axes)
            return dout * (g * inv)
        dx, dgamma, dbeta = _kernels.batchnorm_backward(dout.reshape(-1, self.c), xhat.reshape(-1, self.c), g, inv)
        self.grads["gamma"] = dgamma.astype(g.dtype)
        self.grads["beta"] = dbeta.astype(g.dtype)
        return dx.reshape(dout.shape)


class ReLU(Module):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class Sigmoid(Module):
    def forward(self, x, train=False):
        out = sigmoid(x)
        self._out = out
        return out

    def backward(self, dout):
        return dout * self._out * (1.0 - self._out)


def sigmoid(x):
    # split by sign so exp never overflows
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x.dtype, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def relu(x):
    return np.maximum(x, 0)


class MaxPool2(Module):
    """2x2 max pooling, stride 2, dropping an odd trailing row/column."""

    def forward(self, x, train=False):
        if x.shape[1] < 2 or x.shape[2] < 2:
            raise ShapeError(f"max_pool_2x2 needs spatial size >= 2, got {x.shape}")
        out, idx = _kernels.maxpool2_forward(x)
        self._cache = (idx, x.shape)
        return out

    def backward(self, dout):
        idx, shape = self._cache
        return _kernels.maxpool2_backward(dout, idx, shape)


class Dropout(Module):
    def __init__(self, p=0.2, seed=0):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError("dropout probability must lie in [0, 1)")
        self.p = p
        self.rng = np.random.default_rng(seed)

    def forward(self, x, train=False):
        if not train or self.p == 0.0:
            self._mask = None
            return x
        keep = self.rng.random(x.shape) >= self.p
        self._mask = keep.astype(x.dtype) / (1.0 - self.p)
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


class Dense(Module):
    """Affine layer; ``init_scale`` shrinks the He-normal weights (small for regression outputs)."""

    def __init__(self, din, dout, rng=None, init_scale=1.0):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.din, self.dout = din, dout
        self.params["weight"] = _he_normal(rng, (din, dout), din) * init_scale
        self.params["bias"] = np.zeros(dout)
        self.zero_grad()

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.din:
            raise ShapeError(f"dense expects N x {self.din}, got {x.shape}")
        self._x = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, dout):
        self.grads["weight"] = self._x.T @ dout
        self.grads["bias"] = dout.sum(axis=0)
        return dout @ self.params["weight"].T


class GlobalAvgPool(Module):
    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[1] < 1 or x.shape[2] < 1:
            raise ShapeError(f"global_average_pool expects N x H x W x C, got {x.shape}")
        self._shape = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, dout):
        n, h, w, c = self._shape
        return np.broadcast_to(dout[:, None, None, :] / (h * w), self._shape).copy()


class Flatten(Module):
    def forward(self, x, train=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class Sequential(Module):
    def __init__(self, *layers: tuple[str, Module]):
        super().__init__()
        for name, layer in layers:
            self.add(name, layer)

    def forward(self, x, train=False):
        for layer in self.children.values():
            x = layer.forward(x, train)
        return x

    def backward(self, dout):
        for layer in reversed(list(self.children.values())):
            dout = layer.backward(dout)
        return dout


def conv_bn_relu(cin, cout, rng) -> Sequential:
    return Sequential(
        ("conv", Conv2d(cin, cout, 3, bias=False, rng=rng)),
        ("bn", BatchNorm(cout)),
        ("relu", ReLU()),
    )


class ResidualBlock(Module):
    """Basic residual block: conv-BN-ReLU-conv-BN, skip add, ReLU.

    The skip is the identity when channel counts agree and a 1x1 convolution
    projection otherwise.
    """

    def __init__(self, cin, cout, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cin, self.cout = cin, cout
        self.add("conv1", Conv2d(cin, cout, 3, bias=False, rng=rng))
        self.add("bn1", BatchNorm(cout))
        self.add("relu1", ReLU())
        self.add("conv2", Conv2d(cout, cout, 3, bias=False, rng=rng))
        self.add("bn2", BatchNorm(cout))
        if cin != cout:
            self.add("proj", Conv2d(cin, cout, 1, pad=0, bias=True, rng=rng))
        self.add("relu_out", ReLU())

    def forward(self, x, train=False):
        if x.ndim != 4 or x.shape[-1] != self.cin:
            raise ShapeError(f"residual block expects {self.cin} input channels, got {x.shape}")
        c = self.children
        y = c["conv1"].forward(x, train)
        y = c["bn1"].forward(y, train)
        y = c["relu1"].forward(y, train)
        y = c["conv2"].forward(y, train)
        y = c["bn2"].forward(y, train)
        skip = c["proj"].forward(x, train) if "proj" in c else x
        return c["relu_out"].forward(y + skip, train)

    def backward(self, dout):
        c = self.children
        d = c["relu_out"].backward(dout)
        dskip = c["proj"].backward(d) if "proj" in c else d
        db = c["bn2"].backward(d)
        db = c["conv2"].backward(db)
        db = c["relu1"].backward(db)
        db = c["bn1"].backward(db)
        db = c["conv1"].backward(db)
        return db + dskip


def conv2d(x, kernel, stride=1, padding=0, bias=None):
    """Functional convolution; ``kernel`` has layout (k, k, Cin, Cout)."""
    kernel = np.asarray(kernel)
    k, _, cin, cout = kernel.shape
    if x.shape[-1] != cin:
        raise ShapeError(f"kernel expects {cin} input channels, got {x.shape[-1]}")
    layer = Conv2d(cin, cout, k, stride=stride, pad=padding, bias=bias is not None)
    layer.params["weight"] = kernel
    if bias is not None:
        layer.params["bias"] = np.asarray(bias)
    return layer.forward(x)


def max_pool_2x2(x):
    return MaxPool2().forward(x)


def global_average_pool(x):
    return GlobalAvgPool().forward(x)


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    errors: dict[str, float] = field(default_factory=dict)
    kinks: int = 0
    checked: int = 0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def activation_pattern(op: Module) -> int:
    """Hash of every ReLU mask and max-pool argmax from the last forward pass.

    Two passes with equal patterns ran through the same linear pieces, so a
    finite difference between them is free of kink artefacts.
    """
    parts = []
    for m in op.modules():
        if isinstance(m, ReLU) and getattr(m, "_mask", None) is not None:
            parts.append(np.packbits(m._mask).tobytes())
        elif isinstance(m, MaxPool2) and getattr(m, "_cache", None) is not None:
            parts.append(m._cache[0].tobytes())
    return hash(tuple(parts))


def jitter_away_from_zero(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    small = np.abs(x) < margin
    x[small] = np.where(x[small] >= 0, margin, -margin)
    return x


def finite_difference_check(
    op: Module,
    inputs,
    seed: int = 0,
    h: float = 1e-5,
    train: bool = True,
    max_per_array: int = 24,
    check_inputs: bool = True,
    forward: Callable | None = None,
    backward: Callable | None = None,
) -> GradCheckResult:
    """Compare analytic gradients of ``op`` with central differences.

    The scalar objective is the output itself when it is a scalar, otherwise
    the inner product with a seeded random cotangent. ``forward(inputs, train)``
    and ``backward(dout)`` default to ``op.forward(*inputs)`` / ``op.backward``.
    Errors are norm-wise relative per array, over a seeded subset of at most
    ``max_per_array`` entries. Probes whose perturbed passes change a ReLU
    mask or a max-pool winner straddle a kink; they are counted and skipped.
    """
    rng = np.random.default_rng(seed)
    inputs = tuple(np.asarray(a, dtype=np.float64) for a in (inputs if isinstance(inputs, tuple) else (inputs,)))
    fwd = forward or (lambda xs, tr: op.forward(*xs, train=tr))
    bwd = backward or op.backward
    for _, p in op.named_parameters():
        if p.dtype != np.float64:
            raise TypeError("finite_difference_check requires 64-bit parameters")

    op.reseed(seed)
    out = fwd(inputs, train)
    scalar = np.ndim(out) == 0
    cot = None if scalar else rng.standard_normal(np.shape(out))

    def objective() -> float:
        op.reseed(seed)
        o = fwd(inputs, train)
        return float(o) if scalar else float(np.sum(o * cot))

    snapshot = {k: v.copy() for k, v in op.named_buffers()}

    def restore():
        for k, v in op.named_buffers():
            v[...] = snapshot[k]

    op.zero_grad()
    restore()
    op.reseed(seed)
    out = fwd(inputs, train)
    din = bwd(np.float64(1.0) if scalar else cot)
    base_pattern = activation_pattern(op)
    analytic = dict(op.named_grads())
    if check_inputs and din is not None:
        din = din if isinstance(din, tuple) else (din,)
        for i, d in enumerate(din):
            if d is not None:
                analytic[f"input{i}"] = d
    arrays = dict(op.named_parameters())
    for i, a in enumerate(inputs):
        arrays[f"input{i}"] = a

    restore()
    f0 = objective()
    # numeric noise of a central difference is roughly eps * |f| / h
    floor = 1e-8 * max(1.0, abs(f0))
    result = GradCheckResult(0.0)
    for name, grad in analytic.items():
        arr = arrays[name]
        flat = arr.reshape(-1)
        g = np.asarray(grad).reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_per_array:
            idx = np.sort(rng.choice(flat.size, max_per_array, replace=False))
        num, ana = [], []
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            restore()
            fp = objective()
            crossed = activation_pattern(op) != base_pattern
            flat[i] = old - h
            restore()
            fm = objective()
            crossed = crossed or activation_pattern(op) != base_pattern
            flat[i] = old
            if crossed:
                result.kinks += 1
                continue
            num.append((fp - fm) / (2 * h))
            ana.append(g[i])
        restore()
        if not num:
            continue
        num, ana = np.array(num), np.array(ana)
        denom = max(np.linalg.norm(num), np.linalg.norm(ana))
        err = 0.0 if denom < floor else float(np.linalg.norm(num - ana) / denom)
        result.errors[name] = err
        result.checked += len(num)
        result.max_rel_error = max(result.max_rel_error, err)
    return result
