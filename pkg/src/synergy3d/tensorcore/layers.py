"""Parameter containers and the handful of layers the networks use."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, affine, batch_norm, global_avg_pool, global_max_pool, relu

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Module:
    """Named parameters, buffers and child modules, registered by attribute."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name, array):
        self._buffers[name] = array
        object.__setattr__(self, name, array)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def train(self, mode=True):
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        state = {name: p.data for name, p in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype).copy()
        for name, b in bufs.items():
            arr = np.asarray(state[name])
            if arr.shape != b.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {b.shape}")
            b[...] = arr


class Linear(Module):
    def __init__(self, n_in, n_out, rng, dtype=np.float32):
        super().__init__()
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, (n_in, n_out)).astype(dtype), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bound, bound, n_out).astype(dtype), requires_grad=True)

    @property
    def n_out(self):
        return self.weight.shape[1]

    def __call__(self, x):
        return affine(x, self.weight, self.bias)

    def zero_(self):
        self.weight.data[...] = 0
        self.bias.data[...] = 0


class BatchNorm(Module):
    def __init__(self, channels, dtype=np.float32, eps=BN_EPS, momentum=BN_MOMENTUM):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def __call__(self, x):
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            self.training, self.eps, self.momentum,
        )


class Block(Module):
    """Linear -> batch norm -> ReLU, or a bare linear output layer."""

    def __init__(self, n_in, n_out, rng, dtype=np.float32, plain=False):
        super().__init__()
        self.plain = plain
        self.fc = Linear(n_in, n_out, rng, dtype)
        if not plain:
            self.bn = BatchNorm(n_out, dtype)

    @property
    def n_in(self):
        return self.fc.weight.shape[0]

    @property
    def n_out(self):
        return self.fc.n_out

    def __call__(self, x):
        return self.activate(self.fc(x))

    def activate(self, y):
        """Everything after the linear map."""
        return y if self.plain else relu(self.bn(y))


class MLP(Module):
    """Chain of blocks over the last axis; ``plain_last`` leaves the final layer linear."""

    def __init__(self, n_in, sizes, rng, dtype=np.float32, plain_last=False):
        super().__init__()
        self.layers = []
        for i, n_out in enumerate(sizes):
            blk = Block(n_in, n_out, rng, dtype, plain=plain_last and i == len(sizes) - 1)
            setattr(self, f"l{i}", blk)
            self.layers.append(blk)
            n_in = n_out
        self.n_out = n_in

    def __call__(self, x):
        return shared_mlp(x, self.layers)


def shared_mlp(points, layers):
    """Apply the same layer stack to every point of a B x N x C tensor."""
    x = points
    for layer in layers:
        if x.shape[-1] != layer.n_in:
            raise ValueError(f"channel mismatch: input has {x.shape[-1]}, layer expects {layer.n_in}")
        x = layer(x)
    return x


def pool(x, mode):
    if mode == "average":
        return global_avg_pool(x)
    if mode == "max":
        return global_max_pool(x)
    raise ValueError(f"unknown pooling {mode!r}")
