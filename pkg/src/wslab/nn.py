"""A small feed-forward network with hand-written backward passes.

All parameters of an :class:`MLP` live in one flat float64 buffer
(``net.params``) with a matching gradient buffer (``net.grads``); layers hold
views into them.  That keeps :class:`Adam` to a handful of vector ops per step.
"""
from __future__ import annotations

import json

import numpy as np

__all__ = ["MLP", "Adam", "softmax", "log_softmax", "softmax_backward"]


def softmax(logits, inverse_temperature: float = 1.0, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if np.isnan(logits).any():
        raise ValueError("softmax received NaN logits")
    if inverse_temperature == 0:
        return np.full_like(logits, 1.0 / logits.shape[axis])
    z = logits * inverse_temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_backward(probs, grad_probs, axis: int = -1) -> np.ndarray:
    """Pull a gradient w.r.t. softmax outputs back to the logits."""
    return probs * (grad_probs - (probs * grad_probs).sum(axis=axis, keepdims=True))


class _Layer:
    n_params = 0

    def bind(self, params, grads):
        pass

    def forward(self, x, train, rng):
        raise NotImplementedError

    def backward(self, dout):
        raise NotImplementedError


class _Dense(_Layer):
    def __init__(self, n_in, n_out):
        self.n_in, self.n_out = n_in, n_out
        self.n_params = n_in * n_out + n_out

    def bind(self, params, grads):
        k = self.n_in * self.n_out
        self.W = params[:k].reshape(self.n_in, self.n_out)
        self.b = params[k:]
        self.dW = grads[:k].reshape(self.n_in, self.n_out)
        self.db = grads[k:]

    def init(self, rng):
        bound = np.sqrt(6.0 / self.n_in)
        self.W[...] = rng.uniform(-bound, bound, size=self.W.shape)
        self.b[...] = 0.0

    def forward(self, x, train, rng):
        self._x = x
        return x @ self.W + self.b

    def backward(self, dout):
        self.dW += self._x.T @ dout
        self.db += dout.sum(axis=0)
        return dout @ self.W.T


class _ReLU(_Layer):
    def forward(self, x, train, rng):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class _BatchNorm(_Layer):
    eps = 1e-5
    momentum = 0.9

    def __init__(self, dim):
        self.dim = dim
        self.n_params = 2 * dim
        self.running_mean = np.zeros(dim)
        self.running_var = np.ones(dim)

    def bind(self, params, grads):
        self.gamma, self.beta = params[: self.dim], params[self.dim:]
        self.dgamma, self.dbeta = grads[: self.dim], grads[self.dim:]

    def init(self, rng):
        self.gamma[...] = 1.0
        self.beta[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def forward(self, x, train, rng):
        if not train:
            return (x - self.running_mean) / np.sqrt(self.running_var + self.eps) * self.gamma + self.beta
        mu = x.mean(axis=0)
        var = x.var(axis=0)
        self._inv_std = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mu) * self._inv_std
        self.running_mean *= self.momentum
        self.running_mean += (1 - self.momentum) * mu
        self.running_var *= self.momentum
        self.running_var += (1 - self.momentum) * var
        return self._xhat * self.gamma + self.beta

    def backward(self, dout):
        xhat = self._xhat
        self.dgamma += (dout * xhat).sum(axis=0)
        self.dbeta += dout.sum(axis=0)
        dxhat = dout * self.gamma
        return self._inv_std * (dxhat - dxhat.mean(axis=0) - xhat * (dxhat * xhat).mean(axis=0))


class _Dropout(_Layer):
    def __init__(self, rate):
        self.rate = rate

    def forward(self, x, train, rng):
        if not train or self.rate == 0:
            self._mask = None
            return x
        self._mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * self._mask

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


class MLP:
    """dense -> [batchnorm] -> relu -> [dropout] blocks, then a dense read-out.

    ``hidden=()`` gives a single linear map.
    """

    def __init__(self, in_dim: int, hidden, out_dim: int, *, batchnorm: bool = False,
                 dropout: float = 0.0, seed=None):
        if not 0.0 <= dropout < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {dropout}")
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.batchnorm = bool(batchnorm)
        self.dropout = float(dropout)
        self.rng = np.random.default_rng(seed)

        self.layers: list[_Layer] = []
        prev = self.in_dim
        for h in self.hidden:
            self.layers.append(_Dense(prev, h))
            if self.batchnorm:
                self.layers.append(_BatchNorm(h))
            self.layers.append(_ReLU())
            if self.dropout > 0:
                self.layers.append(_Dropout(self.dropout))
            prev = h
        self.layers.append(_Dense(prev, self.out_dim))

        total = sum(layer.n_params for layer in self.layers)
        self.params = np.zeros(total)
        self.grads = np.zeros(total)
        offset = 0
        for layer in self.layers:
            k = layer.n_params
            layer.bind(self.params[offset:offset + k], self.grads[offset:offset + k])
            offset += k
        for layer in self.layers:
            if hasattr(layer, "init"):
                layer.init(self.rng)
        self._cached = False

    @property
    def n_params(self) -> int:
        return self.params.size

    def forward(self, x, train: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ValueError(f"expected input of shape (B, {self.in_dim}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, train, self.rng)
        self._cached = train
        return x

    def backward(self, dout) -> np.ndarray:
        """Accumulate parameter gradients into ``self.grads``; return the input gradient.

        Gradients are *added*; call :meth:`zero_grad` between steps.
        """
        if not self._cached:
            raise RuntimeError("backward() needs a preceding forward(..., train=True)")
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def zero_grad(self):
        self.grads[...] = 0.0

    def _running(self):
        return [layer for layer in self.layers if isinstance(layer, _BatchNorm)]

    def state(self) -> dict:
        """A copy of everything needed to restore this network's function."""
        return {
            "params": self.params.copy(),
            "running": [(bn.running_mean.copy(), bn.running_var.copy()) for bn in self._running()],
        }

    def load_state(self, state: dict):
        self.params[...] = state["params"]
        for bn, (mean, var) in zip(self._running(), state["running"]):
            bn.running_mean[...] = mean
            bn.running_var[...] = var

    def to_dict(self) -> dict:
        return {
            "in_dim": self.in_dim,
            "hidden": list(self.hidden),
            "out_dim": self.out_dim,
            "batchnorm": self.batchnorm,
            "dropout": self.dropout,
            "params": self.params.tolist(),
            "running": [[bn.running_mean.tolist(), bn.running_var.tolist()] for bn in self._running()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        net = cls(d["in_dim"], d["hidden"], d["out_dim"], batchnorm=d["batchnorm"], dropout=d["dropout"])
        params = np.asarray(d["params"], dtype=np.float64)
        if params.shape != net.params.shape:
            raise ValueError(f"checkpoint has {params.size} parameters, network needs {net.n_params}")
        net.load_state({"params": params,
                        "running": [(np.asarray(m), np.asarray(v)) for m, v in d["running"]]})
        return net

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "MLP":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class Adam:
    """Adam with bias correction; L2 decay is added to the gradient before the moments."""

    def __init__(self, size: int, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        """Update ``params`` in place and return it."""
        if params.shape != self.m.shape or grads.shape != self.m.shape:
            raise ValueError(f"shape mismatch: state {self.m.shape}, params {params.shape}, grads {grads.shape}")
        g = grads + self.weight_decay * params if self.weight_decay else grads
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * g
        self.v *= self.beta2
        self.v += (1 - self.beta2) * g * g
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params
