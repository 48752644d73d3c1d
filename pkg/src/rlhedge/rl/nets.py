"""Dense networks with Swish activations and batch normalization, in numpy.

Forward passes return a cache that ``backward`` consumes, so every
gradient is analytic and can be checked against finite differences.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from ..exceptions import ValidationError

HEADS = ("linear", "sigmoid", "neg_sigmoid")
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def sigmoid(x):
    out = expit(np.asarray(x, dtype=float))
    return out[()] if out.ndim == 0 else out


def swish(x):
    x = np.asarray(x, dtype=float)
    return x * sigmoid(x)


def _swish_grad(x, s):
    return s + x * s * (1.0 - s)


class DenseNet:
    """Linear -> Swish -> BatchNorm per hidden layer, then a linear layer and head."""

    def __init__(self, sizes: Sequence[int], head: str = "linear", batch_norm: bool = True,
                 rng: Optional[np.random.Generator] = None, out_scale: float = 1.0):
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ValidationError("layer sizes must be positive and at least two")
        if head not in HEADS:
            raise ValidationError(f"unknown output head {head!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.sizes = [int(s) for s in sizes]
        self.head = head
        self.batch_norm = batch_norm
        self.weights: List[np.ndarray] = []
        self.biases: List[np.ndarray] = []
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            bound = 1.0 / np.sqrt(fan_in)
            scale = out_scale if i == len(self.sizes) - 2 else 1.0
            self.weights.append(rng.uniform(-bound, bound, (fan_in, fan_out)) * scale)
            self.biases.append(rng.uniform(-bound, bound, fan_out) * scale)
        n_hidden = len(self.sizes) - 2
        self.bn_scale = [np.ones(self.sizes[i + 1]) for i in range(n_hidden)] if batch_norm else []
        self.bn_shift = [np.zeros(self.sizes[i + 1]) for i in range(n_hidden)] if batch_norm else []
        self.running_mean = [np.zeros(self.sizes[i + 1]) for i in range(n_hidden)] if batch_norm else []
        self.running_var = [np.ones(self.sizes[i + 1]) for i in range(n_hidden)] if batch_norm else []

    # -- parameters --------------------------------------------------------

    @property
    def n_hidden(self) -> int:
        return len(self.sizes) - 2

    def params(self) -> List[np.ndarray]:
        """Trainable arrays in a fixed order (views, updated in place)."""
        return [*self.weights, *self.biases, *self.bn_scale, *self.bn_shift]

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat: np.ndarray) -> None:
        i = 0
        for p in self.params():
            p[...] = flat[i: i + p.size].reshape(p.shape)
            i += p.size

    def copy(self) -> "DenseNet":
        other = DenseNet.__new__(DenseNet)
        other.sizes, other.head, other.batch_norm = list(self.sizes), self.head, self.batch_norm
        for name in ("weights", "biases", "bn_scale", "bn_shift", "running_mean", "running_var"):
            setattr(other, name, [a.copy() for a in getattr(self, name)])
        return other

    # -- forward / backward ------------------------------------------------

    def forward(self, x, train: bool = False, update_stats: bool = True) -> Tuple[np.ndarray, dict]:
        """Returns (output of shape (n,) if one output else (n, d_out), cache).

        ``train`` uses batch statistics in the batch-norm layers and, with
        ``update_stats``, folds them into the running statistics.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.sizes[0]:
            raise ValidationError(f"expected input dimension {self.sizes[0]}, got {x.shape[1]}")
        cache = {"layers": [], "train": train, "x": x}
        h = x
        for i in range(self.n_hidden):
            z = h @ self.weights[i] + self.biases[i]
            s = sigmoid(z)
            a = z * s
            layer = {"h": h, "z": z, "s": s}
            if self.batch_norm:
                if train:
                    mu = a.mean(axis=0)
                    var = a.var(axis=0)
                    if update_stats:
                        n = a.shape[0]
                        unbiased = var * n / (n - 1) if n > 1 else var
                        self.running_mean[i] = (1 - BN_MOMENTUM) * self.running_mean[i] + BN_MOMENTUM * mu
                        self.running_var[i] = (1 - BN_MOMENTUM) * self.running_var[i] + BN_MOMENTUM * unbiased
                else:
                    mu, var = self.running_mean[i], self.running_var[i]
                inv = 1.0 / np.sqrt(var + BN_EPS)
                xhat = (a - mu) * inv
                layer.update(xhat=xhat, inv=inv)
                h = self.bn_scale[i] * xhat + self.bn_shift[i]
            else:
                h = a
            cache["layers"].append(layer)
        pre = h @ self.weights[-1] + self.biases[-1]
        cache["h_last"] = h
        if self.head == "linear":
            out = pre
        else:
            sg = sigmoid(pre)
            cache["sig"] = sg
            out = sg if self.head == "sigmoid" else -sg
        return (out[:, 0] if out.shape[1] == 1 else out), cache

    def predict(self, x) -> np.ndarray:
        return self.forward(x, train=False)[0]

    def backward(self, cache: dict, dout) -> Tuple[List[np.ndarray], np.ndarray]:
        """Gradients of sum(dout * output) w.r.t. params() and the input."""
        dout = np.asarray(dout, dtype=float)
        if dout.ndim == 1:
            dout = dout[:, None]
        if self.head == "sigmoid":
            dpre = dout * cache["sig"] * (1 - cache["sig"])
        elif self.head == "neg_sigmoid":
            dpre = -dout * cache["sig"] * (1 - cache["sig"])
        else:
            dpre = dout
        gw = [None] * len(self.weights)
        gb = [None] * len(self.biases)
        gs = [None] * self.n_hidden if self.batch_norm else []
        gt = [None] * self.n_hidden if self.batch_norm else []
        gw[-1] = cache["h_last"].T @ dpre
        gb[-1] = dpre.sum(axis=0)
        dh = dpre @ self.weights[-1].T
        train = cache["train"]
        for i in reversed(range(self.n_hidden)):
            layer = cache["layers"][i]
            if self.batch_norm:
                xhat, inv = layer["xhat"], layer["inv"]
                gs[i] = (dh * xhat).sum(axis=0)
                gt[i] = dh.sum(axis=0)
                dxhat = dh * self.bn_scale[i]
                if train:
                    n = dxhat.shape[0]
                    da = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
                else:
                    da = dxhat * inv
            else:
                da = dh
            dz = da * _swish_grad(layer["z"], layer["s"])
            gw[i] = layer["h"].T @ dz
            gb[i] = dz.sum(axis=0)
            dh = dz @ self.weights[i].T
        return [*gw, *gb, *gs, *gt], dh

    def calibrate(self, x) -> None:
        """Set running batch-norm statistics from a representative batch."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if not self.batch_norm:
            return
        h = x
        for i in range(self.n_hidden):
            a = swish(h @ self.weights[i] + self.biases[i])
            self.running_mean[i] = a.mean(axis=0)
            self.running_var[i] = np.maximum(a.var(axis=0, ddof=1) if len(a) > 1 else a.var(axis=0), 0.0)
            h = self.bn_scale[i] * (a - self.running_mean[i]) / np.sqrt(self.running_var[i] + BN_EPS) \
                + self.bn_shift[i]

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        tolist = lambda arrs: [a.tolist() for a in arrs]
        return {"sizes": self.sizes, "head": self.head, "batch_norm": self.batch_norm,
                "weights": tolist(self.weights), "biases": tolist(self.biases),
                "bn_scale": tolist(self.bn_scale), "bn_shift": tolist(self.bn_shift),
                "running_mean": tolist(self.running_mean), "running_var": tolist(self.running_var)}

    @classmethod
    def from_dict(cls, d: dict) -> "DenseNet":
        net = cls.__new__(cls)
        net.sizes, net.head, net.batch_norm = list(d["sizes"]), d["head"], bool(d["batch_norm"])
        for name in ("weights", "biases", "bn_scale", "bn_shift", "running_mean", "running_var"):
            setattr(net, name, [np.array(a, dtype=float) for a in d[name]])
        # single-column weights come back as lists of lists; keep 2-D shape
        net.weights = [w.reshape(a, b) for w, a, b in zip(net.weights, net.sizes[:-1], net.sizes[1:])]
        return net


# ---------------------------------------------------------------------------
# Optimizers over flat parameter vectors
# ---------------------------------------------------------------------------

@dataclass
class SGD:
    def step(self, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        return param - lr * grad

    def state_dict(self) -> dict:
        return {"kind": "sgd"}


@dataclass
class Adam:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0

    def step(self, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(grad)
            self.v = np.zeros_like(grad)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return param - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_dict(self) -> dict:
        return {"kind": "adam", "t": self.t,
                "m": None if self.m is None else self.m.tolist(),
                "v": None if self.v is None else self.v.tolist()}


def make_optimizer(kind: str, state: Optional[dict] = None):
    if kind == "sgd":
        return SGD()
    if kind == "adam":
        opt = Adam()
        if state and state.get("m") is not None:
            opt.m, opt.v, opt.t = np.array(state["m"]), np.array(state["v"]), int(state["t"])
        return opt
    raise ValidationError(f"unknown optimizer {kind!r}")


# ---------------------------------------------------------------------------
# State normalization
# ---------------------------------------------------------------------------

class RunningNormalizer:
    """Per-dimension running mean/variance (Welford / Chan merge)."""

    FLOOR = 1e-8

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    @property
    def var(self) -> np.ndarray:
        if self.count < 1:
            return np.ones(self.dim)
        return self.m2 / self.count

    def update(self, x) -> None:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        if n == 0:
            return
        b_mean = x.mean(axis=0)
        b_m2 = ((x - b_mean) ** 2).sum(axis=0)
        total = self.count + n
        delta = b_mean - self.mean
        self.mean = self.mean + delta * n / total
        self.m2 = self.m2 + b_m2 + delta * delta * self.count * n / total
        self.count = total

    def normalize(self, x, update: bool = False) -> np.ndarray:
        if update:
            self.update(x)
        return (np.asarray(x, dtype=float) - self.mean) / np.sqrt(self.var + self.FLOOR)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "count": self.count, "mean": self.mean.tolist(), "m2": self.m2.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunningNormalizer":
        out = cls(int(d["dim"]))
        out.count = int(d["count"])
        out.mean = np.array(d["mean"], dtype=float)
        out.m2 = np.array(d["m2"], dtype=float)
        return out
