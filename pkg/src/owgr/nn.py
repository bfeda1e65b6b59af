"""Separable-convolution gesture network with hand-written reverse mode.

The network is a QuartzNet-style stack without residuals: every block is a
depthwise temporal convolution, a pointwise convolution, batch normalization
and ReLU.  A pointwise "neck" widens the features, global average pooling
removes time, and one affine head per task produces logits.

All parameters live in one flat float64 vector (``GestureNet.params``).  Trunk
parameters come first and keep their indices when heads are added, which is
what the PackNet masks index into.

Activations are kept channel-major, ``(C, N, T)``, so that pointwise
convolutions are a single matrix product over ``N * T`` columns.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from .errors import CacheError, MissingHead, NumericsError, ShapeError

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1


class GestureNet:
    """Shared separable-conv trunk plus one classification head per task.

    Heads are keyed by task id (any hashable, the trainer uses 1-based task
    indices).  ``running`` holds the current normalization statistics and
    ``snapshots[task_id]`` the statistics frozen at the end of that task.
    """

    def __init__(
        self,
        in_channels: int = 6,
        width: int = 32,
        neck_width: int = 64,
        n_blocks: int = 2,
        kernel: int = 11,
        window: int = 120,
        seed: int = 0,
    ):
        if kernel % 2 != 1:
            raise ShapeError("kernel must be odd for same padding")
        self.in_channels = in_channels
        self.width = width
        self.neck_width = neck_width
        self.kernel = kernel
        self.window = window
        self.blocks = ["stem"] + [f"block{i + 1}" for i in range(n_blocks)]

        self.layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        self._size = 0
        cin = in_channels
        for b in self.blocks:
            self._declare(f"{b}.dw", (cin, kernel))
            self._declare(f"{b}.pw", (width, cin))
            self._declare(f"{b}.gamma", (width,))
            self._declare(f"{b}.beta", (width,))
            cin = width
        self._declare("neck.w", (neck_width, width))
        self._declare("neck.b", (neck_width,))
        self.trunk_size = self._size

        rng = np.random.default_rng(seed)
        self.params = np.zeros(self.trunk_size)
        cin = in_channels
        for b in self.blocks:
            self.view(f"{b}.dw")[:] = rng.uniform(-1, 1, (cin, kernel)) * np.sqrt(6.0 / kernel)
            self.view(f"{b}.pw")[:] = rng.uniform(-1, 1, (width, cin)) * np.sqrt(6.0 / cin)
            self.view(f"{b}.gamma")[:] = 1.0
            cin = width
        self.view("neck.w")[:] = rng.uniform(-1, 1, (neck_width, width)) * np.sqrt(6.0 / width)

        self.heads: dict = {}
        self.running = {b: (np.zeros(width), np.ones(width)) for b in self.blocks}
        self.snapshots: dict = {}
        self._cache = None

    # -- parameter bookkeeping -------------------------------------------

    def _declare(self, name, shape):
        self.layout[name] = (self._size, shape)
        self._size += int(np.prod(shape))

    @property
    def n_params(self) -> int:
        return self._size

    def view(self, name: str) -> np.ndarray:
        """Writable view into ``params`` for one named tensor."""
        off, shape = self.layout[name]
        return self.params[off : off + int(np.prod(shape))].reshape(shape)

    def grad_view(self, grad: np.ndarray, name: str) -> np.ndarray:
        off, shape = self.layout[name]
        return grad[off : off + int(np.prod(shape))].reshape(shape)

    def span(self, name: str) -> slice:
        off, shape = self.layout[name]
        return slice(off, off + int(np.prod(shape)))

    def head_span(self, task_id) -> slice:
        w, b = self.span(f"head[{task_id}].w"), self.span(f"head[{task_id}].b")
        return slice(w.start, b.stop)

    def prunable_layers(self) -> list[str]:
        """Names of trunk weight tensors subject to PackNet pruning."""
        return [f"{b}.{k}" for b in self.blocks for k in ("dw", "pw")] + ["neck.w"]

    def add_head(self, task_id, n_classes: int, rng: np.random.Generator) -> None:
        if task_id in self.heads:
            raise ShapeError(f"head {task_id!r} already registered")
        if n_classes < 1:
            raise ShapeError("a head needs at least one class")
        self._declare(f"head[{task_id}].w", (n_classes, self.neck_width))
        self._declare(f"head[{task_id}].b", (n_classes,))
        bound = 1.0 / np.sqrt(self.neck_width)
        new = np.zeros(n_classes * (self.neck_width + 1))
        new[: n_classes * self.neck_width] = rng.uniform(-bound, bound, n_classes * self.neck_width)
        self.params = np.concatenate([self.params, new])
        self.heads[task_id] = n_classes
        self._cache = None

    def copy(self) -> "GestureNet":
        return copy.deepcopy(self)

    def snapshot_stats(self, task_id) -> None:
        self.snapshots[task_id] = {b: (m.copy(), v.copy()) for b, (m, v) in self.running.items()}

    def stats_for(self, task_id):
        return self.snapshots.get(task_id, self.running)

    # -- forward -----------------------------------------------------------

    def features(self, x: np.ndarray, train: bool = True, stats=None, update_stats: bool = True):
        """Pooled neck features ``(N, neck_width)`` for a batch ``(N, C, T)``.

        In training mode normalization uses batch statistics (and updates the
        running estimates unless ``update_stats`` is False); otherwise it uses
        ``stats`` or the current running statistics.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[1] != self.in_channels or x.shape[2] != self.window:
            raise ShapeError(
                f"expected batch (N, {self.in_channels}, {self.window}), got {x.shape}"
            )
        n, _, t = x.shape
        if n == 0:
            raise ShapeError("empty batch")
        stats = self.running if stats is None else stats
        h = np.ascontiguousarray(x.transpose(1, 0, 2))
        cache = {"train": train, "n": n, "blocks": []}
        for b in self.blocks:
            d = _k.depthwise(h, self.view(f"{b}.dw"))
            d2 = d.reshape(d.shape[0], n * t)
            z = self.view(f"{b}.pw") @ d2
            if train:
                mu, var = _k.row_mean_var(z)
                if update_stats:
                    rm, rv = self.running[b]
                    self.running[b] = (
                        (1 - NORM_MOMENTUM) * rm + NORM_MOMENTUM * mu,
                        (1 - NORM_MOMENTUM) * rv + NORM_MOMENTUM * var,
                    )
            else:
                mu, var = stats[b]
            inv = 1.0 / np.sqrt(var + NORM_EPS)
            xhat, a = _k.norm_relu(
                z, mu, inv, self.view(f"{b}.gamma"), self.view(f"{b}.beta")
            )
            cache["blocks"].append((h, d2, xhat, inv, a))
            h = a.reshape(-1, n, t)
        h2 = h.reshape(h.shape[0], n * t)
        an = self.view("neck.w") @ h2
        an += self.view("neck.b")[:, None]
        np.maximum(an, 0.0, out=an)
        cache["neck"] = (h2, an)
        pooled = an.reshape(-1, n, t).mean(axis=2).T
        self._cache = cache
        return pooled

    def head_logits(self, pooled: np.ndarray, task_id) -> np.ndarray:
        if task_id not in self.heads:
            raise MissingHead(f"no head registered for task {task_id!r}")
        return pooled @ self.view(f"head[{task_id}].w").T + self.view(f"head[{task_id}].b")

    # -- backward ----------------------------------------------------------

    def head_backward(self, pooled, task_id, dlogits, grad) -> np.ndarray:
        """Accumulate head gradients into ``grad`` and return d(pooled)."""
        if task_id not in self.heads:
            raise MissingHead(f"no head registered for task {task_id!r}")
        self.grad_view(grad, f"head[{task_id}].w")[:] += dlogits.T @ pooled
        self.grad_view(grad, f"head[{task_id}].b")[:] += dlogits.sum(axis=0)
        return dlogits @ self.view(f"head[{task_id}].w")

    def backward_features(self, dpooled: np.ndarray, grad: np.ndarray) -> None:
        """Accumulate trunk gradients for the last ``features`` call into ``grad``."""
        cache = self._cache
        if cache is None:
            raise CacheError("backward called without a cached forward pass")
        n = cache["n"]
        if dpooled.shape != (n, self.neck_width):
            raise CacheError("gradient does not match the cached forward batch")
        t = self.window
        h2, an = cache["neck"]
        dzn = (an > 0).reshape(-1, n, t) * (dpooled.T / t)[:, :, None]
        dzn = dzn.reshape(-1, n * t)
        self.grad_view(grad, "neck.w")[:] += dzn @ h2.T
        self.grad_view(grad, "neck.b")[:] += dzn.sum(axis=1)
        dh = self.view("neck.w").T @ dzn
        for i in range(len(self.blocks) - 1, -1, -1):
            b = self.blocks[i]
            h, d2, xhat, inv, a = cache["blocks"][i]
            dz, dgamma, dbeta = _k.norm_relu_backward(
                dh, a, xhat, inv, self.view(f"{b}.gamma"), cache["train"]
            )
            self.grad_view(grad, f"{b}.gamma")[:] += dgamma
            self.grad_view(grad, f"{b}.beta")[:] += dbeta
            self.grad_view(grad, f"{b}.pw")[:] += dz @ d2.T
            dd = (self.view(f"{b}.pw").T @ dz).reshape(-1, n, t)
            self.grad_view(grad, f"{b}.dw")[:] += _k.depthwise_weight_grad(h, dd, self.kernel)
            if i > 0:
                dh = _k.depthwise_input_grad(dd, self.view(f"{b}.dw")).reshape(-1, n * t)


def forward(net: GestureNet, batch: np.ndarray, task_id, train: bool = True, stats=None):
    """Logits ``(N, C_t)`` of ``task_id``'s head; caches activations for ``backward``."""
    if task_id not in net.heads:
        raise MissingHead(f"no head registered for task {task_id!r}")
    if not np.all(np.isfinite(batch)):
        raise NumericsError("non-finite input window")
    pooled = net.features(batch, train=train, stats=stats)
    net._cache["pooled"] = pooled
    net._cache["task_id"] = task_id
    logits = net.head_logits(pooled, task_id)
    if not np.all(np.isfinite(logits)):
        raise NumericsError("non-finite logits")
    return logits


def backward(net: GestureNet, batch: np.ndarray, task_id, dlogits: np.ndarray) -> np.ndarray:
    """Flat gradient of ``sum(dlogits * logits)`` w.r.t. all parameters."""
    cache = net._cache
    if cache is None or "pooled" not in cache:
        raise CacheError("backward called without a cached forward pass")
    if cache["task_id"] != task_id or cache["n"] != len(batch):
        raise CacheError("cached forward pass belongs to a different batch or task")
    grad = np.zeros(net.n_params)
    dpooled = net.head_backward(cache["pooled"], task_id, dlogits, grad)
    net.backward_features(dpooled, grad)
    return grad


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    from .errors import LabelError

    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if n < 1 or labels.shape != (n,):
        raise LabelError("need one label per row and at least one row")
    if labels.min() < 0 or labels.max() >= c:
        raise LabelError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits)
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


@dataclass
class OptimizerState:
    velocity: np.ndarray
    lr: float
    momentum: float = 0.9

    @classmethod
    def fresh(cls, n: int, lr: float, momentum: float = 0.9) -> "OptimizerState":
        return cls(np.zeros(n), lr, momentum)


def sgd_update(params: np.ndarray, grads: np.ndarray, opt: OptimizerState) -> np.ndarray:
    """In-place heavy-ball step: ``v = m*v + g``; ``theta -= lr*v``."""
    if params.shape != grads.shape or opt.velocity.shape != params.shape:
        raise ShapeError("parameter, gradient and velocity lengths differ")
    if not np.all(np.isfinite(grads)):
        raise NumericsError("non-finite gradient")
    opt.velocity *= opt.momentum
    opt.velocity += grads
    params -= opt.lr * opt.velocity
    return params


def finite_diff_check(
    net: GestureNet,
    batch: np.ndarray,
    task_id,
    eps: float = 1e-5,
    n_check: int = 200,
    seed: int = 0,
    analytic=None,
    floor: float = 1e-6,
    indices=None,
) -> float:
    """Max relative error between ``backward`` and central differences.

    The scalar checked is a fixed random projection of the logits, so the
    logit gradient is known exactly.  Normalization runs in training mode
    without touching the running statistics.  ``analytic`` overrides the
    analytic gradient (used to confirm the check catches faults); ``indices``
    pins the checked coordinates instead of sampling them.  Sampled
    coordinates whose perturbation flips any ReLU are skipped and replaced.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    rng = np.random.default_rng(seed)
    saved_running = {b: (m.copy(), v.copy()) for b, (m, v) in net.running.items()}

    def objective(proj):
        pooled = net.features(batch, train=True, update_stats=False)
        value = float((net.head_logits(pooled, task_id) * proj).sum())
        pattern = [blk[4] > 0 for blk in net._cache["blocks"]] + [net._cache["neck"][1] > 0]
        return value, pattern

    pooled = net.features(batch, train=True, update_stats=False)
    logits = net.head_logits(pooled, task_id)
    proj = rng.standard_normal(logits.shape)
    if analytic is None:
        grad = np.zeros(net.n_params)
        dpooled = net.head_backward(pooled, task_id, proj, grad)
        net.backward_features(dpooled, grad)
    else:
        grad = np.asarray(analytic, dtype=np.float64)

    if indices is None:
        head = net.head_span(task_id)
        live = np.r_[np.arange(net.trunk_size), np.arange(head.start, head.stop)]
        candidates = rng.permutation(live)
        wanted = min(n_check, live.size)
    else:
        candidates = np.asarray(indices)
        wanted = candidates.size
    worst = 0.0
    checked = 0
    for i in candidates:
        if checked >= wanted:
            break
        orig = net.params[i]
        net.params[i] = orig + eps
        up, up_pattern = objective(proj)
        net.params[i] = orig - eps
        down, down_pattern = objective(proj)
        net.params[i] = orig
        # a ReLU switching inside [-eps, eps] makes the difference quotient meaningless
        if indices is None and any(
            not np.array_equal(a, b) for a, b in zip(up_pattern, down_pattern)
        ):
            continue
        num = (up - down) / (2 * eps)
        err = abs(grad[i] - num) / max(abs(num), floor)
        worst = max(worst, err)
        checked += 1
    net.running = saved_running
    return worst
