"""Differentiable building blocks for the embedding networks.

Everything here is plain numpy with hand-written reverse-mode gradients
for the one fixed architecture family we use: residual fully-connected
blocks with batch normalization and dropout, feeding a Gaussian output
head (mean + variance). There is deliberately no general autodiff; each
layer caches its forward pass and implements an exact backward pass,
which a finite-difference checker validates end to end.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

CHECKPOINT_SCHEMA_VERSION = 1
ADAGRAD_EPS = 1e-7
_LOGVAR_CLAMP = 40.0


class StateError(RuntimeError):
    """Backward called without a recorded forward pass."""


class Parameter:
    """A trainable tensor with its gradient and Adagrad accumulator."""

    __slots__ = ("name", "value", "grad", "accumulator")

    def __init__(self, name: str, value: np.ndarray):
        self.name = name
        self.value = np.asarray(value)
        self.grad = np.zeros_like(self.value)
        self.accumulator = np.zeros_like(self.value)


def zero_gradients(params: list[Parameter]) -> None:
    for p in params:
        p.grad[...] = 0.0


def adagrad_step(params: list[Parameter], learning_rate: float) -> None:
    """Adagrad update: accumulate squared gradients, scale steps down."""
    for p in params:
        p.accumulator += p.grad * p.grad
        p.value -= learning_rate * p.grad / (np.sqrt(p.accumulator) + ADAGRAD_EPS)


def kaiming_uniform(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator,
                 dtype=np.float64, name: str = "linear", weight_scale: float = 1.0):
        w = kaiming_uniform(rng, in_dim, (in_dim, out_dim), dtype) * weight_scale
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_dim, dtype=dtype))
        self._x = None

    def parameters(self) -> list[Parameter]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, train: bool, rng=None) -> np.ndarray:
        self._x = x if train else None
        return x @ self.weight.value + self.bias.value

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError("backward before forward")
        self.weight.grad += self._x.T @ grad
        self.bias.grad += grad.sum(axis=0)
        return grad @ self.weight.value.T


class BatchNorm:
    """Per-feature batch normalization.

    Train mode normalizes with batch statistics and updates running
    statistics as running = momentum * running + (1 - momentum) * batch;
    eval mode uses the running statistics.
    """

    def __init__(self, dim: int, momentum: float = 0.99, eps: float = 1e-5,
                 dtype=np.float64, name: str = "bn"):
        self.gamma = Parameter(f"{name}.gamma", np.ones(dim, dtype=dtype))
        self.beta = Parameter(f"{name}.beta", np.zeros(dim, dtype=dtype))
        self.running_mean = np.zeros(dim, dtype=dtype)
        self.running_var = np.ones(dim, dtype=dtype)
        self.momentum = momentum
        self.eps = eps
        self.name = name
        self._cache = None

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def state(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def forward(self, x: np.ndarray, train: bool, rng=None) -> np.ndarray:
        if train:
            mean = x.mean(axis=0)
            var = x.var(axis=0)
            inv_std = 1.0 / np.sqrt(var + self.eps)
            xhat = (x - mean) * inv_std
            self.running_mean = self.momentum * self.running_mean + (1 - self.momentum) * mean
            self.running_var = self.momentum * self.running_var + (1 - self.momentum) * var
            self._cache = (xhat, inv_std, x.shape[0], True)
        else:
            inv_std = 1.0 / np.sqrt(self.running_var + self.eps)
            xhat = (x - self.running_mean) * inv_std
            self._cache = (None, inv_std, x.shape[0], False)
        return self.gamma.value * xhat + self.beta.value

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("backward before forward")
        xhat, inv_std, n, trained = self._cache
        if not trained:
            self.beta.grad += grad.sum(axis=0)
            return grad * self.gamma.value * inv_std
        self.gamma.grad += (grad * xhat).sum(axis=0)
        self.beta.grad += grad.sum(axis=0)
        dxhat = grad * self.gamma.value
        # Batch statistics contribute; standard compact form.
        return (inv_std / n) * (
            n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0)
        )


class ReLU:
    def __init__(self):
        self._mask = None

    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray, train: bool, rng=None) -> np.ndarray:
        self._mask = x > 0
        return x * self._mask

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise StateError("backward before forward")
        return grad * self._mask


class Dropout:
    """Inverted dropout: kept units are scaled by 1/(1-q) at train time."""

    def __init__(self, q: float):
        if not 0.0 <= q < 1.0:
            raise ValueError("dropout rate must be in [0, 1)")
        self.q = q
        self._mask = None

    def parameters(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray, train: bool, rng=None) -> np.ndarray:
        if not train or self.q == 0.0:
            self._mask = 1.0
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        self._mask = (rng.random(x.shape) >= self.q) / (1.0 - self.q)
        return x * self._mask

    def backward(self, grad: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise StateError("backward before forward")
        return grad * self._mask


class DenseUnit:
    """Linear -> [BatchNorm] -> ReLU -> Dropout."""

    def __init__(self, in_dim: int, out_dim: int, rng, cfg: "NetworkConfig", name: str):
        dtype = cfg.numpy_dtype
        self.layers = [Linear(in_dim, out_dim, rng, dtype, f"{name}.linear")]
        if cfg.use_batch_norm:
            self.layers.append(BatchNorm(out_dim, cfg.bn_momentum, cfg.bn_eps, dtype, f"{name}.bn"))
        self.layers.append(ReLU())
        self.layers.append(Dropout(cfg.dropout))

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                out.update(layer.state())
        return out

    def forward(self, x, train, rng=None):
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad


class ResidualFCBlock:
    """Two dense units with a skip connection (input width preserved)."""

    def __init__(self, width: int, rng, cfg: "NetworkConfig", name: str):
        self.unit1 = DenseUnit(width, width, rng, cfg, f"{name}.unit1")
        self.unit2 = DenseUnit(width, width, rng, cfg, f"{name}.unit2")

    def parameters(self) -> list[Parameter]:
        return self.unit1.parameters() + self.unit2.parameters()

    def state(self) -> dict[str, np.ndarray]:
        return {**self.unit1.state(), **self.unit2.state()}

    def forward(self, x, train, rng=None):
        return x + self.unit2.forward(self.unit1.forward(x, train, rng), train, rng)

    def backward(self, grad):
        return grad + self.unit1.backward(self.unit2.backward(grad))


@dataclass
class NetworkConfig:
    """Architecture and numeric settings for the embedding network."""

    input_dim: int = 39
    hidden_dim: int = 128
    embedding_dim: int = 16
    num_blocks: int = 2
    dropout: float = 0.3
    use_batch_norm: bool = True
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    variance_activation: str = "log"  # or "softplus"
    dtype: str = "float64"

    @property
    def numpy_dtype(self):
        return np.dtype(self.dtype).type

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GaussianEmbedding:
    """A diagonal-Gaussian point in embedding space."""

    mean: np.ndarray
    variance: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        variance = np.asarray(self.variance, dtype=np.float64)
        if mean.shape != variance.shape or mean.ndim != 1:
            raise ValueError("mean and variance must be equal-length vectors")
        if not np.all(variance > 0):
            raise ValueError("variance must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)

    @property
    def total_variance(self) -> float:
        return float(self.variance.sum())


class GaussianBatch:
    """A batch of diagonal-Gaussian embeddings as (N, d) arrays."""

    def __init__(self, mean: np.ndarray, variance: np.ndarray):
        mean = np.asarray(mean)
        variance = np.asarray(variance)
        if mean.shape != variance.shape or mean.ndim != 2:
            raise ValueError("mean/variance must be (N, d) arrays of equal shape")
        self.mean = mean
        self.variance = variance

    def __len__(self) -> int:
        return self.mean.shape[0]

    @property
    def dim(self) -> int:
        return self.mean.shape[1]

    def __getitem__(self, i) -> "GaussianEmbedding | GaussianBatch":
        if np.isscalar(i) or isinstance(i, (int, np.integer)):
            return GaussianEmbedding(self.mean[i], self.variance[i])
        return GaussianBatch(self.mean[i], self.variance[i])

    def total_variance(self) -> np.ndarray:
        return self.variance.sum(axis=1)

    @classmethod
    def from_embeddings(cls, items: list[GaussianEmbedding]) -> "GaussianBatch":
        return cls(np.stack([e.mean for e in items]), np.stack([e.variance for e in items]))

    @classmethod
    def concatenate(cls, batches: list["GaussianBatch"]) -> "GaussianBatch":
        """Stack along the feature axis (used by frame-stacking baselines)."""
        return cls(
            np.concatenate([b.mean for b in batches], axis=1),
            np.concatenate([b.variance for b in batches], axis=1),
        )


def sample_batch(batch: GaussianBatch, k: int, rng: np.random.Generator,
                 return_eps: bool = False):
    """Draw k reparameterized samples per embedding: z = mean + eps * sqrt(var)."""
    if k < 1:
        raise ValueError("k must be >= 1")
    n, d = batch.mean.shape
    eps = rng.standard_normal((n, k, d))
    z = batch.mean[:, None, :] + eps * np.sqrt(batch.variance)[:, None, :]
    if return_eps:
        return z, eps
    return z


def sample_embeddings(e: GaussianEmbedding, k: int, rng: np.random.Generator) -> np.ndarray:
    """Reparameterized samples (k, d) from a single embedding."""
    return sample_batch(GaussianBatch(e.mean[None], e.variance[None]), k, rng)[0]


def sample_gradients(dz: np.ndarray, eps: np.ndarray, variance: np.ndarray):
    """Backprop z = mean + eps * sqrt(var) to (dmean, dvariance)."""
    dmean = dz.sum(axis=1)
    dvar = (dz * eps).sum(axis=1) * 0.5 / np.sqrt(variance)
    return dmean, dvar


class EmbeddingNetwork:
    """Residual FC network emitting a Gaussian embedding per input row.

    Architecture: input projection unit (n -> h), ``num_blocks``
    residual FC blocks at width h, then separate linear heads for the
    mean and the variance (through a positivity-enforcing activation).
    """

    kind = "frame"

    def __init__(self, cfg: NetworkConfig, rng: np.random.Generator):
        self.cfg = cfg
        dtype = cfg.numpy_dtype
        self.stem = DenseUnit(cfg.input_dim, cfg.hidden_dim, rng, cfg, "stem")
        self.blocks = [
            ResidualFCBlock(cfg.hidden_dim, rng, cfg, f"block{i}")
            for i in range(cfg.num_blocks)
        ]
        # Small head init keeps initial embeddings near the prior.
        self.mean_head = Linear(cfg.hidden_dim, cfg.embedding_dim, rng, dtype,
                                "mean_head", weight_scale=0.1)
        self.var_head = Linear(cfg.hidden_dim, cfg.embedding_dim, rng, dtype,
                               "var_head", weight_scale=0.1)
        self._cache = None

    def parameters(self) -> list[Parameter]:
        params = self.stem.parameters()
        for b in self.blocks:
            params += b.parameters()
        return params + self.mean_head.parameters() + self.var_head.parameters()

    def state(self) -> dict[str, np.ndarray]:
        out = dict(self.stem.state())
        for b in self.blocks:
            out.update(b.state())
        return out

    def _trunk_forward(self, x, train, rng):
        h = self.stem.forward(x, train, rng)
        for b in self.blocks:
            h = b.forward(h, train, rng)
        return h

    def _head_forward(self, h, train):
        mean = self.mean_head.forward(h, train)
        raw = self.var_head.forward(h, train)
        if self.cfg.variance_activation == "log":
            raw = np.clip(raw, -_LOGVAR_CLAMP, _LOGVAR_CLAMP)
            variance = np.exp(raw)
            dvar_draw = variance
        elif self.cfg.variance_activation == "softplus":
            variance = np.logaddexp(0.0, raw)
            dvar_draw = 1.0 / (1.0 + np.exp(-raw))
        else:
            raise ValueError(f"unknown variance_activation {self.cfg.variance_activation!r}")
        self._cache = dvar_draw if train else None
        return mean, variance

    def forward(self, x: np.ndarray, train: bool = False,
                rng: np.random.Generator | None = None) -> GaussianBatch:
        x = np.asarray(x, dtype=self.cfg.numpy_dtype)
        if x.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise ValueError(f"expected input (N, {self.cfg.input_dim}), got {x.shape}")
        h = self._trunk_forward(x, train, rng)
        mean, variance = self._head_forward(h, train)
        return GaussianBatch(mean, variance)

    def backward(self, dmean: np.ndarray, dvariance: np.ndarray) -> np.ndarray:
        """Accumulate parameter grads for d(loss)/d(mean, variance)."""
        if self._cache is None:
            raise StateError("backward before train-mode forward")
        draw = dvariance * self._cache
        grad = self.mean_head.backward(np.asarray(dmean, dtype=self.cfg.numpy_dtype))
        grad = grad + self.var_head.backward(np.asarray(draw, dtype=self.cfg.numpy_dtype))
        for b in reversed(self.blocks):
            grad = b.backward(grad)
        return self.stem.backward(grad)

    def meta(self) -> dict:
        return {"kind": self.kind, "config": self.cfg.to_dict()}

    @classmethod
    def from_meta(cls, meta: dict, rng: np.random.Generator | None = None) -> "EmbeddingNetwork":
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(NetworkConfig(**meta["config"]), rng)


# ---------------------------------------------------------------------------
# Checkpoint I/O: a zip (npz) of named arrays plus a JSON meta entry.
# Arrays are stored with numpy's lossless binary format, so round-trips
# are exact at stored precision.
# ---------------------------------------------------------------------------


def network_arrays(net) -> dict[str, np.ndarray]:
    arrays = {}
    for p in net.parameters():
        arrays[f"param:{p.name}"] = p.value
        arrays[f"accum:{p.name}"] = p.accumulator
    for name, value in net.state().items():
        arrays[f"state:{name}"] = value
    return arrays


def restore_network(net, arrays: dict[str, np.ndarray]) -> None:
    for p in net.parameters():
        value = arrays[f"param:{p.name}"]
        if value.shape != p.value.shape:
            raise ValueError(f"shape mismatch for {p.name}")
        p.value = value.astype(p.value.dtype)
        p.grad = np.zeros_like(p.value)
        p.accumulator = arrays[f"accum:{p.name}"].astype(p.value.dtype)
    state = net.state()
    for name in state:
        state[name][...] = arrays[f"state:{name}"]


def save_checkpoint(path, net, extras: dict[str, np.ndarray] | None = None,
                    meta: dict | None = None) -> None:
    meta = dict(meta or {})
    meta["schema_version"] = CHECKPOINT_SCHEMA_VERSION
    meta["network"] = net.meta()
    arrays = network_arrays(net)
    for name, value in (extras or {}).items():
        arrays[f"extra:{name}"] = np.asarray(value)
    meta_blob = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, __meta__=meta_blob, **arrays)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
            raise ValueError("unsupported checkpoint schema version")
        arrays = {k: data[k] for k in data.files if k != "__meta__"}
    return meta, arrays


def extras_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k[len("extra:"):]: v for k, v in arrays.items() if k.startswith("extra:")}


# ---------------------------------------------------------------------------
# Finite-difference gradient checking.
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    num_checked: int
    worst_name: str = ""
    worst_index: int = -1

    def passed(self, tol: float = 1e-3) -> bool:
        return self.max_rel_error < tol


def gradient_check(
    value_fn,
    grad_fn,
    params: list[Parameter],
    rng: np.random.Generator,
    num_coords: int = 200,
    step: float = 1e-5,
    abs_floor: float = 1e-7,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``grad_fn()`` must populate ``p.grad`` for every parameter (it is
    responsible for zeroing first) and return the loss; ``value_fn()``
    must recompute the same loss, reproducing any stochastic choices
    (dropout masks, sampling noise) bit for bit. ``num_coords``
    coordinates are sampled across all parameters. A coordinate passes
    outright when the absolute difference is below ``abs_floor``
    (guards near-zero gradients against FD round-off); otherwise the
    relative error |a - n| / max(|a|, |n|) is scored.
    """
    grad_fn()
    analytic = {p.name: p.grad.copy() for p in params}

    sizes = np.array([p.value.size for p in params])
    total = int(sizes.sum())
    count = min(num_coords, total)
    chosen = rng.choice(total, size=count, replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = GradCheckReport(max_rel_error=0.0, num_checked=count)
    for flat_index in chosen:
        pi = int(np.searchsorted(offsets, flat_index, side="right") - 1)
        local = int(flat_index - offsets[pi])
        p = params[pi]
        flat = p.value.reshape(-1)
        original = flat[local]
        flat[local] = original + step
        up = value_fn()
        flat[local] = original - step
        down = value_fn()
        flat[local] = original
        numeric = (up - down) / (2.0 * step)
        a = float(analytic[p.name].reshape(-1)[local])
        diff = abs(a - numeric)
        if diff < abs_floor:
            continue
        rel = diff / max(abs(a), abs(numeric))
        if rel > worst.max_rel_error:
            worst.max_rel_error = rel
            worst.worst_name = p.name
            worst.worst_index = local
    return worst
