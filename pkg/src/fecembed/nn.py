"""Embedding head on precomputed feature vectors.

Layout (vector form of the convolutional head)::

    x -> linear (bottleneck) -> dense block [BN -> ReLU6 -> linear(growth)] x L
      -> linear (fc_width) -> BN -> ReLU6 -> dropout -> linear (emb_dim) -> l2 norm

Each dense layer sees the concatenation of the bottleneck output and every
earlier dense layer's output, and appends its own ``growth`` features.

Biases are only allocated for linear layers whose outputs do not flow
exclusively into batch normalization; with batchnorm on that leaves the
embedding layer bias alone (the others would have identically zero
gradient).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.99
NORM_EPS = 1e-12

TRAIN = "train"
INFER = "infer"


class DegenerateEmbedding(ArithmeticError):
    """The pre-normalization embedding vector has (near) zero norm."""


@dataclass(frozen=True)
class HeadSpec:
    in_dim: int
    bottleneck_width: int = 512
    dense_layers: int = 5
    growth: int = 64
    fc_width: int = 512
    emb_dim: int = 16
    dropout_rate: float = 0.5
    use_batchnorm: bool = True
    normalize: bool = True

    def __post_init__(self):
        if min(self.in_dim, self.bottleneck_width, self.growth, self.fc_width, self.emb_dim) < 1:
            raise ValueError("all layer widths must be >= 1")
        if self.dense_layers < 0:
            raise ValueError("dense_layers must be >= 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.normalize and self.emb_dim < 2:
            raise ValueError("emb_dim must be >= 2 for a normalized embedding")

    @property
    def dense_out_dim(self) -> int:
        return self.bottleneck_width + self.dense_layers * self.growth

    def dense_in_dim(self, layer: int) -> int:
        """Input width of dense layer ``layer`` (1-based)."""
        return self.bottleneck_width + (layer - 1) * self.growth


@dataclass
class Parameters:
    """Trainable arrays (``weights``) plus batchnorm running statistics (``buffers``).

    Both dicts keep declaration order, which is also the serialization order.
    """

    weights: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]

    def copy(self) -> "Parameters":
        return Parameters({k: v.copy() for k, v in self.weights.items()},
                          {k: v.copy() for k, v in self.buffers.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.weights.items()}

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.weights.values()])

    def set_flat(self, vec: np.ndarray) -> None:
        off = 0
        for k, v in self.weights.items():
            self.weights[k] = np.asarray(vec[off:off + v.size], dtype=np.float64).reshape(v.shape)
            off += v.size

    @property
    def size(self) -> int:
        return sum(v.size for v in self.weights.values())

    def digest(self) -> str:
        h = hashlib.sha256()
        for d in (self.weights, self.buffers):
            for k, v in d.items():
                h.update(k.encode())
                h.update(np.ascontiguousarray(v, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


# --------------------------------------------------------------------------
# primitives
# --------------------------------------------------------------------------

def xavier_init(rows: int, cols: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform Glorot init on [-b, b], b = sqrt(6 / (rows + cols))."""
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def relu6(x):
    return np.minimum(np.maximum(x, 0.0), 6.0)


def relu6_backward(x, upstream):
    # subgradient 0 at the kinks
    return upstream * ((x > 0.0) & (x < 6.0))


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode=TRAIN):
    """Per-feature batch normalization.

    Returns ``(out, cache)``; in train mode ``cache["mean"]``/``cache["var"]``
    are the batch statistics the caller folds into the running averages.
    """
    if mode == TRAIN:
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        mean = x.mean(axis=0)
        var = x.var(axis=0)
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, {"xhat": xhat, "inv_std": inv_std, "gamma": gamma,
                                 "mean": mean, "var": var, "mode": mode}


def batchnorm_backward(cache, upstream):
    """Gradients ``(dx, dgamma, dbeta)`` for a train-mode batchnorm."""
    if cache["mode"] != TRAIN:
        raise ValueError("batchnorm backward requires a train-mode cache")
    xhat = cache["xhat"]
    n = xhat.shape[0]
    dgamma = np.sum(upstream * xhat, axis=0)
    dbeta = np.sum(upstream, axis=0)
    dxhat = upstream * cache["gamma"]
    dx = (cache["inv_std"] / n) * (n * dxhat - dxhat.sum(axis=0) - xhat * np.sum(dxhat * xhat, axis=0))
    return dx, dgamma, dbeta


def l2_normalize(x):
    """Row-wise (or whole-vector for 1-d input) unit l2 normalization."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norm < NORM_EPS):
        raise DegenerateEmbedding("cannot normalize a vector with norm < 1e-12")
    return x / norm


def l2_normalize_backward(x, upstream):
    """Apply (I - y y^T) / ||x|| to ``upstream`` (row-wise)."""
    x = np.asarray(x, dtype=np.float64)
    norm = np.linalg.norm(x, axis=-1, keepdims=True)
    y = x / norm
    return (upstream - y * np.sum(upstream * y, axis=-1, keepdims=True)) / norm


def _bn_relu6(x, gamma, beta, running_mean, running_var, mode):
    """Batchnorm then ReLU6; returns ``(pre_act, act, cache)``."""
    if mode == TRAIN:
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2")
        # dense-block inputs are column slices; the kernel is much faster on contiguous rows
        xhat, inv_std, mean, var, z, act = kernels.bn_relu6_forward(
            np.ascontiguousarray(x), gamma, beta, BN_EPS)
        return z, act, {"xhat": xhat, "inv_std": inv_std, "gamma": gamma, "mean": mean,
                        "var": var, "mode": mode}
    z, cache = batchnorm_forward(x, gamma, beta, running_mean, running_var, mode)
    return z, relu6(z), cache


def _bn_relu6_backward(cache, pre_act, upstream):
    if cache["mode"] != TRAIN:
        raise ValueError("batchnorm backward requires a train-mode cache")
    return kernels.bn_relu6_backward(cache["xhat"], cache["inv_std"], cache["gamma"], pre_act, upstream)


# --------------------------------------------------------------------------
# head
# --------------------------------------------------------------------------

def init_params(spec: HeadSpec, seed: int) -> Parameters:
    rng = np.random.default_rng([seed, 0x4E4E])
    bn = spec.use_batchnorm
    w: dict[str, np.ndarray] = {}
    buf: dict[str, np.ndarray] = {}
    w["proj.w"] = xavier_init(spec.in_dim, spec.bottleneck_width, rng)
    if not bn:
        w["proj.b"] = np.zeros(spec.bottleneck_width)
    for layer in range(1, spec.dense_layers + 1):
        width = spec.dense_in_dim(layer)
        if bn:
            w[f"dense{layer}.gamma"] = np.ones(width)
            w[f"dense{layer}.beta"] = np.zeros(width)
            buf[f"dense{layer}.mean"] = np.zeros(width)
            buf[f"dense{layer}.var"] = np.ones(width)
        w[f"dense{layer}.w"] = xavier_init(width, spec.growth, rng)
        if not bn:
            w[f"dense{layer}.b"] = np.zeros(spec.growth)
    w["fc.w"] = xavier_init(spec.dense_out_dim, spec.fc_width, rng)
    if bn:
        w["fc.gamma"] = np.ones(spec.fc_width)
        w["fc.beta"] = np.zeros(spec.fc_width)
        buf["fc.mean"] = np.zeros(spec.fc_width)
        buf["fc.var"] = np.ones(spec.fc_width)
    else:
        w["fc.b"] = np.zeros(spec.fc_width)
    w["emb.w"] = xavier_init(spec.fc_width, spec.emb_dim, rng)
    w["emb.b"] = np.zeros(spec.emb_dim)
    return Parameters(w, buf)


@dataclass
class ForwardTrace:
    mode: str
    x: np.ndarray
    concat: np.ndarray
    dense: list
    fc_pre_bn: np.ndarray | None
    fc_bn: dict | None
    fc_pre_act: np.ndarray
    fc_act: np.ndarray
    mask: np.ndarray | None
    emb_in: np.ndarray
    raw: np.ndarray
    out: np.ndarray

    def batch_stats(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        stats = {f"dense{i + 1}": (c["bn"]["mean"], c["bn"]["var"])
                 for i, c in enumerate(self.dense) if c["bn"] is not None}
        if self.fc_bn is not None:
            stats["fc"] = (self.fc_bn["mean"], self.fc_bn["var"])
        return stats


def dense_block_forward(spec: HeadSpec, params: Parameters, x: np.ndarray, mode: str = INFER):
    """Bottleneck projection plus dense block; returns ``(concat, layer_caches)``.

    ``concat`` has width ``bottleneck_width + dense_layers * growth``.
    """
    n = x.shape[0]
    bw, g = spec.bottleneck_width, spec.growth
    concat = np.empty((n, spec.dense_out_dim))
    h = x @ params["proj.w"]
    if not spec.use_batchnorm:
        h += params["proj.b"]
    concat[:, :bw] = h
    caches = []
    for layer in range(1, spec.dense_layers + 1):
        width = spec.dense_in_dim(layer)
        z = concat[:, :width]
        bn_cache = None
        if spec.use_batchnorm:
            z, a, bn_cache = _bn_relu6(z, params[f"dense{layer}.gamma"], params[f"dense{layer}.beta"],
                                       params.buffers[f"dense{layer}.mean"],
                                       params.buffers[f"dense{layer}.var"], mode)
        else:
            a = relu6(z)
        y = a @ params[f"dense{layer}.w"]
        if not spec.use_batchnorm:
            y += params[f"dense{layer}.b"]
        concat[:, width:width + g] = y
        caches.append({"bn": bn_cache, "pre_act": z, "act": a})
    return concat, caches


def head_forward(spec: HeadSpec, params: Parameters, x, mode: str = INFER,
                 rng: np.random.Generator | None = None):
    """Run the head on a batch ``x`` of shape (N, in_dim).

    Returns ``(embeddings, trace)``. In train mode batchnorm uses batch
    statistics and dropout needs ``rng``; running statistics are not touched
    here (see :func:`update_running_stats`).
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != spec.in_dim:
        raise ValueError(f"input dim {x.shape[1]} != head in_dim {spec.in_dim}")
    concat, dense = dense_block_forward(spec, params, x, mode)
    f = concat @ params["fc.w"]
    fc_pre_bn, fc_bn = None, None
    if spec.use_batchnorm:
        fc_pre_bn = f
        f, r, fc_bn = _bn_relu6(f, params["fc.gamma"], params["fc.beta"],
                                params.buffers["fc.mean"], params.buffers["fc.var"], mode)
    else:
        f = f + params["fc.b"]
        r = relu6(f)
    mask = None
    emb_in = r
    if mode == TRAIN and spec.dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train mode with dropout requires an rng")
        keep = 1.0 - spec.dropout_rate
        mask = (rng.random(r.shape) < keep) / keep
        emb_in = r * mask
    raw = emb_in @ params["emb.w"] + params["emb.b"]
    out = l2_normalize(raw) if spec.normalize else raw
    trace = ForwardTrace(mode, x, concat, dense, fc_pre_bn, fc_bn, f, r, mask, emb_in, raw, out)
    return out, trace


def head_backward(spec: HeadSpec, params: Parameters, trace: ForwardTrace, upstream) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * embeddings)`` w.r.t. every trainable array."""
    if trace.mode != TRAIN:
        raise ValueError("head_backward requires a train-mode trace")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != trace.out.shape:
        raise ValueError(f"upstream shape {upstream.shape} != output shape {trace.out.shape}")
    bn = spec.use_batchnorm
    grads: dict[str, np.ndarray] = {}

    g_raw = l2_normalize_backward(trace.raw, upstream) if spec.normalize else upstream
    grads["emb.w"] = trace.emb_in.T @ g_raw
    grads["emb.b"] = g_raw.sum(axis=0)
    g_r = g_raw @ params["emb.w"].T
    if trace.mask is not None:
        g_r = g_r * trace.mask
    if bn:
        g_f, grads["fc.gamma"], grads["fc.beta"] = _bn_relu6_backward(trace.fc_bn, trace.fc_pre_act, g_r)
    else:
        g_f = relu6_backward(trace.fc_pre_act, g_r)
        grads["fc.b"] = g_f.sum(axis=0)
    grads["fc.w"] = trace.concat.T @ g_f
    g_cat = g_f @ params["fc.w"].T

    bw, g = spec.bottleneck_width, spec.growth
    for layer in range(spec.dense_layers, 0, -1):
        cache = trace.dense[layer - 1]
        width = spec.dense_in_dim(layer)
        g_y = g_cat[:, width:width + g]
        grads[f"dense{layer}.w"] = cache["act"].T @ g_y
        if not bn:
            grads[f"dense{layer}.b"] = g_y.sum(axis=0)
        g_a = g_y @ params[f"dense{layer}.w"].T
        if bn:
            g_z, grads[f"dense{layer}.gamma"], grads[f"dense{layer}.beta"] = \
                _bn_relu6_backward(cache["bn"], cache["pre_act"], g_a)
        else:
            g_z = relu6_backward(cache["pre_act"], g_a)
        g_cat[:, :width] += g_z
    g_h = g_cat[:, :bw]
    grads["proj.w"] = trace.x.T @ g_h
    if not bn:
        grads["proj.b"] = g_h.sum(axis=0)
    return {k: grads[k] for k in params.weights}


def update_running_stats(params: Parameters, trace: ForwardTrace, momentum: float = BN_MOMENTUM) -> None:
    for name, (mean, var) in trace.batch_stats().items():
        params.buffers[f"{name}.mean"] = momentum * params.buffers[f"{name}.mean"] + (1 - momentum) * mean
        params.buffers[f"{name}.var"] = momentum * params.buffers[f"{name}.var"] + (1 - momentum) * var


def embed(spec: HeadSpec, params: Parameters, x, batch_size: int = 4096) -> np.ndarray:
    """Infer-mode embeddings for a feature matrix, in chunks."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = [head_forward(spec, params, x[i:i + batch_size], INFER)[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, spec.emb_dim))


# --------------------------------------------------------------------------
# model file
# --------------------------------------------------------------------------

MODEL_MAGIC = b"FECH"
MODEL_VERSION = 1


def save_model(path, spec: HeadSpec, params: Parameters, seed: int | None = None,
               config_digest: str | None = None) -> None:
    """Write the FECH model file: header JSON then float32 arrays in declaration order."""
    arrays = list(params.weights.items()) + list(params.buffers.items())
    meta = {
        "spec": asdict(spec),
        "seed": seed,
        "config_digest": config_digest,
        "weights": [[k, list(v.shape)] for k, v in params.weights.items()],
        "buffers": [[k, list(v.shape)] for k, v in params.buffers.items()],
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<II", MODEL_VERSION, len(blob)) + blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_model(path) -> tuple[HeadSpec, Parameters, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MODEL_MAGIC:
        raise ValueError(f"{path} is not a FECH model file")
    version, n = struct.unpack_from("<II", data, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    meta = json.loads(data[12:12 + n].decode("utf-8"))
    off = 12 + n

    def take(entries):
        nonlocal off
        out = {}
        for name, shape in entries:
            count = int(np.prod(shape)) if shape else 1
            out[name] = np.frombuffer(data, dtype="<f4", count=count, offset=off) \
                .astype(np.float64).reshape(shape)
            off += 4 * count
        return out

    weights = take(meta["weights"])
    buffers = take(meta["buffers"])
    return HeadSpec(**meta["spec"]), Parameters(weights, buffers), meta
