"""ST-GCN-lite encoder, MLP projection head and the momentum key encoder.

Parameters live in flat ``{name: Tensor}`` dicts. Names follow
``module.block.tensor`` so they map one-to-one onto checkpoint entries.
"""

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

CKPT_MAGIC = b"AIMC"
CKPT_VERSION = 1
_DTYPES = {4: "<f4", 8: "<f8"}


class CheckpointError(ValueError):
    pass


@dataclass
class EncoderConfig:
    in_channels: int = 3
    channels: tuple = (32, 64)
    strides: tuple = (1, 2)
    kernel_size: int = 5
    proj_dim: int = 32

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.strides) != len(self.channels):
            raise ValueError("need one temporal stride per block")
        if min(self.channels + self.strides + (self.in_channels, self.proj_dim)) < 1:
            raise ValueError("all encoder dims must be >= 1")
        if self.kernel_size % 2 != 1:
            raise ValueError("temporal kernel size must be odd")

    @property
    def feature_dim(self):
        return self.channels[-1]

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        d["strides"] = list(self.strides)
        return d


def init_params(config, rng, dtype=None):
    """He-initialised weights, zero biases."""
    dtype = dtype or ad.get_default_dtype()
    params = {}

    def put(name, arr):
        params[name] = ad.Tensor(arr, requires_grad=True, dtype=dtype)

    cin = config.in_channels
    k = config.kernel_size
    for i, cout in enumerate(config.channels):
        put(f"encoder.block{i}.spatial_weight", rng.normal(0, np.sqrt(2.0 / cin), size=(cin, cout)))
        put(f"encoder.block{i}.spatial_bias", np.zeros(cout))
        put(f"encoder.block{i}.temporal_weight", rng.normal(0, np.sqrt(2.0 / (cout * k)), size=(k, cout, cout)))
        put(f"encoder.block{i}.temporal_bias", np.zeros(cout))
        cin = cout
    h = config.feature_dim
    put("head.fc1.weight", rng.normal(0, np.sqrt(2.0 / h), size=(h, h)))
    put("head.fc1.bias", np.zeros(h))
    put("head.fc2.weight", rng.normal(0, np.sqrt(1.0 / h), size=(h, config.proj_dim)))
    put("head.fc2.bias", np.zeros(config.proj_dim))
    return params


def _as_batch(x):
    """Accept [C,T,V,P] or [N,C,T,V,P]; return the 5-D array."""
    x = x.data if isinstance(x, ad.Tensor) else np.asarray(x)
    return x[None] if x.ndim == 4 else x


def encode(params, x, graph, config):
    """Run the query/key backbone on ``[N, C, T, V, P]`` (or one ``[C, T, V, P]``).

    Returns ``(feature_map [N, C', T', V], h [N, C'])``. Person slots are
    folded into the batch and mean-pooled before the feature map is formed.
    Internally blocks run channels-last.
    """
    x = _as_batch(x)
    n, c, t, v, p = x.shape
    if c != config.in_channels:
        raise ValueError(f"input has {c} channels, encoder expects {config.in_channels}")
    if v != graph.num_joints:
        raise ValueError(f"input has {v} joints, graph has {graph.num_joints}")
    dtype = params["encoder.block0.spatial_weight"].dtype
    a_hat = ad.Tensor(graph.normalized_adjacency(), dtype=dtype)
    # [N, P, T, V, C]
    h = ad.Tensor(np.ascontiguousarray(x.transpose(0, 4, 2, 3, 1).reshape(n * p, t, v, c)), dtype=dtype)

    for i, stride in enumerate(config.strides):
        agg = ad.matmul(a_hat, h)  # sums over neighbouring joints
        mixed = ad.matmul(agg, params[f"encoder.block{i}.spatial_weight"])
        h = ad.relu(ad.add(mixed, params[f"encoder.block{i}.spatial_bias"]))
        h = ad.temporal_conv(h, params[f"encoder.block{i}.temporal_weight"], stride)
        h = ad.add(h, params[f"encoder.block{i}.temporal_bias"])

    t_out, cout = h.shape[1], h.shape[3]
    h = ad.mean(ad.reshape(h, (n, p, t_out, v, cout)), axis=1)
    fmap = ad.transpose(h, (0, 3, 1, 2))
    return fmap, pool(fmap)


def pool(feature_map):
    return ad.mean(feature_map, axis=(2, 3))


def project(params, h):
    """Two-layer MLP followed by L2 normalisation."""
    hidden = ad.relu(ad.add(ad.matmul(h, params["head.fc1.weight"]), params["head.fc1.bias"]))
    z = ad.add(ad.matmul(hidden, params["head.fc2.weight"]), params["head.fc2.bias"])
    return ad.l2_normalize(z, axis=-1)


def backbone_names(params):
    return [k for k in params if k.startswith("encoder.")]


# ---------------------------------------------------------------- momentum pair


@dataclass
class EncoderPair:
    query: dict
    key: dict = field(default=None)
    momentum: float = 0.999

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.key is None:
            self.key = {k: ad.Tensor(v.data.copy(), dtype=v.dtype) for k, v in self.query.items()}
        _check_congruent(self.query, self.key)


def _check_congruent(query, key):
    if query.keys() != key.keys():
        raise ValueError("query and key parameter names differ")
    for name in query:
        if query[name].shape != key[name].shape:
            raise ValueError(f"{name}: query shape {query[name].shape} != key shape {key[name].shape}")


def momentum_update(pair):
    """theta_k <- m * theta_k + (1 - m) * theta_q, elementwise."""
    _check_congruent(pair.query, pair.key)
    m = pair.momentum
    for name, q in pair.query.items():
        k = pair.key[name]
        k.data = m * k.data + (1 - m) * q.data


# ---------------------------------------------------------------- checkpoint container


def save_arrays(path, arrays):
    """Write named arrays: magic, version, count, then (name, dtype, dims, data) records."""
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr.data if isinstance(arr, ad.Tensor) else arr)
            width = 8 if arr.dtype == np.float64 else 4
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BI", width, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPES[width]).tobytes())


def load_arrays(path, expected=None):
    """Read a container; ``expected`` maps names to shapes that must match exactly."""
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {raw[:4]!r})")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode()
            off += nlen
            width, ndim = struct.unpack_from("<BI", raw, off)
            off += 5
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            size = int(np.prod(shape)) * width
            if off + size > len(raw):
                raise CheckpointError(f"{path}: truncated at entry {name!r}")
            out[name] = np.frombuffer(raw, dtype=_DTYPES[width], count=int(np.prod(shape)), offset=off).reshape(shape).copy()
            off += size
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header") from exc
    if expected is not None:
        if set(expected) != set(out):
            missing = sorted(set(expected) - set(out))
            extra = sorted(set(out) - set(expected))
            raise CheckpointError(f"{path}: name mismatch, missing {missing}, unexpected {extra}")
        for name, shape in expected.items():
            if tuple(shape) != out[name].shape:
                raise CheckpointError(f"{path}: {name} has shape {out[name].shape}, expected {tuple(shape)}")
    return out


def params_to_arrays(params, prefix):
    return {f"{prefix}.{k}": v.data for k, v in params.items()}


def arrays_to_params(arrays, prefix, requires_grad=False, dtype=None):
    plen = len(prefix) + 1
    return {
        k[plen:]: ad.Tensor(v, requires_grad=requires_grad, dtype=dtype or v.dtype)
        for k, v in arrays.items()
        if k.startswith(prefix + ".")
    }
