"""Skeleton sequences, graphs, derived streams, file formats and a synthetic set.

Sequences are plain numpy arrays laid out ``[C, T, V, P]``.
"""

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"SKL1"
_HEADER = struct.Struct("<4sIIII")


class SequenceFormatError(ValueError):
    """Bad magic or malformed header."""


class TruncatedSequenceError(SequenceFormatError):
    pass


class NonFiniteSequenceError(ValueError):
    pass


@dataclass
class SkeletonSequence:
    data: np.ndarray
    label: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 4:
            raise ValueError(f"sequence must be [C, T, V, P], got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteSequenceError("sequence contains non-finite values")

    @property
    def shape(self):
        return self.data.shape


@dataclass
class SkeletonGraph:
    num_joints: int
    edges: list
    center: int
    left_right_pairs: list = field(default_factory=list)

    def __post_init__(self):
        self.edges = [tuple(int(i) for i in e) for e in self.edges]
        self.left_right_pairs = [tuple(int(i) for i in p) for p in self.left_right_pairs]
        self.validate()

    def validate(self):
        v = self.num_joints
        if len(self.edges) != v - 1:
            raise ValueError(f"tree over {v} joints needs {v - 1} edges, got {len(self.edges)}")
        children = {}
        for parent, child in self.edges:
            if not (0 <= parent < v and 0 <= child < v):
                raise ValueError(f"edge ({parent}, {child}) out of range for {v} joints")
            if child in children or child == self.center:
                raise ValueError(f"joint {child} has more than one parent")
            children[child] = parent
        for j in range(v):
            seen, k = set(), j
            while k != self.center:
                if k in seen or k not in children:
                    raise ValueError(f"joint {j} is not reachable from center {self.center}")
                seen.add(k)
                k = children[k]
        flat = [j for pair in self.left_right_pairs for j in pair]
        if len(set(flat)) != len(flat):
            raise ValueError("left_right_pairs overlap")
        if self.center in flat:
            raise ValueError("center joint cannot be in a left/right pair")
        for j in flat:
            if not 0 <= j < v:
                raise ValueError(f"pair index {j} out of range for {v} joints")

    def adjacency(self):
        a = np.zeros((self.num_joints, self.num_joints))
        for p, c in self.edges:
            a[p, c] = a[c, p] = 1.0
        return a

    def normalized_adjacency(self):
        """D^-1/2 (A + I) D^-1/2."""
        a = self.adjacency() + np.eye(self.num_joints)
        d = 1.0 / np.sqrt(a.sum(axis=1))
        return a * d[:, None] * d[None, :]

    def to_json(self):
        return {
            "num_joints": self.num_joints,
            "edges": [list(e) for e in self.edges],
            "center": self.center,
            "left_right_pairs": [list(p) for p in self.left_right_pairs],
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj["num_joints"], obj["edges"], obj["center"], obj.get("left_right_pairs", []))


def default_graph():
    """Nine-joint, three-branch tree: two three-joint arms and a two-joint head."""
    return SkeletonGraph(
        num_joints=9,
        edges=[(0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (5, 6), (0, 7), (7, 8)],
        center=0,
        left_right_pairs=[(1, 4), (2, 5), (3, 6)],
    )


def save_graph(graph, path):
    Path(path).write_text(json.dumps(graph.to_json(), indent=2))


def load_graph(path):
    return SkeletonGraph.from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------- SKL1 files


def save_sequence(seq, path):
    data = seq.data if isinstance(seq, SkeletonSequence) else np.asarray(seq)
    c, t, v, p = data.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, c, t, v, p))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def load_sequence(path, label=None):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise TruncatedSequenceError(f"{path}: file shorter than SKL1 header")
    magic, c, t, v, p = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise SequenceFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    n = c * t * v * p
    payload = raw[_HEADER.size:]
    if len(payload) != 4 * n:
        raise TruncatedSequenceError(
            f"{path}: header says {c}x{t}x{v}x{p} = {n} floats, payload holds {len(payload) / 4:g}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(c, t, v, p).astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise NonFiniteSequenceError(f"{path}: payload contains non-finite values")
    return SkeletonSequence(data, label)


# ---------------------------------------------------------------- manifests


@dataclass
class DatasetManifest:
    entries: list
    num_classes: int
    root: Path = Path(".")

    def __post_init__(self):
        for e in self.entries:
            if not 0 <= int(e["label"]) < self.num_classes:
                raise ValueError(f"label {e['label']} outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.entries)

    @property
    def labels(self):
        return np.array([int(e["label"]) for e in self.entries])

    def resolve(self, entry):
        p = Path(entry["path"])
        return p if p.is_absolute() else self.root / p

    def load(self, index):
        e = self.entries[index]
        return load_sequence(self.resolve(e), int(e["label"]))

    def load_all(self, dtype=np.float64):
        """Stack every sequence into an ``[N, C, T, V, P]`` array."""
        return np.stack([self.load(i).data for i in range(len(self))]).astype(dtype), self.labels

    def subset(self, indices):
        return DatasetManifest([self.entries[i] for i in indices], self.num_classes, self.root)


def save_manifest(manifest, path):
    obj = {"num_classes": manifest.num_classes, "entries": manifest.entries}
    Path(path).write_text(json.dumps(obj, indent=1))


def load_manifest(path):
    path = Path(path)
    obj = json.loads(path.read_text())
    m = DatasetManifest(obj["entries"], int(obj["num_classes"]), path.parent)
    for e in m.entries:
        if not m.resolve(e).exists():
            raise FileNotFoundError(f"manifest entry {e['path']} does not resolve under {path.parent}")
    return m


# ---------------------------------------------------------------- streams


def _raw(x):
    return x.data if isinstance(x, SkeletonSequence) else np.asarray(x)


def _wrap(x, out):
    return SkeletonSequence(out, x.label) if isinstance(x, SkeletonSequence) else out


def to_bone_stream(x, graph):
    data = _raw(x)
    if data.shape[-2] != graph.num_joints:
        raise ValueError(f"sequence has {data.shape[-2]} joints, graph has {graph.num_joints}")
    out = np.zeros_like(data)
    for parent, child in graph.edges:
        out[..., child, :] = data[..., child, :] - data[..., parent, :]
    return _wrap(x, out)


def to_motion_stream(x):
    data = _raw(x)
    out = np.zeros_like(data)
    out[:, 1:] = data[:, 1:] - data[:, :-1]
    return _wrap(x, out)


def to_stream(x, stream, graph):
    if stream == "joint":
        return x
    if stream == "bone":
        return to_bone_stream(x, graph)
    if stream == "motion":
        return to_motion_stream(x)
    raise ValueError(f"unknown stream {stream!r}")


def batch_stream(batch, stream, graph):
    """Stream derivation over a stacked ``[N, C, T, V, P]`` batch."""
    if stream == "joint":
        return batch
    if stream == "bone":
        out = np.zeros_like(batch)
        for parent, child in graph.edges:
            out[..., child, :] = batch[..., child, :] - batch[..., parent, :]
        return out
    if stream == "motion":
        out = np.zeros_like(batch)
        out[:, :, 1:] = batch[:, :, 1:] - batch[:, :, :-1]
        return out
    raise ValueError(f"unknown stream {stream!r}")


# ---------------------------------------------------------------- synthetic data


def synthetic_arrays(classes, per_class, T=32, V=9, P=1, seed=0, graph=None, noise=0.02,
                     actor_shear=0.4, amp_jitter=0.6, phase_jitter=1.0):
    """Return ``(data [N,3,T,V,P] float32, labels [N])`` for the synthetic set.

    Coordinates are joint displacements from a rest pose (zero temporal mean
    per joint and axis). Class ``c`` moves every joint sinusoidally at
    ``c + 1`` cycles per clip with class-specific per-joint amplitudes and
    phases. Each sample perturbs the per-joint amplitudes by a factor in
    ``1 +- amp_jitter`` and the phases by ``N(0, phase_jitter)``, applies a
    random actor shear with coefficients in ``+-actor_shear`` and adds
    Gaussian coordinate noise.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    graph = graph or (default_graph() if V == 9 else _chain_graph(V))
    if graph.num_joints != V:
        raise ValueError(f"graph has {graph.num_joints} joints, asked for V={V}")
    rng = np.random.default_rng(seed)
    t = np.arange(T) / T
    motifs = [(c + 1, rng.uniform(0.1, 0.4, size=(V, 3)), rng.uniform(0, 2 * np.pi, size=(V, 3)))
              for c in range(classes)]

    data = np.empty((classes * per_class, 3, T, V, P), dtype=np.float32)
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    n = 0
    for freq, amp, phase in motifs:
        for _ in range(per_class):
            for p in range(P):
                a = amp * rng.uniform(1 - amp_jitter, 1 + amp_jitter, size=amp.shape)
                ph = phase + rng.normal(scale=phase_jitter, size=phase.shape)
                traj = a[None] * np.sin(2 * np.pi * freq * t[:, None, None] + ph[None])  # T, V, 3
                traj = traj + rng.normal(scale=noise, size=traj.shape)
                shear = np.eye(3)
                shear[~np.eye(3, dtype=bool)] = rng.uniform(-actor_shear, actor_shear, size=6)
                traj = traj @ shear.T
                traj = traj - traj.mean(axis=0, keepdims=True)
                data[n, :, :, :, p] = traj.transpose(2, 0, 1)
            n += 1
    return data, labels


def _chain_graph(V):
    return SkeletonGraph(V, [(i, i + 1) for i in range(V - 1)], 0, [])


def split_arrays(data, labels, classes, per_class, test_per_class):
    """Split class-blocked arrays: the last ``test_per_class`` samples of each class go to test."""
    if not 0 <= test_per_class < per_class:
        raise ValueError("test_per_class must lie in [0, per_class)")
    idx = np.arange(len(labels)).reshape(classes, per_class)
    cut = per_class - test_per_class
    tr, te = idx[:, :cut].ravel(), idx[:, cut:].ravel()
    return (data[tr], labels[tr]), (data[te], labels[te])


def generate_synthetic(classes, per_class, out_dir, T=32, V=9, P=1, seed=0, graph=None, test_per_class=0):
    """Write SKL1 files plus ``manifest.json`` and ``graph.json`` into ``out_dir``.

    With ``test_per_class > 0`` another ``test_per_class`` samples per class
    are drawn from the same motifs and listed in ``test_manifest.json``.
    Returns the training manifest.
    """
    graph = graph or (default_graph() if V == 9 else _chain_graph(V))
    total = per_class + test_per_class
    data, labels = synthetic_arrays(classes, total, T, V, P, seed, graph)
    (xtr, ytr), (xte, yte) = split_arrays(data, labels, classes, total, test_per_class)
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    manifest = _write_split(xtr, ytr, classes, out_dir, "seq", "manifest.json")
    if test_per_class:
        _write_split(xte, yte, classes, out_dir, "test", "test_manifest.json")
    save_graph(graph, out_dir / "graph.json")
    return manifest


def _write_split(data, labels, classes, out_dir, prefix, manifest_name):
    entries = []
    for i, (x, y) in enumerate(zip(data, labels)):
        name = f"{prefix}_{i:05d}.skl"
        save_sequence(x, out_dir / name)
        entries.append({"path": name, "label": int(y)})
    manifest = DatasetManifest(entries, classes, out_dir)
    save_manifest(manifest, out_dir / manifest_name)
    return manifest
