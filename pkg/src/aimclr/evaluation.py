"""Downstream protocols on a pretrained (or freshly initialised) encoder.

Every protocol accepts the encoder either as a checkpoint directory or as an
in-memory :class:`~aimclr.training.TrainState`, and data either as a
manifest (path or object) or as an ``(array, labels)`` pair whose stream
transform has already been applied.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .encoder import encode
from .skeleton import DatasetManifest, batch_stream, load_manifest
from .training import TrainState, load_checkpoint, sgd_update

DEFAULT_FUSION_WEIGHTS = {"joint": 0.6, "bone": 0.6, "motion": 0.4}


@dataclass
class EvalReport:
    protocol: str
    accuracy: float
    per_class: dict
    num_train: int
    num_test: int
    streams: list
    weights: list | None = None
    predictions: np.ndarray | None = field(default=None, repr=False)
    labels: np.ndarray | None = field(default=None, repr=False)
    scores: np.ndarray | None = field(default=None, repr=False)
    history: list | None = field(default=None, repr=False)

    def to_json(self, include_scores=True):
        d = {
            "protocol": self.protocol,
            "accuracy": self.accuracy,
            "per_class": {str(k): v for k, v in self.per_class.items()},
            "num_train": self.num_train,
            "num_test": self.num_test,
            "streams": self.streams,
            "weights": self.weights,
        }
        if include_scores and self.scores is not None:
            d["labels"] = self.labels.tolist()
            d["scores"] = self.scores.tolist()
        return d

    @classmethod
    def from_json(cls, obj):
        labels = np.asarray(obj["labels"]) if "labels" in obj else None
        scores = np.asarray(obj["scores"]) if "scores" in obj else None
        preds = scores.argmax(axis=1) if scores is not None else None
        return cls(
            obj["protocol"], obj["accuracy"], {int(k): v for k, v in obj["per_class"].items()},
            obj["num_train"], obj["num_test"], obj["streams"], obj.get("weights"),
            preds, labels, scores,
        )

    def table(self):
        lines = [
            f"protocol   {self.protocol}",
            f"streams    {', '.join(self.streams)}",
            f"train/test {self.num_train}/{self.num_test}",
            f"top-1      {self.accuracy:.4f}",
        ]
        if self.weights is not None:
            lines.append(f"weights    {', '.join(f'{w:g}' for w in self.weights)}")
        for c, acc in sorted(self.per_class.items()):
            lines.append(f"  class {c:<3d} {acc:.4f}")
        return "\n".join(lines)


def make_report(protocol, predictions, labels, num_train, streams, scores=None, weights=None):
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    per_class = {}
    for c in np.unique(labels):
        sel = labels == c
        per_class[int(c)] = float(np.mean(predictions[sel] == c))
    acc = float(np.mean(predictions == labels)) if len(labels) else 0.0
    return EvalReport(protocol, acc, per_class, int(num_train), len(labels), list(streams),
                      weights, predictions, labels, scores)


# ---------------------------------------------------------------- plumbing


def _state(checkpoint):
    return checkpoint if isinstance(checkpoint, TrainState) else load_checkpoint(checkpoint)


def _dataset(source, state):
    if isinstance(source, tuple):
        data, labels = source
        return np.asarray(data, dtype=state.config.dtype), np.asarray(labels)
    manifest = source if isinstance(source, DatasetManifest) else load_manifest(source)
    data, labels = manifest.load_all(np.dtype(state.config.dtype))
    return batch_stream(data, state.config.stream, state.graph), labels


def extract_features(params, data, graph, config, batch_size=64):
    """Pooled encoder features ``h`` for every sample, in input order."""
    out = []
    for i in range(0, len(data), batch_size):
        _, h = encode(params, data[i:i + batch_size], graph, config)
        out.append(h.data)
    return np.concatenate(out) if out else np.zeros((0, config.feature_dim))


def features(checkpoint, source):
    state = _state(checkpoint)
    data, labels = _dataset(source, state)
    return extract_features(state.pair.query, data, state.graph, state.config.encoder), labels


# ---------------------------------------------------------------- KNN


def _unit(x):
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)


def knn_predict(train_feats, train_labels, test_feats, k=1, num_classes=None):
    """Cosine-similarity majority vote; vote ties go to the class of the nearest tied neighbour.

    Returns ``(predictions, vote_fractions [N, K])``.
    """
    train_labels = np.asarray(train_labels)
    num_classes = num_classes or int(train_labels.max()) + 1
    sims = _unit(test_feats) @ _unit(train_feats).T
    k = min(k, len(train_labels))
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    preds = np.empty(len(test_feats), dtype=np.int64)
    votes = np.zeros((len(test_feats), num_classes))
    for i, nbrs in enumerate(order):
        cls = train_labels[nbrs]
        counts = np.bincount(cls, minlength=num_classes)
        votes[i] = counts / k
        top = np.flatnonzero(counts == counts.max())
        # nbrs is sorted nearest first, so the first tied class seen wins
        preds[i] = next(c for c in cls if c in top)
    return preds, votes


def knn_eval(checkpoint, train, test, k_eval=1):
    state = _state(checkpoint)
    ftr, ytr = features(state, train)
    fte, yte = features(state, test)
    num_classes = int(max(ytr.max(), yte.max())) + 1
    preds, votes = knn_predict(ftr, ytr, fte, k_eval, num_classes)
    return make_report("knn", preds, yte, len(ytr), [state.config.stream], votes)


# ---------------------------------------------------------------- linear probe


def _cross_entropy(logits, labels):
    lp = ad.log_softmax(logits, axis=1)
    onehot = np.zeros(lp.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return ad.neg(ad.mean(ad.sum(ad.mul(lp, ad.Tensor(onehot, dtype=lp.dtype)), axis=1)))


def _softmax_np(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def train_linear(feats, labels, num_classes, epochs=300, lr=0.5, momentum=0.0, weight_decay=0.0,
                 batch_size=None, seed=0):
    """Softmax regression by (full-batch by default) SGD. Returns ``(W, b, loss history)``."""
    rng = np.random.default_rng(seed)
    d = feats.shape[1]
    params = {
        "weight": ad.Tensor(rng.normal(0, 0.01, size=(d, num_classes)), requires_grad=True),
        "bias": ad.Tensor(np.zeros(num_classes), requires_grad=True),
    }
    vel = {k: np.zeros_like(v.data) for k, v in params.items()}
    history = []
    n = len(feats)
    bs = batch_size or n
    for epoch in range(epochs):
        order = np.arange(n) if bs >= n else rng.permutation(n)
        total = 0.0
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            logits = ad.add(ad.matmul(ad.Tensor(feats[idx]), params["weight"]), params["bias"])
            loss = _cross_entropy(logits, labels[idx])
            for p in params.values():
                p.grad = None
            ad.backward(loss)
            sgd_update(params, {k: p.grad for k, p in params.items()}, lr, momentum, weight_decay, vel)
            total += float(loss.data) * len(idx)
        history.append(total / n)
    return params["weight"].data, params["bias"].data, history


def linear_eval(checkpoint, train, test, epochs=300, lr=0.5, seed=0):
    """Frozen encoder, affine + softmax classifier on standardised features."""
    state = _state(checkpoint)
    ftr, ytr = features(state, train)
    fte, yte = features(state, test)
    num_classes = int(max(ytr.max(), yte.max())) + 1
    if ytr.min() < 0 or yte.min() < 0:
        raise ValueError("labels must be non-negative class ids")
    mu, sd = ftr.mean(axis=0), ftr.std(axis=0) + 1e-8
    w, b, history = train_linear((ftr - mu) / sd, ytr, num_classes, epochs, lr, seed=seed)
    scores = _softmax_np(((fte - mu) / sd) @ w + b)
    report = make_report("linear", scores.argmax(axis=1), yte, len(ytr), [state.config.stream], scores)
    report.history = history
    return report


# ---------------------------------------------------------------- finetune


def label_subset(labels, fraction, seed=0):
    """Seeded per-class subsample of about ``fraction * N`` indices, at least one per class.

    Each class gets ``floor(fraction * n_c)``; the shortfall to
    ``round(fraction * N)`` goes to the classes with the largest remainders.
    """
    labels = np.asarray(labels)
    if not 0 < fraction <= 1:
        raise ValueError("label fraction must lie in (0, 1]")
    if fraction == 1:
        return np.arange(len(labels))
    classes, counts = np.unique(labels, return_counts=True)
    exact = fraction * counts
    take = np.floor(exact).astype(int)
    short = int(round(fraction * len(labels))) - take.sum()
    if short > 0:
        by_remainder = np.argsort(-(exact - take), kind="stable")[:short]
        take[by_remainder] += 1
    take = np.clip(np.maximum(take, 1), 1, counts)
    rng = np.random.default_rng(seed)
    chosen = []
    for c, n in zip(classes, take):
        idx = np.flatnonzero(labels == c)
        chosen.append(np.sort(rng.choice(idx, size=n, replace=False)))
    return np.sort(np.concatenate(chosen))


def finetune_eval(checkpoint, train, label_fraction, test, epochs=30, lr=0.01, seed=0, batch_size=16):
    """Train encoder and appended linear classifier on a labelled subset."""
    state = _state(checkpoint)
    cfg, graph = state.config.encoder, state.graph
    xtr, ytr = _dataset(train, state)
    xte, yte = _dataset(test, state)
    num_classes = int(max(ytr.max(), yte.max())) + 1
    keep = label_subset(ytr, label_fraction, seed)
    xtr, ytr = xtr[keep], ytr[keep]

    dtype = np.dtype(state.config.dtype).type
    params = {k: ad.Tensor(v.data.copy(), requires_grad=True, dtype=dtype)
              for k, v in state.pair.query.items() if k.startswith("encoder.")}
    rng = np.random.default_rng([seed, 0xF7])
    params["classifier.weight"] = ad.Tensor(
        rng.normal(0, 0.01, size=(cfg.feature_dim, num_classes)), requires_grad=True, dtype=dtype)
    params["classifier.bias"] = ad.Tensor(np.zeros(num_classes), requires_grad=True, dtype=dtype)
    vel = {k: np.zeros_like(v.data) for k, v in params.items()}
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(xtr))
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            _, h = encode(params, xtr[idx], graph, cfg)
            logits = ad.add(ad.matmul(h, params["classifier.weight"]), params["classifier.bias"])
            loss = _cross_entropy(logits, ytr[idx])
            for p in params.values():
                p.grad = None
            ad.backward(loss)
            sgd_update(params, {k: p.grad for k, p in params.items()}, lr, 0.9, 1e-4, vel)
            total += float(loss.data) * len(idx)
        history.append(total / len(xtr))

    h = extract_features(params, xte, graph, cfg)
    scores = _softmax_np(h @ params["classifier.weight"].data + params["classifier.bias"].data)
    protocol = "finetune" if label_fraction == 1 else f"semi-supervised@{label_fraction:g}"
    report = make_report(protocol, scores.argmax(axis=1), yte, len(ytr), [state.config.stream], scores)
    report.history = history
    return report


# ---------------------------------------------------------------- fusion and export


def fuse_streams(reports, weights=None):
    """Weighted sum of per-stream class scores, then argmax.

    ``weights`` defaults to the joint/bone/motion convention looked up by
    each report's stream name.
    """
    if not reports:
        raise ValueError("need at least one report")
    if weights is None:
        weights = [DEFAULT_FUSION_WEIGHTS.get(r.streams[0], 1.0) for r in reports]
    if len(weights) != len(reports):
        raise ValueError(f"{len(weights)} weights for {len(reports)} streams")
    labels = reports[0].labels
    for r in reports:
        if r.scores is None:
            raise ValueError(f"report for {r.streams} carries no per-sample scores")
        if r.scores.shape != reports[0].scores.shape or not np.array_equal(r.labels, labels):
            raise ValueError("reports cover different test sets")
    fused = sum(w * r.scores for w, r in zip(weights, reports))
    streams = [s for r in reports for s in r.streams]
    return make_report("fusion", fused.argmax(axis=1), labels, reports[0].num_train, streams,
                       fused, [float(w) for w in weights])


def export_embeddings(checkpoint, manifest, out_path):
    """Line-delimited ``{id, label, h}`` records in manifest order."""
    state = _state(checkpoint)
    manifest = manifest if isinstance(manifest, DatasetManifest) else load_manifest(manifest)
    feats, labels = features(state, manifest)
    with open(out_path, "w") as fh:
        for entry, y, h in zip(manifest.entries, labels, feats):
            fh.write(json.dumps({"id": Path(entry["path"]).stem, "label": int(y), "h": h.tolist()}) + "\n")
    return Path(out_path)


def save_report(report, path):
    Path(path).write_text(json.dumps(report.to_json(), indent=1))


def load_report(path):
    return EvalReport.from_json(json.loads(Path(path).read_text()))


def chance_floor(num_classes, n, sigmas=3.0):
    """Chance accuracy minus ``sigmas`` binomial standard deviations."""
    p = 1.0 / num_classes
    return p - sigmas * math.sqrt(p * (1 - p) / n)
