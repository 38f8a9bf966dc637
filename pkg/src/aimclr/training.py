"""Two-stage contrastive pretraining.

One step: two normal views and one extreme view per sample, the momentum
key encoder for the positive, query encoder for the rest, the attention
drop branch on the extreme feature map, then
``alpha * (InfoNCE | NNM) + beta * D3M``, SGD on the query parameters,
the momentum update, and finally the new keys enter the bank.
"""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import contrastive as cc
from . import eadm as drop_module
from .augment import augment, extreme_pipeline, normal_pipeline
from .encoder import (
    EncoderConfig,
    EncoderPair,
    arrays_to_params,
    encode,
    init_params,
    load_arrays,
    momentum_update,
    params_to_arrays,
    pool,
    project,
    save_arrays,
)
from .skeleton import SkeletonGraph, batch_stream

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 30
    stage_switch_epoch: int = 15
    batch_size: int = 16
    lr: float = 0.01
    lr_drop_epoch: int = 25
    lr_drop_factor: float = 0.1
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 0.5
    bank_size: int = 128
    k: int = 1
    keep_margin: float = drop_module.DEFAULT_KEEP_MARGIN
    lam: float = drop_module.DEFAULT_LAMBDA
    momentum: float = 0.99
    seed: int = 0
    stream: str = "joint"
    use_eadm: bool = True
    use_nnm: bool = True
    dtype: str = "float64"
    checkpoint_every: int = 1
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if not 0 < self.stage_switch_epoch <= self.epochs:
            raise ValueError("need 0 < stage_switch_epoch <= epochs")
        if self.alpha <= 0 or self.beta < 0:
            raise ValueError("alpha must be > 0 and beta >= 0")
        if self.stream not in ("joint", "bone", "motion"):
            raise ValueError(f"unknown stream {self.stream!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def extreme_branch(self):
        return self.beta > 0 or self.use_nnm

    def to_dict(self):
        d = asdict(self)
        d["encoder"] = self.encoder.to_dict()
        return d

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj)


def load_config(path, **overrides):
    obj = json.loads(Path(path).read_text())
    obj.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(obj)


def baseline_config(**kw):
    """InfoNCE-only reference: no extreme branch, no drop, no neighbour mining."""
    return TrainConfig(beta=0.0, use_eadm=False, use_nnm=False, **kw)


@dataclass
class TrainState:
    config: TrainConfig
    graph: SkeletonGraph
    pair: EncoderPair
    bank: cc.MemoryBank
    velocity: dict
    epoch: int = 0
    step: int = 0
    history: list = field(default_factory=list)


def init_state(config, graph):
    dtype = np.dtype(config.dtype).type
    rng = np.random.default_rng([config.seed, 0xA1])
    params = init_params(config.encoder, rng, dtype)
    pair = EncoderPair(params, momentum=config.momentum)
    bank = cc.MemoryBank.random(config.bank_size, config.encoder.proj_dim, rng, dtype=dtype)
    velocity = {k: np.zeros_like(v.data) for k, v in params.items()}
    return TrainState(config, graph, pair, bank, velocity)


def sgd_update(params, grads, lr, momentum, weight_decay, velocity):
    """Coupled weight decay: v <- mu v + g + wd p; p <- p - lr v."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        v = momentum * velocity[name] + g + weight_decay * p.data
        velocity[name] = v
        p.data = p.data - lr * v


def learning_rate(config, epoch):
    return config.lr * (config.lr_drop_factor if epoch >= config.lr_drop_epoch else 1.0)


def stage_of(config, epoch):
    return 2 if epoch >= config.stage_switch_epoch else 1


def worker_count():
    """Augmentation workers, capped by ``AIMCLR_THREADS`` (default 1)."""
    raw = os.environ.get("AIMCLR_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"AIMCLR_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"AIMCLR_THREADS must be a positive integer, got {raw!r}")
    return n


def augment_batch(batch, config, graph, global_step):
    """Per-sample RNG split from (seed, step, index): worker count cannot change results."""
    normal, extreme = normal_pipeline(), extreme_pipeline()

    def views(i):
        rng = np.random.default_rng([config.seed, global_step, i])
        s = batch[i]
        x = augment(s, normal, rng, graph)
        xhat = augment(s, normal, rng, graph)
        xtil = augment(s, extreme, rng, graph) if config.extreme_branch else None
        return x, xhat, xtil

    workers = min(worker_count(), len(batch))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool_:
            out = list(pool_.map(views, range(len(batch))))
    else:
        out = [views(i) for i in range(len(batch))]
    xs, xhats, xtils = zip(*out)
    xtil = np.stack(xtils) if config.extreme_branch else None
    return np.stack(xs), np.stack(xhats), xtil


def pretrain_step(state, batch, epoch=None):
    """One optimisation step on ``batch [B, C, T, V, P]``; returns metrics."""
    cfg, graph, pair = state.config, state.graph, state.pair
    epoch = state.epoch if epoch is None else epoch
    lr = learning_rate(cfg, epoch)
    stage = stage_of(cfg, epoch)
    # augment at working precision so the input dtype cannot change the run
    batch = np.asarray(batch, dtype=cfg.dtype)
    x, xhat, xtil = augment_batch(batch, cfg, graph, state.step)
    bsz = len(batch)

    _, h_k = encode(pair.key, x, graph, cfg.encoder)
    z = project(pair.key, h_k).data
    bank = state.bank.contents()

    q_in = xhat if xtil is None else np.concatenate([xhat, xtil])
    fmap, h_q = encode(pair.query, q_in, graph, cfg.encoder)
    if xtil is None:
        z_hat = project(pair.query, h_q)
    else:
        zq = project(pair.query, h_q)
        z_hat = ad.take(zq, slice(0, bsz))
        z_til = ad.take(zq, slice(bsz, None))
        fmap_til = ad.take(fmap, slice(bsz, None))
        if cfg.use_eadm:
            fmap_drop, _ = drop_module.eadm(fmap_til, cfg.lam, cfg.keep_margin)
        else:
            fmap_drop = fmap_til
        z_drop = project(pair.query, pool(fmap_drop))

    metrics = {"epoch": epoch, "step": state.step, "stage": stage}
    if stage == 2 and cfg.use_nnm:
        sets = [cc.mine_neighbors(z_hat.data, bank, cfg.k)]
        if xtil is not None:
            sets += [cc.mine_neighbors(z_til.data, bank, cfg.k), cc.mine_neighbors(z_drop.data, bank, cfg.k)]
        main = cc.nnm_loss(z_hat, z, bank, cfg.tau, cc.union_neighbors(*sets))
        metrics["L_N"] = float(main.data)
    else:
        main = cc.info_nce(z_hat, z, bank, cfg.tau)
        metrics["L_Info"] = float(main.data)
    loss = ad.mul(main, cfg.alpha)

    if xtil is not None and cfg.beta > 0:
        p_hat = np.exp(cc.log_distribution(z_hat.data, z, bank, cfg.tau).data)
        l_d, l_d1, l_d2 = cc.d3m_loss(
            p_hat,
            cc.LogProb(cc.log_distribution(z_til, z, bank, cfg.tau)),
            cc.LogProb(cc.log_distribution(z_drop, z, bank, cfg.tau)),
            return_parts=True,
        )
        loss = ad.add(loss, ad.mul(l_d, cfg.beta))
        metrics["L_d1"] = float(l_d1.data)
        metrics["L_d2"] = float(l_d2.data)
    metrics["loss"] = float(loss.data)
    metrics["lr"] = lr

    if not math.isfinite(metrics["loss"]):
        raise TrainingDivergedError(f"non-finite loss at step {state.step}: {metrics}")

    for p in pair.query.values():
        p.grad = None
    ad.backward(loss)
    grads = {k: p.grad for k, p in pair.query.items()}
    sgd_update(pair.query, grads, lr, cfg.sgd_momentum, cfg.weight_decay, state.velocity)
    momentum_update(pair)
    state.bank.enqueue(z)
    state.step += 1
    state.history.append(metrics)
    return metrics


def epoch_order(config, epoch, n):
    return np.random.default_rng([config.seed, 0xE0, epoch]).permutation(n)


def run_epoch(state, data):
    cfg = state.config
    order = epoch_order(cfg, state.epoch, len(data))
    out = []
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        out.append(pretrain_step(state, data[idx]))
    state.epoch += 1
    return out


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(state, directory):
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    arrays = {}
    arrays.update(params_to_arrays(state.pair.query, "query"))
    arrays.update(params_to_arrays(state.pair.key, "key"))
    arrays.update({f"velocity.{k}": v for k, v in state.velocity.items()})
    arrays["bank.contents"] = state.bank.contents()
    save_arrays(directory / "model.ckpt", arrays)
    meta = {
        "epoch": state.epoch,
        "step": state.step,
        "config": state.config.to_dict(),
        "graph": state.graph.to_json(),
    }
    (directory / "state.json").write_text(json.dumps(meta, indent=1))
    return directory


def load_checkpoint(directory):
    """Restore a :class:`TrainState`; shapes are checked against the stored config."""
    directory = Path(directory)
    meta = json.loads((directory / "state.json").read_text())
    config = TrainConfig.from_dict(meta["config"])
    graph = SkeletonGraph.from_json(meta["graph"])
    fresh = init_state(config, graph)
    expected = {}
    for prefix in ("query", "key", "velocity"):
        expected.update({f"{prefix}.{k}": v.shape for k, v in fresh.pair.query.items()})
    expected["bank.contents"] = (config.bank_size, config.encoder.proj_dim)
    arrays = load_arrays(directory / "model.ckpt", expected)
    dtype = np.dtype(config.dtype).type
    query = arrays_to_params(arrays, "query", requires_grad=True, dtype=dtype)
    key = arrays_to_params(arrays, "key", dtype=dtype)
    pair = EncoderPair(query, key, config.momentum)
    velocity = {k[len("velocity."):]: v.astype(dtype) for k, v in arrays.items() if k.startswith("velocity.")}
    bank = cc.MemoryBank(config.bank_size, config.encoder.proj_dim, dtype=dtype)
    bank.load(arrays["bank.contents"].astype(dtype))
    return TrainState(config, graph, pair, bank, velocity, meta["epoch"], meta["step"])


def _prepare_data(manifest, config, graph):
    data, _ = manifest.load_all(np.dtype(config.dtype))
    if data.shape[3] != graph.num_joints:
        raise ValueError(f"data has {data.shape[3]} joints, graph has {graph.num_joints}")
    return batch_stream(data, config.stream, graph)


def run_pretraining(config, manifest, graph, out_dir, resume_from=None, data=None):
    """Train for ``config.epochs`` epochs, checkpointing into ``out_dir/ep{N}``.

    ``data`` may be a preloaded ``[N, C, T, V, P]`` array (stream already
    applied) to skip reading the manifest. Returns ``(last checkpoint dir,
    metrics list)``; metrics are also appended to ``out_dir/metrics.jsonl``.
    """
    out_dir = Path(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    if data is None:
        data = _prepare_data(manifest, config, graph)
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        state.config = config
    else:
        state = init_state(config, graph)
    metrics_path = out_dir / "metrics.jsonl"
    if resume_from is None and metrics_path.exists():
        metrics_path.unlink()
    prev = ad.get_default_dtype()
    ad.set_default_dtype(config.dtype)
    last = None
    try:
        while state.epoch < config.epochs:
            records = run_epoch(state, data)
            with open(metrics_path, "a") as fh:
                for r in records:
                    fh.write(json.dumps(_log_record(r)) + "\n")
            mean_loss = float(np.mean([r["loss"] for r in records]))
            log.info("epoch %d stage %d loss %.4f", state.epoch, records[-1]["stage"], mean_loss)
            if state.epoch % config.checkpoint_every == 0 or state.epoch == config.epochs:
                last = save_checkpoint(state, out_dir / f"ep{state.epoch}")
    finally:
        ad.set_default_dtype(prev)
    return last, state.history


def _log_record(r):
    keep = ("epoch", "step", "L_Info", "L_N", "L_d1", "L_d2", "lr", "loss")
    return {k: r[k] for k in keep if k in r}
