"""Pair sampling and SGD with momentum under all supervision heads."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError, DivergenceError, ShapeError
from .nets import NetworkGraph
from .supervision import head_features, head_loss
from .tensor import Rng, as_tensor

log = logging.getLogger(__name__)


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N, C, H, W]
    identities: np.ndarray  # [N] ints
    region_id: int = 0

    def __post_init__(self):
        self.images = as_tensor(self.images)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        if len(self.images) != len(self.identities):
            raise ShapeError(f"{len(self.images)} images but {len(self.identities)} labels")

    def __len__(self):
        return len(self.identities)

    @property
    def num_identities(self):
        return int(self.identities.max()) + 1 if len(self) else 0


@dataclass
class TrainConfig:
    lr: float = 0.01
    lr_decay: float = 0.95
    momentum: float = 0.9
    batch_pairs: int = 32
    batches_per_epoch: int = 8
    epochs: int = 10
    genuine_fraction: float = 0.5
    weight_decay: float = 0.0
    margin: float | None = None  # None: median impostor distance at init
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if not 0.0 < self.genuine_fraction < 1.0:
            raise ValueError("genuine_fraction must be in (0, 1)")
        if self.batch_pairs < 1 or self.batches_per_epoch < 1 or self.epochs < 1:
            raise ValueError("batch_pairs, batches_per_epoch and epochs must be positive")


def sample_pair_batch(ds: LabeledDataset, cfg: TrainConfig, rng: Rng):
    """A batch of ``(index_a, index_b, same)`` pairs.

    The genuine count is ``floor(b*f)`` plus one with probability equal to
    the fractional part, so every batch is within one pair of the target and
    the long-run fraction is exact.
    """
    ids = ds.identities
    uniq, counts = np.unique(ids, return_counts=True)
    if len(uniq) < 2:
        raise DatasetError("need at least 2 identities to sample impostor pairs")
    multi = set(uniq[counts >= 2].tolist())
    if not multi:
        raise DatasetError("no identity has 2 or more images; cannot sample genuine pairs")
    eligible = np.flatnonzero(np.isin(ids, list(multi)))
    by_id = {int(u): np.flatnonzero(ids == u) for u in uniq}

    target = cfg.batch_pairs * cfg.genuine_fraction
    n_gen = int(np.floor(target))
    if rng.random() < target - n_gen:
        n_gen += 1
    pairs = []
    for _ in range(n_gen):
        a = int(eligible[rng.integers(len(eligible))])
        mates = by_id[int(ids[a])]
        b = int(mates[mates != a][rng.integers(len(mates) - 1)])
        pairs.append((a, b, True))
    for _ in range(cfg.batch_pairs - n_gen):
        a = int(rng.integers(len(ids)))
        others = np.flatnonzero(ids != ids[a])
        b = int(others[rng.integers(len(others))])
        pairs.append((a, b, False))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def sgd_step(params, grads, velocity, lr: float, momentum: float):
    """``v <- momentum*v - lr*g``; ``p <- p + v``. Updates the dicts in place."""
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, parameter {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        elif v.shape != p.shape:
            raise ShapeError(f"velocity for '{name}' has shape {v.shape}, parameter {p.shape}")
        v = momentum * v - lr * g
        velocity[name] = v
        params[name] = p + v
    return params, velocity


def pair_loss(net: NetworkGraph, x1, x2, id1: int, id2: int, rng: Rng | None = None,
              mode: str = "train", heads=None):
    """Total loss of one training pair over ``heads`` (all heads by default)
    and its parameter gradients."""
    heads = net.heads if heads is None else heads
    r1 = rng.spawn(1) if rng is not None else None
    r2 = rng.spawn(2) if rng is not None else None
    acts1, caches1 = net.forward(x1, mode, r1)
    acts2, caches2 = net.forward(x2, mode, r2)
    total = 0.0
    grads = {}
    ag1, ag2 = {}, {}
    for head in heads:
        a = head.attach_point
        loss, hg, g1, g2 = head_loss(head, net.params, acts1[a], acts2[a], id1, id2)
        total += loss
        grads.update(hg)
        ag1[a] = ag1[a] + g1 if a in ag1 else g1
        ag2[a] = ag2[a] + g2 if a in ag2 else g2
    if ag1:
        for grads_img in (net.backward(caches1, ag1)[0], net.backward(caches2, ag2)[0]):
            for k, v in grads_img.items():
                grads[k] = grads[k] + v if k in grads else v
    return total, grads


def init_margins(net: NetworkGraph, ds: LabeledDataset, pairs, max_pairs: int = 64):
    """Set every head's margin to the median impostor feature distance."""
    impostors = [(a, b) for a, b, same in pairs if not same][:max_pairs]
    if not impostors:
        return {h.name: h.margin for h in net.heads}
    dists = {h.name: [] for h in net.heads}
    for a, b in impostors:
        acts_a, _ = net.forward(ds.images[a])
        acts_b, _ = net.forward(ds.images[b])
        for h in net.heads:
            fa = head_features(h, net.params, acts_a[h.attach_point])
            fb = head_features(h, net.params, acts_b[h.attach_point])
            dists[h.name].append(np.linalg.norm(fa - fb))
    margins = {}
    for h in net.heads:
        m = float(np.median(dists[h.name]))
        margins[h.name] = m if m > 0 else 1.0
    net.set_margins(margins)
    return margins


def train(net: NetworkGraph, ds: LabeledDataset, cfg: TrainConfig, on_epoch=None):
    """Train ``net`` in place; returns ``(net, history)``.

    The pair schedule is drawn once: every epoch visits the same batches in
    the same order with the same dropout masks, so an epoch's mean loss is a
    deterministic function of the parameters.
    """
    if ds.num_identities > net.cfg.num_identities:
        raise ShapeError(f"dataset has {ds.num_identities} identities, network classifies "
                         f"{net.cfg.num_identities}")
    root = Rng(cfg.seed, 0x7A11)
    pair_rng = root.spawn(0)
    batches = [sample_pair_batch(ds, cfg, pair_rng) for _ in range(cfg.batches_per_epoch)]
    if cfg.margin is None:
        init_margins(net, ds, [p for b in batches for p in b])
    else:
        net.set_margins({h.name: cfg.margin for h in net.heads})

    velocity = {}
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * cfg.lr_decay ** epoch
        total, count = 0.0, 0
        for bi, batch in enumerate(batches):
            acc = {}
            for pi, (a, b, _same) in enumerate(batch):
                prng = root.spawn(1 + bi * cfg.batch_pairs + pi)
                loss, grads = pair_loss(net, ds.images[a], ds.images[b],
                                        int(ds.identities[a]), int(ds.identities[b]), prng)
                total += loss
                count += 1
                for k, v in grads.items():
                    if k in acc:
                        acc[k] += v
                    else:
                        acc[k] = v.copy()
            scale = 1.0 / len(batch)
            for k in acc:
                acc[k] *= scale
                if cfg.weight_decay and k.endswith(".w"):
                    acc[k] += cfg.weight_decay * net.params[k]
            if lr > 0.0:
                sgd_step(net.params, acc, velocity, lr, cfg.momentum)
        mean = total / count
        if not np.isfinite(mean):
            raise DivergenceError(f"non-finite loss at epoch {epoch} (lr={lr:g})")
        history.append(mean)
        log.debug("%s epoch %d loss %.6f", net.arch, epoch, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)
    return net, history


def format_training_log(history) -> str:
    """One ``epoch<TAB>mean_loss`` line per epoch."""
    return "".join(f"{i}\t{loss!r}\n" for i, loss in enumerate(history))
