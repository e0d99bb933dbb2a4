"""Mini-batch SGD with the ``inv`` schedule, checkpoint selection, evaluation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadConfig, DivergedLoss, EmptyDataset, NoInput, ShapeMismatch
from .network import Network, cosine_similarity_diag, save_checkpoint
from .noise import NoiseConfig, derive_seed, gen_correlated_noise, rng_stream, synthetic_covers
from .tensor import apply_noise, load_ppm

DECAY_MODES = ("exempt", "global")
_EXEMPT_SUFFIXES = (".gamma", ".beta", ".bias")


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.001
    power: float = 0.75
    gamma: float = 0.0001
    weight_decay: float = 0.0005
    momentum: float = 0.9
    batch_size: int = 16
    max_iters: int = 5000
    checkpoint_every: int = 10000
    seed: int = 0
    decay_mode: str = "exempt"
    pair_batching: bool = True
    diag_images: int = 8

    def validate(self) -> "TrainConfig":
        for key in ("base_lr", "power", "gamma"):
            if not getattr(self, key) > 0:
                raise BadConfig(f"{key} must be positive")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise BadConfig("weight_decay must be >= 0 and momentum in [0, 1)")
        if self.batch_size < 2:
            raise BadConfig("batch_size must be at least 2 for batch normalization")
        if self.pair_batching and self.batch_size % 2:
            raise BadConfig("pair batching needs an even batch_size")
        if self.max_iters < 0 or self.checkpoint_every < 1:
            raise BadConfig("max_iters must be >= 0 and checkpoint_every >= 1")
        if self.decay_mode not in DECAY_MODES:
            raise BadConfig(f"decay_mode must be one of {DECAY_MODES}")
        return self


def lr_at(cfg: TrainConfig, iteration: int) -> float:
    """``base_lr * (1 + gamma*iter) ** -power``."""
    if iteration < 0:
        raise ValueError("iteration must be nonnegative")
    return cfg.base_lr * (1.0 + cfg.gamma * iteration) ** (-cfg.power)


def decays(name: str, cfg: TrainConfig) -> bool:
    return cfg.decay_mode == "global" or not name.endswith(_EXEMPT_SUFFIXES)


def sgd_step(params: dict, grads: dict, velocity: dict, cfg: TrainConfig, iteration: int,
             lr: float | None = None) -> None:
    """In place: ``v = momentum*v - lr*(g + wd*p)``; ``p += v`` for every name in ``grads``."""
    lr = lr_at(cfg, iteration) if lr is None else lr
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(p)
        step = g + cfg.weight_decay * p if decays(name, cfg) else g
        v *= cfg.momentum
        v -= lr * step
        p += v


# ---------------------------------------------------------------- datasets

@dataclass
class PairSet:
    """Matched cover/stego images; labels are 0 (cover) and 1 (stego)."""

    covers: list
    stegos: list
    names: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.covers) != len(self.stegos):
            raise ShapeMismatch("covers and stegos differ in count")
        for c, s in zip(self.covers, self.stegos):
            if c.shape != s.shape:
                raise ShapeMismatch(f"pair shapes differ: {c.shape} vs {s.shape}")
        if not self.names:
            self.names = [f"{i:05d}" for i in range(len(self.covers))]

    def __len__(self) -> int:
        return len(self.covers)

    def subset(self, idx) -> "PairSet":
        idx = list(idx)
        return PairSet([self.covers[i] for i in idx], [self.stegos[i] for i in idx], [self.names[i] for i in idx])

    def images_labels(self) -> tuple[np.ndarray, np.ndarray]:
        imgs = [im.bands for im in self.covers] + [im.bands for im in self.stegos]
        labels = np.r_[np.zeros(len(self), np.int64), np.ones(len(self), np.int64)]
        return np.stack(imgs), labels


def load_pairs(root) -> PairSet:
    """Read ``root/cover/*.ppm`` and ``root/stego/*.ppm`` matched by file name."""
    root = Path(root)
    cdir, sdir = root / "cover", root / "stego"
    if not cdir.is_dir() or not sdir.is_dir():
        raise NoInput(f"{root} lacks cover/ and stego/ directories")
    names = sorted(p.name for p in cdir.glob("*.ppm") if (sdir / p.name).is_file())
    if not names:
        raise EmptyDataset(f"no matched cover/stego pairs under {root}")
    return PairSet([load_ppm(cdir / n) for n in names], [load_ppm(sdir / n) for n in names], names)


def split_pairs(pairs: PairSet, val_fraction: float, seed: int) -> tuple[PairSet, PairSet]:
    """Shuffle pair indices and split; a cover and its stego always land together."""
    order = rng_stream(seed, 11).permutation(len(pairs))
    nval = int(round(val_fraction * len(pairs)))
    return pairs.subset(sorted(order[nval:])), pairs.subset(sorted(order[:nval]))


def synthetic_pairs(count: int, size: int, seed: int, rate: float = 0.4, rho: float = 0.0,
                    **cover_kw) -> PairSet:
    """Synthetic covers with ``+-1`` stego noise at ``rate`` (per-image derived seeds)."""
    covers = synthetic_covers(count, size, size, seed, **cover_kw)
    stegos = []
    for i, c in enumerate(covers):
        f = gen_correlated_noise(size, size, NoiseConfig(rate, rho, derive_seed(seed, 2000 + i)))
        stegos.append(apply_noise(c, f))
    return PairSet(covers, stegos)


# ------------------------------------------------------------------ run log

LOG_COLUMNS = ("iteration", "lr", "loss", "batch_loss", "val_accuracy", "cw_bar", "s_cover", "s_stego")


@dataclass
class RunLog:
    rows: list = field(default_factory=list)

    def append(self, row: dict) -> None:
        if self.rows and row["iteration"] <= self.rows[-1]["iteration"]:
            raise ValueError("iterations must increase")
        self.rows.append(row)

    def column(self, key: str) -> list:
        return [r[key] for r in self.rows]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow(["" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in LOG_COLUMNS])
        return buf.getvalue()

    def to_jsonl(self) -> str:
        return "".join(json.dumps({k: r[k] for k in LOG_COLUMNS}) + "\n" for r in self.rows)


@dataclass
class TrainResult:
    log: RunLog
    best_iteration: int
    best_accuracy: float
    best_state: dict


# ----------------------------------------------------------------- training

def _batches(n_pairs: int, cfg: TrainConfig):
    """Endless stream of ``(pair_index, is_stego)`` lists, one list per batch."""
    rng = rng_stream(cfg.seed, 21)
    if cfg.pair_batching:
        pool: list = []
        while True:
            while len(pool) < cfg.batch_size // 2:
                pool.extend(rng.permutation(n_pairs).tolist())
            take, pool = pool[:cfg.batch_size // 2], pool[cfg.batch_size // 2:]
            yield [(i, 0) for i in take] + [(i, 1) for i in take]
    else:
        pool = []
        while True:
            while len(pool) < cfg.batch_size:
                pool.extend(rng.permutation(2 * n_pairs).tolist())
            take, pool = pool[:cfg.batch_size], pool[cfg.batch_size:]
            yield [(i % n_pairs, i // n_pairs) for i in take]


def _assemble(pairs: PairSet, picks) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([(pairs.stegos if s else pairs.covers)[i].bands for i, s in picks])
    return x, np.array([s for _, s in picks], np.int64)


def dataset_loss(net: Network, pairs: PairSet, batch_size: int = 16) -> float:
    """Mean cross-entropy over ``pairs`` in fixed pair-aware batches.

    Train-mode normalization (batch statistics) is used, as during the
    updates, but running statistics are left untouched.
    """
    half = max(1, batch_size // 2)
    total, count = 0.0, 0
    net.update_bn_stats = False
    try:
        for s in range(0, len(pairs), half):
            idx = range(s, min(s + half, len(pairs)))
            x, y = _assemble(pairs, [(i, 0) for i in idx] + [(i, 1) for i in idx])
            p = net.forward(x, "train")
            total += float(-np.log(np.maximum(p[np.arange(len(y)), y], 1e-300)).sum())
            count += len(y)
    finally:
        net.update_bn_stats = True
    return total / count


def evaluate(net: Network, data, batch_size: int = 32) -> float:
    """Fraction of correct argmax predictions in infer mode; ties go to cover."""
    if isinstance(data, PairSet):
        x, y = data.images_labels()
    else:
        x, y = data
        x, y = np.asarray(x), np.asarray(y)
    if len(y) == 0:
        raise EmptyDataset("nothing to evaluate")
    correct = 0
    for s in range(0, len(y), batch_size):
        p = net.forward(x[s:s + batch_size], "infer")
        pred = (p[:, 1] > p[:, 0]).astype(np.int64)
        correct += int((pred == y[s:s + batch_size]).sum())
    return correct / len(y)


def _diagnostics(net: Network, val: PairSet, count: int):
    if net.cfg.bottom_mode != "channelwise":
        return None, None, None
    sub = val.subset(range(min(count, len(val))))
    rep = cosine_similarity_diag(net, sub.covers, sub.stegos)
    return rep.cw_bar, rep.s_cover, rep.s_stego


def train(net: Network, cfg: TrainConfig, train_set: PairSet, val_set: PairSet, *,
          out_dir=None, on_checkpoint=None) -> TrainResult:
    """Run ``cfg.max_iters`` SGD updates, logging and selecting checkpoints.

    A row is logged at iteration 0 and after every ``checkpoint_every``
    updates.  The returned state is the one with the highest validation
    accuracy (earliest on ties).  ``on_checkpoint(row)`` may return True to
    stop at that checkpoint.  With ``out_dir`` each checkpoint is written as
    ``ckpt_<iteration>.wlck`` and the run log as ``runlog.csv``/``.jsonl``.
    """
    cfg.validate()
    if len(train_set) == 0 or len(val_set) == 0:
        raise EmptyDataset("training and validation sets must be nonempty")
    shape = (net.cfg.input_h, net.cfg.input_w)
    if train_set.covers[0].shape != shape:
        raise ShapeMismatch(f"images {train_set.covers[0].shape} vs network input {shape}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    log = RunLog()
    velocity: dict = {}
    best = (-1.0, 0, {})
    stream = _batches(len(train_set), cfg)
    window: list = []

    def checkpoint(it: int) -> bool:
        nonlocal best, window
        loss = dataset_loss(net, train_set, cfg.batch_size)
        acc = evaluate(net, val_set)
        cw, sc, ss = _diagnostics(net, val_set, cfg.diag_images)
        row = {"iteration": it, "lr": lr_at(cfg, it), "loss": loss,
               "batch_loss": float(np.mean(window)) if window else loss,
               "val_accuracy": acc, "cw_bar": cw, "s_cover": sc, "s_stego": ss}
        window = []
        log.append(row)
        if acc > best[0]:
            best = (acc, it, net.snapshot())
        if out is not None:
            save_checkpoint(net, out / f"ckpt_{it:08d}.wlck", it)
            (out / "runlog.csv").write_text(log.to_csv())
            (out / "runlog.jsonl").write_text(log.to_jsonl())
        return bool(on_checkpoint and on_checkpoint(row))

    stop = checkpoint(0)
    it = 0
    while not stop and it < cfg.max_iters:
        x, y = _assemble(train_set, next(stream))
        loss, grads = net.backward(x, y)
        if not math.isfinite(loss):
            if out is not None:
                save_checkpoint(net, out / "diverged.wlck", it)
            err = DivergedLoss(f"non-finite loss at iteration {it}")
            err.state = net.snapshot()
            err.iteration = it
            raise err
        sgd_step(net.params, grads, velocity, cfg, it)
        window.append(loss)
        it += 1
        if it % cfg.checkpoint_every == 0:
            stop = checkpoint(it)
    if out is not None:
        best_net_state = best[2]
        current = net.snapshot()
        net.restore(best_net_state)
        save_checkpoint(net, out / "best.wlck", best[1], {"val_accuracy": best[0]})
        net.restore(current)
    return TrainResult(log, best[1], best[0], best[2])
