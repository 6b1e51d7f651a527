"""Multi-resolution Chamfer loss, Adam, and the training loop.

The loss compares each predicted cloud against an FPS sub-cloud of the
ground truth at matching density. Training is fully deterministic for a
fixed (seed, config, data): shuffles derive from the seed and epoch
index, gradients accumulate in tape order, and Adam walks parameters in
their fixed insertion order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from . import model as model_mod
from .errors import NonFiniteLossError
from .geometry import chamfer, fps
from .tensor import Tape, Tensor, add, row_slice, scale

METRICS_COLUMNS = ("epoch", "lr", "train_loss", "val_cd_l1", "val_cd_l2", "wall_seconds")


@dataclass
class TrainConfig:
    epochs: int = 400
    batch_size: int = 32
    lr: float = 1e-4
    lr_decay: float = 0.7
    lr_decay_every: int = 40
    lambdas: tuple = (1.0, 1.0, 1.0)
    variant: str = "l2"
    seed: int = 0
    checkpoint_every: int = 10
    val_fraction: float = 0.0
    eval_every: int = 1   # epochs between val-metric refreshes (rows carry the last value)

    def validate(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must be in (0, 1]")
        if any(l < 0 for l in self.lambdas):
            raise ValueError("loss weights must be non-negative")
        if self.variant not in ("l1", "l2"):
            raise ValueError(f"unknown Chamfer variant {self.variant!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.lr_decay_every < 1:
            raise ValueError("epochs, batch_size and lr_decay_every must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Stepwise-decayed learning rate for the given epoch."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_decay_every)


def ground_truth_subsets(gt: np.ndarray, sizes) -> list:
    """FPS sub-clouds of gt at the requested sizes (gt itself if equal)."""
    gt = np.asarray(gt)
    subs = []
    for size in sizes:
        if gt.shape[0] < size:
            raise ValueError(
                f"ground truth has {gt.shape[0]} points, prediction needs {size}")
        if gt.shape[0] == size:
            subs.append(gt)
        else:
            subs.append(gt[fps(gt, size).indices])
    return subs


def multi_scale_loss(preds, gt: np.ndarray, variant: str = "l2",
                     lambdas=(1.0, 1.0, 1.0), subsets=None) -> Tensor:
    """Weighted sum of Chamfer distances at the three prediction scales."""
    clouds = list(preds)
    if subsets is None:
        subsets = ground_truth_subsets(gt, [c.data.shape[0] for c in clouds])
    dtype = clouds[0].data.dtype
    total = None
    for lam, pred, sub in zip(lambdas, clouds, subsets):
        if lam == 0:
            continue
        term = chamfer(pred, Tensor(np.asarray(sub, dtype=dtype)), variant)
        if lam != 1.0:
            term = scale(term, lam)
        total = term if total is None else add(total, term)
    if total is None:
        total = Tensor(np.zeros((), dtype=dtype))
    return total


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment estimates per parameter, plus the step count."""

    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})

    def save(self, path, epoch: int) -> None:
        arrays = {f"m::{k}": v for k, v in self.m.items()}
        arrays.update({f"v::{k}": v for k, v in self.v.items()})
        arrays["__meta__"] = np.array(
            [self.step, epoch, self.beta1, self.beta2, self.eps], dtype=np.float64)
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path):
        """Returns (state, epoch)."""
        with np.load(path) as blob:
            meta = blob["__meta__"]
            m = {k[3:]: blob[k] for k in blob.files if k.startswith("m::")}
            v = {k[3:]: blob[k] for k in blob.files if k.startswith("v::")}
        state = cls(m=m, v=v, step=int(meta[0]),
                    beta1=float(meta[2]), beta2=float(meta[3]), eps=float(meta[4]))
        return state, int(meta[1])


def adam_step(params: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update; increments the step and clears grads.

    Runs in place through two scratch buffers so no temporaries are
    allocated per parameter.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise RuntimeError(f"adam_step: parameter {name!r} has no gradient")
        if not p.grad.flags.c_contiguous:
            p.grad = np.ascontiguousarray(p.grad)
        _kernels.adam_update(p.data.reshape(-1), p.grad.reshape(-1),
                             state.m[name].reshape(-1), state.v[name].reshape(-1),
                             state.beta1, state.beta2, c1, c2, float(lr), state.eps)


# ---------------------------------------------------------------------------
# Training loop


@dataclass
class TrainResult:
    metrics_path: Path
    final_checkpoint: Path
    epochs_run: int
    first_loss: float
    final_loss: float
    metrics: list = field(default_factory=list)


def _epoch_order(n: int, batch: int, seed: int, epoch: int) -> np.ndarray:
    """Deterministic shuffled sample order, cycled up to the batch size."""
    rng = np.random.default_rng([seed, 0x5EED, epoch])
    perm = rng.permutation(n)
    if n < batch:
        reps = -(-batch // n)
        perm = np.tile(perm, reps)[:batch]
    return perm


def chamfer_values(pred: np.ndarray, gt: np.ndarray):
    """(l1, l2) Chamfer distances of raw clouds, one nearest-neighbor pass."""
    _, dp = _kernels.nearest(pred, gt)
    _, ds = _kernels.nearest(gt, pred)
    l2 = float(dp.mean() + ds.mean())
    l1 = float(np.sqrt(dp).mean() + np.sqrt(ds).mean())
    return l1, l2


def evaluate_cd(params: dict, model_cfg, pairs, variant: str) -> float:
    """Mean Chamfer distance of the final prediction over (partial, complete) pairs."""
    total = 0.0
    for pair in pairs:
        preds = model_mod.forward(pair.partial, params, model_cfg)
        total += float(chamfer(preds.p2, Tensor(
            np.asarray(pair.complete, dtype=preds.p2.data.dtype)), variant).data)
    return total / len(pairs)


def _evaluate_both(params: dict, model_cfg, pairs):
    l1s = []
    l2s = []
    for pair in pairs:
        preds = model_mod.forward(pair.partial, params, model_cfg)
        gt = np.asarray(pair.complete, dtype=preds.p2.data.dtype)
        l1, l2 = chamfer_values(preds.p2.data, gt)
        l1s.append(l1)
        l2s.append(l2)
    return float(np.mean(l1s)), float(np.mean(l2s))


def train(params: dict, model_cfg, train_pairs, cfg: TrainConfig, out_dir,
          val_pairs=None, start_epoch: int = 0, adam: AdamState | None = None,
          log=None) -> TrainResult:
    """Run the optimization loop, writing metrics rows and checkpoints.

    `train_pairs` is a sequence of objects with .partial and .complete
    (n, 3) arrays. Checkpoints land in out_dir every checkpoint_every
    epochs and at the end, each with a sidecar .state.npz holding the
    optimizer state so runs can resume exactly.
    """
    cfg.validate()
    if len(train_pairs) == 0:
        raise ValueError("train: dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.tsv"
    if start_epoch == 0 and metrics_path.exists():
        metrics_path.unlink()
    if adam is None:
        adam = AdamState.for_params(params)
    if val_pairs is None or len(val_pairs) == 0:
        val_pairs = train_pairs

    sizes = model_cfg.predicted_sizes()
    subset_cache: dict = {}
    batch = cfg.batch_size
    n = len(train_pairs)
    steps = max(1, n // batch)

    first_loss = None
    final_loss = None
    result_metrics = []

    def checkpoint(tag, epoch):
        ckpt = out_dir / f"ckpt_{tag}.patn"
        model_mod.save_checkpoint(ckpt, params, model_cfg)
        adam.save(str(ckpt) + ".state.npz", epoch)
        return ckpt

    last_ckpt = None
    val_l1 = val_l2 = float("nan")
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        order = _epoch_order(n, batch, cfg.seed, epoch)
        epoch_losses = []
        for step in range(steps):
            idxs = order[step * batch:(step + 1) * batch]
            pairs = [train_pairs[int(i)] for i in idxs]
            for pair in pairs:
                if id(pair) not in subset_cache:
                    subset_cache[id(pair)] = ground_truth_subsets(pair.complete, sizes)
            stacked = np.stack([p.partial for p in pairs])
            with Tape() as tape:
                preds = model_mod.forward_batch(stacked, params, model_cfg)
                terms = []
                for s, pair in enumerate(pairs):
                    sample = model_mod.Predictions(*(
                        row_slice(cloud, s * size, (s + 1) * size)
                        for cloud, size in zip(preds, sizes)))
                    terms.append(multi_scale_loss(sample, pair.complete, cfg.variant,
                                                  cfg.lambdas,
                                                  subsets=subset_cache[id(pair)]))
                loss = terms[0]
                for term in terms[1:]:
                    loss = add(loss, term)
                loss = scale(loss, 1.0 / len(pairs))
                tape.backward(loss)
            step_loss = float(loss.data)
            if not np.isfinite(step_loss):
                checkpoint_path = last_ckpt if last_ckpt else "none"
                raise NonFiniteLossError(
                    f"non-finite loss {step_loss} at epoch {epoch} step {step}; "
                    f"last good checkpoint: {checkpoint_path}")
            if first_loss is None:
                first_loss = step_loss
            epoch_losses.append(step_loss)
            adam_step(params, adam, lr)
        train_loss = float(np.mean(epoch_losses))
        final_loss = train_loss
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs - 1:
            val_l1, val_l2 = _evaluate_both(params, model_cfg, val_pairs)
        secs = time.perf_counter() - t0
        row = (epoch, lr, train_loss, val_l1, val_l2, secs)
        result_metrics.append(row)
        with open(metrics_path, "a", encoding="ascii") as fh:
            fh.write(f"{epoch}\t{lr:.10g}\t{train_loss:.10g}\t"
                     f"{val_l1:.10g}\t{val_l2:.10g}\t{secs:.3f}\n")
        if log is not None:
            log(f"epoch {epoch}: lr={lr:.3g} loss={train_loss:.6g} "
                f"val_l1={val_l1:.6g} val_l2={val_l2:.6g} ({secs:.1f}s)")
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            last_ckpt = checkpoint(f"epoch_{epoch:04d}", epoch + 1)

    final = checkpoint("final", cfg.epochs)
    return TrainResult(metrics_path=metrics_path, final_checkpoint=final,
                       epochs_run=cfg.epochs - start_epoch,
                       first_loss=first_loss, final_loss=final_loss,
                       metrics=result_metrics)
