"""Episode sampling, augmentations, optimizer and the training loop.

One training item is an episode drawn from a single seismic line: ``S + 1``
distinct CDPs, the first giving the query ``(X, Y)`` and the rest the support
set. Items pass through noise, per-image normalization and the random
identity replacement, in that order, before a batch of them takes one AdamW
step under a one-cycle learning-rate schedule with global-norm clipping.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .autodiff import Tape, Tensor, l1_loss
from .model import SupportSet


@dataclass(frozen=True)
class TrainConfig:
    S: int = 5
    batch_size: int = 8
    epochs: int = 10
    lr_max: float = 1e-3
    weight_decay: float = 0.01
    clip_max_norm: float = 1.0
    noise_std_range: tuple = (0.0, 0.1)
    replace_fraction: float = 0.1
    seed: int = 0
    warmup_frac: float = 0.3
    final_frac: float = 0.04
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    draws_per_line: int = 1

    def __post_init__(self):
        if self.S < 1:
            raise ValueError("S must be at least 1")
        if not 0.0 <= self.replace_fraction <= 1.0:
            raise ValueError("replace_fraction must lie in [0, 1]")
        if self.lr_max <= 0 or self.clip_max_norm <= 0:
            raise ValueError("lr_max and clip_max_norm must be positive")
        lo, hi = self.noise_std_range
        if lo < 0 or hi < lo:
            raise ValueError("noise_std_range must satisfy 0 <= lo <= hi")
        if self.batch_size < 1 or self.epochs < 0 or self.draws_per_line < 1:
            raise ValueError("batch_size and draws_per_line must be positive, epochs non-negative")
        if not 0.0 <= self.warmup_frac <= 1.0 or not 0.0 < self.final_frac <= 1.0:
            raise ValueError("warmup_frac must lie in [0, 1] and final_frac in (0, 1]")

    def to_json(self) -> dict:
        d = asdict(self)
        d["noise_std_range"] = list(self.noise_std_range)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


@dataclass
class TrainStepRecord:
    step: int
    epoch: int
    loss: float
    lr: float
    grad_norm_preclip: float
    replaced_identity: int  # identity-replaced items in the batch


class TrainingDiverged(FloatingPointError):
    """Raised when the loss or gradient norm stops being finite."""

    def __init__(self, record: TrainStepRecord):
        super().__init__(
            f"non-finite training state at step {record.step}: loss={record.loss} "
            f"lr={record.lr} grad_norm={record.grad_norm_preclip}"
        )
        self.record = record


# ---------------------------------------------------------------- episode sampling


def sample_step(line, S: int, rng):
    """Draw ``S + 1`` distinct CDPs of ``line``.

    Returns ``(X, Y, support, indices)`` where ``indices[0]`` is the query
    position and the rest are the support positions in draw order.
    """
    M = line.gathers.shape[0]
    if S + 1 > M:
        raise ValueError(f"cannot draw S + 1 = {S + 1} distinct CDPs from a line of {M}")
    idx = rng.choice(M, size=S + 1, replace=False)
    X = np.array(line.gathers[idx[0]], dtype=np.float64)
    Y = np.array(line.labels[idx[0]], dtype=np.float64)
    support = SupportSet(line.gathers[idx[1:]], line.labels[idx[1:]])
    return X, Y, support, idx


# ---------------------------------------------------------------- augmentations


def _noisy_pair(g, lab, frac, rng):
    sigma = frac * g.std()
    return g + rng.normal(0.0, sigma, g.shape), lab + rng.normal(0.0, sigma, lab.shape)


def random_white_noise(X, Y, V: Optional[SupportSet], noise_std_range, rng):
    """Add white noise to every gather and label.

    One noise fraction is drawn per call; each pair gets noise whose standard
    deviation is that fraction times the std of the pair's gather. Gather and
    label noise are independent draws.
    """
    lo, hi = noise_std_range
    frac = rng.uniform(lo, hi) if hi > lo else lo
    if frac == 0.0:
        return X, Y, V
    X, Y = _noisy_pair(X, Y, frac, rng)
    if V is not None:
        pairs = [_noisy_pair(g, lab, frac, rng) for g, lab in zip(V.prompts, V.prompt_labels)]
        V = SupportSet(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))
    return X, Y, V


def normalize_pair(gather, label, eps: float = 1e-12):
    """Normalize ``gather`` and ``label`` with the gather's mean and std.

    Returns ``(gather_n, label_n, mean, std)``; ``std`` is 1.0 when the gather
    is constant.
    """
    mu = gather.mean()
    sigma = gather.std()
    if sigma < eps:
        return gather - mu, label - mu, mu, 1.0
    return (gather - mu) / sigma, (label - mu) / sigma, mu, sigma


def normalize_per_image(X, Y, V: Optional[SupportSet]):
    X, Y, _, _ = normalize_pair(X, Y)
    if V is not None:
        pairs = [normalize_pair(g, lab) for g, lab in zip(V.prompts, V.prompt_labels)]
        V = SupportSet(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]))
    return X, Y, V


def randomly_replace_label(X, Y, V: Optional[SupportSet], replace_fraction: float, rng):
    """With probability ``replace_fraction`` turn the episode into an identity task.

    A single draw decides for the query and all prompts together. Returns
    ``(X, Y, V, replaced)``.
    """
    replaced = bool(rng.random() < replace_fraction)
    if not replaced:
        return X, Y, V, False
    if V is not None:
        V = SupportSet(V.prompts, V.prompts.copy())
    return X, X.copy(), V, True


def augment(X, Y, V, config: TrainConfig, rng):
    """Noise, then per-image normalization, then identity replacement."""
    X, Y, V = random_white_noise(X, Y, V, config.noise_std_range, rng)
    X, Y, V = normalize_per_image(X, Y, V)
    return randomly_replace_label(X, Y, V, config.replace_fraction, rng)


# ---------------------------------------------------------------- optimization


def global_grad_norm(params: Iterable) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``.

    Returns the applied scale factor (1.0 when no clipping happened).
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    params = list(params)
    norm = global_grad_norm(params)
    if not norm > max_norm:
        return 1.0
    scale = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * scale
    return scale


@dataclass
class AdamWState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params) -> "AdamWState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params, grads, state: AdamWState, lr: float, weight_decay: float, betas=(0.9, 0.999), eps=1e-8):
    """One AdamW update in place, with weight decay decoupled from the moments.

    ``param <- param - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * param)``
    """
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if state.m[i].shape != p.data.shape:
            raise ValueError(f"optimizer state does not match parameter {i}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        p.data = p.data - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * p.data)
    return params, state


def onecycle_lr(step: int, total_steps: int, lr_max: float, warmup_frac: float = 0.3, final_frac: float = 0.04) -> float:
    """Cosine warm-up from ``lr_max * final_frac`` to ``lr_max``, then cosine decay back."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps})")
    lo = lr_max * final_frac
    last = total_steps - 1
    if last == 0:
        return lr_max
    peak = int(round(warmup_frac * last))
    if step <= peak and peak > 0:
        return lr_max - (lr_max - lo) * (1.0 + math.cos(math.pi * step / peak)) / 2.0
    frac = (step - peak) / (last - peak)
    return lo + (lr_max - lo) * (1.0 + math.cos(math.pi * frac)) / 2.0


# ---------------------------------------------------------------- loop


def item_rng(seed: int, epoch: int, item: int):
    return np.random.default_rng([int(seed), int(epoch), int(item)])


def build_batch(dataset, items, config: TrainConfig, epoch: int, with_support: bool):
    """Assemble one batch from ``(position, line_index)`` items.

    Identity replacement only applies when the model reads prompts. A model
    without a support path cannot tell an identity episode from a demultiple
    one, so for it those episodes would just corrupt the target.
    """
    if not with_support and config.replace_fraction:
        config = dataclasses.replace(config, replace_fraction=0.0)
    Xs, Ys, Ps, Ls = [], [], [], []
    replaced = 0
    for pos, line_idx in items:
        rng = item_rng(config.seed, epoch, pos)
        line = dataset.line(line_idx)
        X, Y, V, _ = sample_step(line, config.S, rng)
        if not with_support:
            V = None
        X, Y, V, rep = augment(X, Y, V, config, rng)
        replaced += rep
        Xs.append(X)
        Ys.append(Y)
        if V is not None:
            Ps.append(V.prompts)
            Ls.append(V.prompt_labels)
    X = np.stack(Xs)[:, None]
    Y = np.stack(Ys)[:, None]
    support = SupportSet(np.stack(Ps, axis=1), np.stack(Ls, axis=1)) if with_support else None
    return X, Y, support, replaced


def epoch_items(dataset, config: TrainConfig, epoch: int) -> list:
    """Shuffled ``(position, line_index)`` list for one epoch.

    Draws of the same line are spread ``n_lines`` apart, so a batch never
    holds two draws of one line unless the batch is larger than the split.
    """
    lines = np.asarray(list(dataset.train_indices))
    rng = np.random.default_rng([int(config.seed), int(epoch), 2**31 - 1])
    order = []
    for _ in range(config.draws_per_line):
        order.extend(rng.permutation(lines).tolist())
    return list(enumerate(order))


def steps_per_epoch(n_lines: int, config: TrainConfig) -> int:
    return math.ceil(n_lines * config.draws_per_line / config.batch_size)


def train(
    model,
    dataset,
    config: TrainConfig,
    callback: Optional[Callable[[TrainStepRecord], None]] = None,
) -> list:
    """Run the full training schedule on ``dataset``'s train split.

    Returns the list of :class:`TrainStepRecord`; the model is updated in
    place. Raises :class:`TrainingDiverged` on a non-finite loss or gradient.
    """
    n_lines = len(dataset.train_indices)
    if n_lines == 0:
        raise ValueError("the training split is empty")
    M = dataset.M
    if config.S + 1 > M:
        raise ValueError(f"S + 1 = {config.S + 1} exceeds the {M} CDPs per line")
    with_support = model.architecture == "contextseisnet"
    params = model.parameters()
    state = AdamWState.for_params(params)
    per_epoch = steps_per_epoch(n_lines, config)
    total = per_epoch * config.epochs
    records = []
    step = 0
    model.train()
    for epoch in range(config.epochs):
        items = epoch_items(dataset, config, epoch)
        for b in range(per_epoch):
            chunk = items[b * config.batch_size : (b + 1) * config.batch_size]
            X, Y, support, replaced = build_batch(dataset, chunk, config, epoch, with_support)
            lr = onecycle_lr(step, total, config.lr_max, config.warmup_frac, config.final_frac)
            with Tape() as tape:
                pred = model.forward(Tensor(X), support, training=True)
                loss = l1_loss(pred, Tensor(Y))
            loss_value = loss.item()
            grad_norm = float("nan")
            if math.isfinite(loss_value):
                tape.backward(loss, params)
                grad_norm = global_grad_norm(params)
            record = TrainStepRecord(step, epoch, loss_value, lr, grad_norm, int(replaced))
            if not (math.isfinite(loss_value) and math.isfinite(grad_norm)):
                model.eval()
                raise TrainingDiverged(record)
            clip_grad_norm(params, config.clip_max_norm)
            adamw_step(params, [p.grad for p in params], state, lr, config.weight_decay, config.betas, config.eps)
            records.append(record)
            if callback is not None:
                callback(record)
            step += 1
    model.eval()
    return records


LOG_COLUMNS = ("step", "epoch", "loss", "lr", "grad_norm_preclip", "replaced_identity")


def write_log(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in records:
            w.writerow([r.step, r.epoch, f"{r.loss:.9g}", f"{r.lr:.9g}", f"{r.grad_norm_preclip:.9g}", r.replaced_identity])


def read_log(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        TrainStepRecord(
            int(r["step"]),
            int(r["epoch"]),
            float(r["loss"]),
            float(r["lr"]),
            float(r["grad_norm_preclip"]),
            int(r["replaced_identity"]),
        )
        for r in rows
    ]


def save_config(config: TrainConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return TrainConfig.from_json(json.load(fh))


__all__ = [
    "AdamWState",
    "TrainConfig",
    "TrainStepRecord",
    "TrainingDiverged",
    "adamw_step",
    "augment",
    "build_batch",
    "clip_grad_norm",
    "global_grad_norm",
    "load_config",
    "normalize_pair",
    "normalize_per_image",
    "onecycle_lr",
    "random_white_noise",
    "randomly_replace_label",
    "read_log",
    "sample_step",
    "save_config",
    "steps_per_epoch",
    "train",
    "write_log",
]
