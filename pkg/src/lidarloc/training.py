"""Scene-coordinate regression training: L1 loss, gradients, Adam."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .encoder import EncoderPlan, ModelConfig, ModelWeights, build_plan, encode, init_weights
from .errors import InvalidInputError, TrainingDivergenceError
from .geometry import Pose, apply_pose
from .synthetic import TrainSample

log = logging.getLogger(__name__)


def gt_scene_coords(points, gt_pose: Pose) -> np.ndarray:
    """World-frame targets for local representative points."""
    return apply_pose(gt_pose, points)


def l1_loss(pred, target):
    """Mean over tokens of the L1 norm of the xyz residual.

    Works on numpy arrays or torch tensors; torch's |x| has subgradient 0 at
    the kink, which is the convention used throughout.
    """
    if len(pred) != len(target) or len(pred) < 1:
        raise InvalidInputError(f"l1_loss needs equal non-empty inputs ({len(pred)} vs {len(target)})")
    if isinstance(pred, torch.Tensor):
        target = torch.as_tensor(target, dtype=pred.dtype)
        return (pred - target).abs().sum(dim=-1).mean()
    return float(np.abs(np.asarray(pred) - np.asarray(target)).sum(axis=-1).mean())


def sample_loss(weights: ModelWeights, sample: TrainSample, plan: EncoderPlan | None = None):
    out = encode(sample.cloud, weights, plan=plan)
    target = gt_scene_coords(out.local_points, sample.gt_pose)
    return l1_loss(out.predictions, target)


def backward(weights: ModelWeights, sample: TrainSample, plan: EncoderPlan | None = None):
    """Loss and per-tensor gradients (reverse mode through torch autograd)."""
    params = {k: v.detach().requires_grad_(True) for k, v in weights.tensors.items()}
    loss = sample_loss(ModelWeights(weights.config, params), sample, plan)
    if not torch.isfinite(loss):
        raise TrainingDivergenceError(f"non-finite loss {loss.item()}")
    names = list(params)
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        out[n] = torch.zeros_like(params[n]) if g is None else g.detach()
    return float(loss.detach()), out


@dataclass
class AdamState:
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(weights: ModelWeights, grads: dict, state: AdamState):
    """One bias-corrected Adam update; returns (new weights, state)."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    new = {}
    for name, w in weights.tensors.items():
        g = grads[name]
        if g.shape != w.shape:
            raise InvalidInputError(f"gradient shape {tuple(g.shape)} != weight shape {tuple(w.shape)} for {name}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = torch.zeros_like(w)
            v = torch.zeros_like(w)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / ((v / c2).sqrt() + state.eps)
        new[name] = (w - update).detach()
    return ModelWeights(weights.config, new), state


def fit_normalization(samples) -> tuple:
    """Mean and largest per-axis std of the world-frame training points."""
    world = np.concatenate([apply_pose(s.gt_pose, s.cloud) for s in samples])
    offset = tuple(float(x) for x in world.mean(axis=0))
    scale = float(world.std(axis=0).max()) or 1.0
    return offset, scale


@dataclass
class TrainResult:
    weights: ModelWeights
    losses: list
    state: AdamState


def train(
    model,
    dataset,
    epochs: int,
    batch_size: int = 8,
    seed: int = 0,
    lr: float = 0.002,
    shuffle: bool = True,
    dtype=torch.float32,
    log_every: int = 0,
) -> TrainResult:
    """Mini-batch Adam on the mean per-scan L1 loss.

    ``model`` is a :class:`ModelWeights` (trained in place of a copy) or a
    :class:`ModelConfig` (weights initialized from ``seed``). Gradients in a
    batch are summed in dataset-index order, so the visiting order of
    samples never changes the arithmetic.
    """
    samples = list(dataset)
    if not samples:
        raise InvalidInputError("training dataset is empty")
    if isinstance(model, ModelConfig):
        weights = init_weights(model, seed=seed, dtype=dtype)
    else:
        weights = model.clone()
    plans = [build_plan(s.cloud, weights.config) for s in samples]
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr)
    losses = []
    batch_index = 0
    for epoch in range(epochs):
        order = rng.permutation(len(samples)) if shuffle else np.arange(len(samples))
        epoch_losses = np.zeros(len(samples))
        for start in range(0, len(order), batch_size):
            batch = np.sort(order[start : start + batch_size])
            total = None
            for i in batch:
                try:
                    loss, grads = backward(weights, samples[i], plans[i])
                except TrainingDivergenceError as exc:
                    raise TrainingDivergenceError(
                        f"divergence at epoch {epoch}, batch {batch_index}: {exc}",
                        batch_index=batch_index,
                        epoch=epoch,
                    ) from exc
                epoch_losses[i] = loss
                if total is None:
                    total = grads
                else:
                    total = {k: total[k] + grads[k] for k in total}
            mean = {k: g / len(batch) for k, g in total.items()}
            if not all(torch.isfinite(g).all() for g in mean.values()):
                raise TrainingDivergenceError(
                    f"non-finite gradient at epoch {epoch}, batch {batch_index}",
                    batch_index=batch_index,
                    epoch=epoch,
                )
            weights, state = adam_step(weights, mean, state)
            batch_index += 1
        losses.append(float(epoch_losses.mean()))
        if log_every and (epoch % log_every == 0 or epoch == epochs - 1):
            log.info("epoch %d loss %.4f", epoch, losses[-1])
    return TrainResult(weights, losses, state)


def write_loss_csv(path, losses) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for e, v in enumerate(losses):
            writer.writerow([e, repr(float(v))])


def read_loss_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [float(r["mean_loss"]) for r in rows]

