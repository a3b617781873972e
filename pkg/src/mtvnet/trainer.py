"""Optimization loop: L1 objective, bias-corrected ADAM, milestone LR halving,
deterministic checkpointing and resumption.

The loss trace is plain CSV ("iter,loss,lr"); model snapshots use the
checkpoint format from :mod:`mtvnet.network`, with a torch-serialized
sidecar carrying optimizer moments and rng state for exact resumption.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import ModelConfig, TrainConfig, render_config
from .network import MtvnetModel, save_params
from .volumes import Volume, atomic_write_text, sample_nested

logger = logging.getLogger(__name__)

TRAIN_STATE_VERSION = "mtvnet-train-v1"
ADAM_EPS = 1e-8


class TrainError(RuntimeError):
    pass


@dataclass
class TrainState:
    model: MtvnetModel
    optimizer: torch.optim.Adam
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    rng: np.random.Generator
    iteration: int = 0
    trace: list[tuple[int, float, float]] = field(default_factory=list)

    @property
    def lr(self) -> float:
        """Rate used by the next step: halved once per passed milestone."""
        return schedule_lr(self.train_cfg, self.iteration + 1)


def schedule_lr(cfg: TrainConfig, iteration: int) -> float:
    passed = sum(1 for m in cfg.milestones if m < iteration)
    return cfg.lr * 0.5 ** passed


def l1_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise TrainError(f"loss shape mismatch: {tuple(pred.shape)} vs "
                         f"{tuple(target.shape)}")
    return (pred - target).abs().mean()


def init_train_state(model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainState:
    """Seeded model/optimizer/rng; the seed fixes parameter init and the
    whole patch-sampling sequence."""
    torch.manual_seed(train_cfg.seed)
    model = MtvnetModel(model_cfg)
    optimizer = torch.optim.Adam(model.parameters(), lr=train_cfg.lr,
                                 betas=train_cfg.betas, eps=ADAM_EPS,
                                 weight_decay=0.0)
    rng = np.random.default_rng(train_cfg.seed)
    return TrainState(model, optimizer, model_cfg, train_cfg, rng)


def adam_step(state: TrainState, grads: dict[str, torch.Tensor]) -> TrainState:
    """One bias-corrected ADAM update at the scheduled rate.

    A None entry means no gradient flowed to that parameter this step
    (it is left untouched); an absent entry is a caller error.
    """
    for name, p in state.model.named_parameters():
        if name not in grads:
            raise TrainError(f"missing gradient for parameter '{name}'")
        g = grads[name]
        if g is not None and not torch.isfinite(g).all():
            raise TrainError(f"non-finite gradient for parameter '{name}'")
        p.grad = g
    lr = state.lr
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    state.optimizer.zero_grad(set_to_none=True)
    state.iteration += 1
    return state


def sample_batch(state: TrainState, pairs: list[tuple[Volume, Volume]],
                 pad: bool = False):
    """Draw one batch of nested patches from a random volume pair."""
    if not pairs:
        raise TrainError("no training volume pairs available")
    lr_vol, hr_vol = pairs[int(state.rng.integers(len(pairs)))]
    patches = [sample_nested(lr_vol, hr_vol, state.model_cfg, state.rng, pad=pad)
               for _ in range(state.train_cfg.batch_size)]
    n_levels = len(state.model_cfg.levels)
    contexts = [
        torch.from_numpy(np.stack([p.lr_contexts[k] for p in patches]))
        for k in range(n_levels)
    ]
    targets = torch.from_numpy(np.stack([p.hr_target for p in patches]))
    return contexts, targets


def train_step(state: TrainState, contexts, targets) -> float:
    pred = state.model(contexts)
    loss = l1_loss(pred, targets)
    if not torch.isfinite(loss):
        raise TrainError(
            f"non-finite loss {loss.item()} at iteration {state.iteration + 1}")
    state.model.zero_grad(set_to_none=True)
    loss.backward()
    grads = {name: p.grad for name, p in state.model.named_parameters()}
    adam_step(state, grads)
    return float(loss.detach())


def train(state: TrainState, pairs: list[tuple[Volume, Volume]], steps: int,
          out_dir=None, ckpt_interval: int = 0, pad: bool = False,
          log_every: int = 100) -> TrainState:
    """Run `steps` additional iterations; deterministic under a fixed seed."""
    state.model.train()
    target_iter = state.iteration + steps
    while state.iteration < target_iter:
        contexts, targets = sample_batch(state, pairs, pad=pad)
        lr = state.lr
        loss = train_step(state, contexts, targets)
        state.trace.append((state.iteration, loss, lr))
        if log_every and state.iteration % log_every == 0:
            logger.info("iter %d loss %.6f lr %.2e", state.iteration, loss, lr)
        if out_dir and ckpt_interval and state.iteration % ckpt_interval == 0:
            save_checkpoint(state, out_dir, f"iter_{state.iteration:07d}")
    if out_dir:
        save_checkpoint(state, out_dir, "last")
        write_trace(state.trace, os.path.join(out_dir, "loss_trace.csv"))
    return state


def write_trace(trace, path) -> None:
    lines = ["iter,loss,lr"]
    lines += [f"{it},{loss:.8e},{lr:.8e}" for it, loss, lr in trace]
    atomic_write_text(path, "\n".join(lines) + "\n")


def save_checkpoint(state: TrainState, out_dir, stem: str) -> tuple[str, str]:
    """Write <stem>.params (named parameter map) plus a resume sidecar."""
    os.makedirs(out_dir, exist_ok=True)
    params_path = os.path.join(out_dir, stem + ".params")
    save_params(state.model, params_path)
    sidecar_path = os.path.join(out_dir, stem + ".state")
    payload = {
        "format": TRAIN_STATE_VERSION,
        "iteration": state.iteration,
        "model": state.model.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "rng": state.rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
        "config": render_config(state.model_cfg, state.train_cfg),
        "trace": state.trace,
    }
    tmp = sidecar_path + ".part"
    torch.save(payload, tmp)
    os.replace(tmp, sidecar_path)
    return params_path, sidecar_path


def load_checkpoint(path, model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainState:
    """Restore a :func:`save_checkpoint` sidecar for exact resumption."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != TRAIN_STATE_VERSION:
        raise TrainError(f"{path}: unknown train-state format "
                         f"{payload.get('format')!r}")
    expected = render_config(model_cfg, train_cfg)
    if payload["config"] != expected:
        raise TrainError(f"{path}: checkpoint config does not match the "
                         "supplied config")
    state = init_train_state(model_cfg, train_cfg)
    state.model.load_state_dict(payload["model"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.rng.bit_generator.state = payload["rng"]
    torch.set_rng_state(payload["torch_rng"])
    state.iteration = payload["iteration"]
    state.trace = list(payload["trace"])
    return state
