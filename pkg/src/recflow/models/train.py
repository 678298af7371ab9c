"""Training loop: windowed objective accumulation, Adam ascent, linear KL
annealing, plateau learning-rate reduction, early stopping on validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..diffcore import Adam, DomainError, PlateauSchedule, Tape, backward, clip_gradients
from ..diffcore import tape as tp
from ..flows import FlowError
from ..geodata import Dataset
from ..rng import generator
from .config import ModelConfig
from .core import SequenceModel, steps_for


def beta_schedule(epoch: int, anneal_epochs: int) -> float:
    """Linear KL-annealing multiplier: 0 at epoch 0, 1 from anneal_epochs on."""
    if anneal_epochs <= 0:
        return 1.0
    return min(1.0, epoch / anneal_epochs)


@dataclass
class TrainOptions:
    lr: float = 0.003
    max_epochs: int = 500
    kl_anneal_epochs: int | None = None    # None: take the model config's value
    plateau_patience: int = 100
    plateau_factor: float = 0.1
    early_stop_patience: int = 200
    window: int = 0                        # 0: full training split per step
    grad_clip: float = 0.0                 # 0: no clipping
    seed: int = 0
    out_dir: str | None = None


@dataclass
class TrainResult:
    model: SequenceModel
    log: list[dict]
    best_val: float
    best_epoch: int
    epochs_run: int
    diverged: bool = False
    checkpoint_path: str | None = None
    log_path: str | None = None


@dataclass
class _Best:
    values: dict[str, np.ndarray] = field(default_factory=dict)
    norm_state: list = field(default_factory=list)
    val: float = -np.inf
    epoch: int = -1

    def capture(self, model: SequenceModel, val: float, epoch: int):
        self.values = {name: p.value.copy() for name, p in model.parameters().items()}
        self.norm_state = model.norm_state()
        self.val = val
        self.epoch = epoch

    def restore(self, model: SequenceModel):
        for name, p in model.parameters().items():
            p.value = self.values[name].copy()
            p.reset_grad()
        model.load_norm_state(self.norm_state)


def _windows(indices: list[int], width: int) -> list[list[int]]:
    if width <= 0 or width >= len(indices):
        return [indices]
    return [indices[i:i + width] for i in range(0, len(indices), width)]


def train(dataset: Dataset, config: ModelConfig,
          options: TrainOptions = TrainOptions()) -> TrainResult:
    """Run the gradient-ascent training scheme and return the model
    restored to the best validation checkpoint."""
    model = SequenceModel(config, k=dataset.k,
                          rng=generator(config.seed, "model-init"))
    optimizer = Adam(model.parameters(), lr=options.lr)
    schedule = PlateauSchedule(patience=options.plateau_patience,
                               factor=options.plateau_factor)
    anneal = (config.kl_anneal_epochs if options.kl_anneal_epochs is None
              else options.kl_anneal_epochs)

    train_idx = list(dataset.split_range("train"))
    val_idx = list(dataset.split_range("val"))
    windows = [steps_for(dataset, w) for w in _windows(train_idx, options.window)]
    val_steps = steps_for(dataset, val_idx)
    Z = config.latent_width

    noise_rng = generator(options.seed, "train-noise")
    val_seed = int(generator(options.seed, "val-noise").integers(2 ** 31))

    best = _Best()
    best.capture(model, -np.inf, -1)
    log: list[dict] = []
    diverged = False
    epochs_run = 0

    out_dir = Path(options.out_dir) if options.out_dir else None
    ckpt_path = out_dir / "checkpoint.npz" if out_dir else None
    if ckpt_path:
        model.save(ckpt_path, optimizer, extra_meta={"epoch": -1})

    for epoch in range(options.max_epochs):
        beta = beta_schedule(epoch, anneal)
        state = model.initial_state()
        train_total = 0.0
        for steps in windows:
            noises = (noise_rng.standard_normal((len(steps), Z))
                      if config.stochastic else None)
            try:
                with Tape() as tape:
                    obj, _, out_state = model.window_elbo(
                        steps, state, beta, noises=noises,
                        training=True, update_stats=True)
                    loss = tp.neg(obj)
            except (DomainError, FlowError):
                diverged = True
                break
            if not np.isfinite(obj.value):
                diverged = True
                break
            optimizer.zero_grad()
            backward(tape, loss)
            if options.grad_clip > 0.0:
                clip_gradients(model.parameters(), options.grad_clip)
            if not all(np.all(np.isfinite(p.grad)) for p in model.parameters().values()):
                diverged = True
                break
            optimizer.step()
            train_total += float(obj.value)
            state = out_state.detached()
        if diverged:
            break

        val_noises = (generator(val_seed, "val-draw").standard_normal((len(val_steps), Z))
                      if config.stochastic else None)
        try:
            val_obj, _, _ = model.window_elbo(val_steps, state.detached(), 1.0,
                                              noises=val_noises,
                                              training=False, update_stats=False)
        except (DomainError, FlowError):
            diverged = True
            break
        val = float(val_obj.value)
        if not np.isfinite(val):
            diverged = True
            break

        epochs_run = epoch + 1
        if val > best.val:
            best.capture(model, val, epoch)
            if ckpt_path:
                model.save(ckpt_path, optimizer,
                           extra_meta={"epoch": epoch, "val_objective": val})
        schedule.update(val, optimizer)
        log.append({"epoch": epoch, "train_objective": train_total,
                    "val_objective": val, "beta": beta, "lr": optimizer.lr})
        if epoch - best.epoch > options.early_stop_patience:
            break

    if best.epoch >= 0:
        best.restore(model)
    log_path = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "training_log.jsonl"
        with open(log_path, "w") as fh:
            for record in log:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
    return TrainResult(model=model, log=log, best_val=best.val,
                       best_epoch=best.epoch, epochs_run=epochs_run,
                       diverged=diverged,
                       checkpoint_path=str(ckpt_path) if ckpt_path else None,
                       log_path=str(log_path) if log_path else None)
