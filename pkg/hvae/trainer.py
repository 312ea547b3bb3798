"""
HVAE Trainer
============
Optimisation loop binding model, objectives and phantom data: AdamW updates with
decoupled weight decay, cyclical KL annealing, KL balancing, gradient clipping,
periodic checkpoints and a JSON-lines metric stream.

Reproducibility: parameter init is seeded from ``cfg.seed``, batch order from
(seed, epoch) and every per-step random draw from (seed, iteration), so a
resumed run replays an uninterrupted one bit for bit in single-threaded mode.

Usage:
    python -m hvae.cli train --variant nvae --config config/default.cfg --iters 2000
"""

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional, Union

import numpy as np
import torch
from tqdm import tqdm

from .checkpoint import load_checkpoint, restore, save_checkpoint
from .config import RunConfig
from .errors import ContractViolation, NonFiniteLossError
from .hvae_model import HierarchicalVAE
from .objectives import ElboBreakdown, SupervisionInputs, compute_elbo, kl_anneal_coefficient
from .phantom import PhantomDataset
from .run_manager import RunDirectory

logger = logging.getLogger(__name__)

STEP_STREAM = 0
PSEUDO_INPUT_STREAM = 1


@dataclass
class TrainLogRecord:
    """One optimisation step; ``wall_ms`` stays out of the JSON stream"""

    iteration: int
    beta: float
    kl_per_layer: List[float]
    recon_ll: float
    recon_mse: float
    total_loss: float
    gammas: List[float] = field(default_factory=list)
    vamprior_extra_kl: List[float] = field(default_factory=list)
    supervision_loss: Optional[float] = None
    grad_norm: float = 0.0
    clipped: bool = False
    wall_ms: float = 0.0

    def to_json(self) -> str:
        record = asdict(self)
        record.pop("wall_ms")
        return json.dumps(record, sort_keys=True)


@dataclass
class TrainResult:
    final_checkpoint: Optional[Path]
    records: List[TrainLogRecord]
    iteration: int


def derived_generator(seed: int, stream: int, index: int) -> torch.Generator:
    """torch.Generator whose state depends only on (seed, stream, index)"""
    state = np.random.SeedSequence([seed, stream, index]).generate_state(1, dtype=np.uint64)[0]
    generator = torch.Generator()
    generator.manual_seed(int(state) & ((1 << 63) - 1))
    return generator


def batch_indices(seed: int, iteration: int, n_train: int, batch_size: int) -> np.ndarray:
    """Training-split positions for 1-based ``iteration``; one permutation per epoch"""
    if n_train < 1:
        raise ContractViolation("training split is empty")
    batch_size = min(batch_size, n_train)
    steps_per_epoch = n_train // batch_size
    epoch, step = divmod(iteration - 1, steps_per_epoch)
    order = np.random.default_rng([seed, epoch]).permutation(n_train)
    return order[step * batch_size:(step + 1) * batch_size]


def build_optimizer(params: Iterable[torch.nn.Parameter], cfg: RunConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        params,
        lr=cfg.lr,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        weight_decay=cfg.weight_decay,
    )


def _truncate_log(path: Path, last_iteration: int) -> None:
    """Drop log records past ``last_iteration`` so a resumed run appends right after its checkpoint"""
    if not path.exists():
        return
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    kept = [line for line in lines if line.strip() and json.loads(line)["iteration"] <= last_iteration]
    if len(kept) != len(lines):
        logger.warning(f"⚠️  Dropping {len(lines) - len(kept)} log records past iteration {last_iteration}")
        path.write_text("".join(kept), encoding="utf-8")


def _offending_term(elbo: ElboBreakdown) -> Optional[str]:
    if not math.isfinite(float(elbo.recon_ll.detach())):
        return "recon_ll"
    for l, kl in enumerate(elbo.kl_per_layer):
        if not math.isfinite(float(kl.detach())):
            return f"kl_layer_{l}"
    for l, kl in enumerate(elbo.vamprior_extra_kl, start=1):
        if not math.isfinite(float(kl.detach())):
            return f"vamprior_extra_kl_layer_{l}"
    if elbo.supervision_loss is not None and not math.isfinite(float(elbo.supervision_loss.detach())):
        return "supervision_loss"
    return None


class HVAETrainer:
    """Train one HierarchicalVAE on a phantom dataset"""

    def __init__(
        self,
        cfg: RunConfig,
        dataset: Optional[PhantomDataset] = None,
        run: Optional[RunDirectory] = None,
        show_progress: bool = False,
    ):
        """
        Initialize trainer.

        Args:
            cfg: resolved run configuration
            dataset: phantom dataset (loaded from ``cfg.data`` when omitted)
            run: run directory for checkpoints and train_log.jsonl; nothing is written without one
            show_progress: draw a tqdm bar
        """
        self.cfg = cfg
        self.run = run
        self.show_progress = show_progress
        self.dataset = dataset if dataset is not None else PhantomDataset(cfg.data)

        expected = (cfg.resolution, cfg.resolution)
        if tuple(self.dataset.resolution) != expected:
            raise ContractViolation(
                f"dataset resolution {tuple(self.dataset.resolution)} does not match config resolution {expected}"
            )
        train_idx = self.dataset.split("train")
        if not train_idx:
            raise ContractViolation("dataset has an empty training split")
        self.images = torch.from_numpy(self.dataset.images[train_idx])
        self.masks = torch.from_numpy(self.dataset.masks[train_idx].astype(np.float32))

        torch.manual_seed(cfg.seed)
        self.model = HierarchicalVAE.from_config(cfg)
        self.optimizer = build_optimizer(self.model.parameters(), cfg)
        self.layer_sizes = self.model.layer_sizes()
        self.iteration = 0
        self.records: List[TrainLogRecord] = []

    # ------------------------------------------------------------------ state

    def init_pseudo_inputs(self) -> None:
        if self.cfg.variant.uses_vamprior:
            self.model.init_pseudo_inputs(self.images, derived_generator(self.cfg.seed, PSEUDO_INPUT_STREAM, 0))

    def load(self, checkpoint: Union[str, Path]) -> int:
        """Restore model, optimizer moments and iteration counter"""
        ckpt = load_checkpoint(checkpoint)
        self.iteration = restore(ckpt, self.model, self.optimizer, variant=self.cfg.variant)
        return self.iteration

    def save(self) -> Optional[Path]:
        if self.run is None:
            return None
        return save_checkpoint(
            self.run.checkpoint_path(self.iteration), self.model, self.cfg, self.iteration, self.optimizer
        )

    # ------------------------------------------------------------------- step

    def step(self, iteration: int) -> TrainLogRecord:
        """One minibatch update for 1-based ``iteration``"""
        cfg = self.cfg
        started = time.perf_counter()
        idx = torch.from_numpy(batch_indices(cfg.seed, iteration, len(self.images), cfg.batch_size))
        x = self.images[idx]
        generator = derived_generator(cfg.seed, STEP_STREAM, iteration)

        self.model.train()
        inference = self.model.infer(x, generator)
        mixtures = self.model.vamprior_mixtures() if cfg.variant.uses_vamprior else None
        supervision = None
        if cfg.supervision.enabled:
            pred = self.model.segment(inference.latents[cfg.supervision.target_layer])
            supervision = SupervisionInputs(pred, self.masks[idx], cfg.supervision.loss_weight)

        elbo = compute_elbo(
            cfg.variant,
            inference,
            x,
            mixtures=mixtures,
            supervision=supervision,
            generator=generator,
            kl_balancing=cfg.kl_balancing,
            layer_sizes=self.layer_sizes,
            n_mc_samples=cfg.mc_samples,
            beta=kl_anneal_coefficient(iteration - 1, cfg.schedule),
        )
        loss = elbo.total_weighted_loss
        recon_mse = float(((inference.x_mean.detach() - x) ** 2).mean())

        if not math.isfinite(float(loss.detach())):
            diagnostic = {"iteration": iteration, "term": _offending_term(elbo) or "total_loss"}
            diagnostic.update(elbo.to_record())
            raise NonFiniteLossError(
                f"non-finite loss at iteration {iteration} (term {diagnostic['term']})", diagnostic
            )

        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = float(torch.nn.utils.clip_grad_norm_(self.model.parameters(), cfg.grad_clip))
        clipped = grad_norm > cfg.grad_clip
        if clipped:
            logger.warning(f"⚠️  Gradient clipped at iteration {iteration}: norm {grad_norm:.3f} > {cfg.grad_clip}")
        self.optimizer.step()

        return TrainLogRecord(
            iteration=iteration,
            beta=elbo.beta,
            kl_per_layer=[float(kl.detach()) for kl in elbo.kl_per_layer],
            recon_ll=float(elbo.recon_ll.detach()),
            recon_mse=recon_mse,
            total_loss=float(loss.detach()),
            gammas=list(elbo.gammas),
            vamprior_extra_kl=[float(kl.detach()) for kl in elbo.vamprior_extra_kl],
            supervision_loss=None if elbo.supervision_loss is None else float(elbo.supervision_loss.detach()),
            grad_norm=grad_norm,
            clipped=clipped,
            wall_ms=1000.0 * (time.perf_counter() - started),
        )

    # -------------------------------------------------------------------- run

    def train(self) -> TrainResult:
        """Run from the current iteration up to ``cfg.max_iters``"""
        cfg = self.cfg
        start = self.iteration
        logger.info("=" * 70)
        logger.info(f"🚀 TRAINING {cfg.variant.value.upper()} ({self.model.describe()})")
        logger.info("=" * 70)
        logger.info(f"Train samples: {len(self.images)}  batch: {cfg.batch_size}  iterations: {start + 1}..{cfg.max_iters}")

        if start >= cfg.max_iters:
            logger.warning(f"Checkpoint already at iteration {start} >= max_iters {cfg.max_iters}; nothing to do")
            return TrainResult(None, [], start)
        if start == 0:
            self.init_pseudo_inputs()

        log_file = None
        if self.run is not None:
            if start > 0:
                _truncate_log(self.run.log_path, start)
            log_file = open(self.run.log_path, "a" if start > 0 else "w", encoding="utf-8")
        final_checkpoint = None
        try:
            steps = tqdm(
                range(start + 1, cfg.max_iters + 1),
                initial=start,
                total=cfg.max_iters,
                desc=f"train {cfg.variant.value}",
                disable=not self.show_progress,
            )
            for iteration in steps:
                record = self.step(iteration)
                self.iteration = iteration
                self.records.append(record)
                if log_file is not None:
                    log_file.write(record.to_json() + "\n")
                    log_file.flush()
                if iteration % cfg.log_every == 0 or iteration == start + 1:
                    logger.info(
                        f"iter {iteration:>7}  loss {record.total_loss:.4f}  recon_ll {record.recon_ll:.2f}  "
                        f"kl {sum(record.kl_per_layer):.3f}  beta {record.beta:.3g}  mse {record.recon_mse:.4f}  "
                        f"({record.wall_ms:.1f} ms)"
                    )
                if iteration % cfg.checkpoint_every == 0 or iteration == cfg.max_iters:
                    final_checkpoint = self.save()
        finally:
            if log_file is not None:
                log_file.close()

        logger.info("=" * 70)
        logger.info(f"✅ TRAINING COMPLETED at iteration {self.iteration}")
        if self.records:
            first, last = self.records[0], self.records[-1]
            logger.info(f"Recon MSE: {first.recon_mse:.4f} (iter {first.iteration}) -> {last.recon_mse:.4f}")
        logger.info("=" * 70)
        return TrainResult(final_checkpoint, list(self.records), self.iteration)


def train(
    cfg: RunConfig,
    run: Optional[RunDirectory] = None,
    dataset: Optional[PhantomDataset] = None,
    show_progress: bool = False,
) -> TrainResult:
    """Fresh run from iteration 0"""
    return HVAETrainer(cfg, dataset, run, show_progress).train()


def resume(
    checkpoint: Union[str, Path],
    cfg: RunConfig,
    run: Optional[RunDirectory] = None,
    dataset: Optional[PhantomDataset] = None,
    show_progress: bool = False,
) -> TrainResult:
    """Continue a run from ``checkpoint`` up to ``cfg.max_iters``"""
    trainer = HVAETrainer(cfg, dataset, run, show_progress)
    trainer.load(checkpoint)
    return trainer.train()


def load_model(checkpoint: Union[str, Path]) -> HierarchicalVAE:
    """Model rebuilt from the configuration stored in ``checkpoint``, in eval mode"""
    ckpt = load_checkpoint(checkpoint)
    model = HierarchicalVAE.from_config(ckpt.config)
    restore(ckpt, model)
    model.eval()
    return model
