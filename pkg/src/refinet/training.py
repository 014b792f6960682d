"""Simultaneous boundary-equilibrium training of the refiner and its critic."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

from . import backend as B
from .backend import AdamState
from .data import Dataset, ImagePyramid, batch_for_step
from .losses import (
    LossReport,
    LossWeights,
    convergence_measure,
    discriminator_loss,
    generator_loss,
    loss_gan,
    reconstruction_loss,
    update_k,
)
from .models import (
    DiscriminatorConfig,
    GeneratorConfig,
    ModelGraph,
    build_discriminator,
    build_generator,
    forward,
)

logger = logging.getLogger(__name__)

LOG_NAME = "log.csv"


class NonFiniteLossError(RuntimeError):
    def __init__(self, report: LossReport):
        super().__init__(f"non-finite loss at step {report.step}: {report.to_dict()}")
        self.report = report


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 0.001
    batch_size: int = 25
    total_steps: int = 1000
    seed: int = 0
    target_res: int = 32
    lowest_res: int = 8
    variant: str = "B"
    base_filters: int = 16
    embedding_dim: int = 64
    convs_per_block: int = 2
    injection_mask: tuple[bool, ...] | None = None
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.log_every < 1:
            raise ValueError(f"log_every must be >= 1, got {self.log_every}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")
        if self.injection_mask is not None:
            object.__setattr__(self, "injection_mask", tuple(bool(m) for m in self.injection_mask))
        # fail early on bad model settings
        self.discriminator_config()
        self.generator_config()

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(self.target_res, self.base_filters, self.embedding_dim, self.convs_per_block)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(self.variant, self.target_res, self.base_filters, self.lowest_res,
                               self.convs_per_block, self.injection_mask)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "weights"}
        d.update(asdict(self.weights))
        if d["injection_mask"] is not None:
            d["injection_mask"] = list(d["injection_mask"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        wkeys = [f.name for f in fields(LossWeights)]
        weights = LossWeights(**{k: d.pop(k) for k in wkeys if k in d})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(weights=weights, **d)


@dataclass
class TrainState:
    config: TrainConfig
    discriminator: ModelGraph
    generator: ModelGraph
    adam_d: AdamState
    adam_g: AdamState
    step: int = 0
    k_t: float = 0.0

    @property
    def seed(self) -> int:
        # batch order is a pure function of (seed, step), so this is the full RNG state
        return self.config.seed


def init_state(cfg: TrainConfig) -> TrainState:
    disc = build_discriminator(cfg.discriminator_config(), seed=[cfg.seed, 1])
    gen = build_generator(cfg.generator_config(), seed=[cfg.seed, 2])
    return TrainState(cfg, disc, gen, AdamState(lr=cfg.lr), AdamState(lr=cfg.lr))


def train_step(state: TrainState, batch: ImagePyramid) -> tuple[TrainState, LossReport]:
    """One simultaneous update of both networks from a single forward pass.

    The same real images serve as the critic's real input and as the
    reconstruction target; the generator sees only their pyramid.
    """
    cfg = state.config
    w = cfg.weights
    D, G = state.discriminator, state.generator
    x = batch.source_hr
    if x is None:
        raise ValueError("training batches need the high-resolution source images")

    gz = forward(G, batch)

    # critic objective: G(z) is a constant here
    gz_const = gz.detach()
    L_x = loss_gan(x, forward(D, x))
    L_gz = loss_gan(gz_const, forward(D, gz_const))
    L_D = discriminator_loss(L_x, L_gz, state.k_t)

    # generator objective: the critic's parameters are constants here
    L_rcn = reconstruction_loss(x, gz)
    if w.lambda_r < 1.0:
        L_gz_g = loss_gan(gz, forward(D, gz, trainable=False))
        L_G = generator_loss(L_gz_g, L_rcn, w.lambda_r)
    else:
        L_G = generator_loss(B.Tensor(L_gz.data), L_rcn, w.lambda_r)

    lx, lgz = L_x.item(), L_gz.item()
    report = LossReport(
        step=state.step + 1,
        L_gan_x=lx,
        L_gan_gz=lgz,
        L_rcn=L_rcn.item(),
        L_D=L_D.item(),
        L_G=L_G.item(),
        k_t=state.k_t,
        M=convergence_measure(lx, lgz, w.gamma),
    )
    if not report.is_finite():
        raise NonFiniteLossError(report)

    D.zero_grad()
    G.zero_grad()
    B.backward(L_D)
    B.backward(L_G)
    B.adam_step(D.params, state.adam_d)
    B.adam_step(G.params, state.adam_g)

    state.k_t = update_k(state.k_t, w, lx, lgz)
    state.step += 1
    return state, report


def _open_log(path: Path, fresh: bool):
    exists = path.exists() and path.stat().st_size > 0
    fh = open(path, "w" if fresh else "a", newline="")
    writer = csv.writer(fh)
    if fresh or not exists:
        writer.writerow(LossReport.CSV_HEADER)
    return fh, writer


def checkpoint_path(out_dir, step: int) -> Path:
    return Path(out_dir) / f"ckpt_{step:06d}.rfnt"


def train(
    cfg: TrainConfig,
    dataset: Dataset,
    out_dir,
    state: TrainState | None = None,
    callback: Callable[[TrainState, LossReport], None] | None = None,
) -> TrainState:
    """Run until ``cfg.total_steps``, logging to log.csv and checkpointing on schedule.

    Passing a restored ``state`` resumes: rows are appended to the existing log.
    The final step is always checkpointed.
    """
    from .checkpoint import save_checkpoint

    if dataset.target_res != cfg.target_res:
        raise ValueError(f"dataset resolution {dataset.target_res} != config target_res {cfg.target_res}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fresh = state is None
    if state is None:
        state = init_state(cfg)
    elif state.config != replace(cfg, total_steps=state.config.total_steps,
                                 checkpoint_every=state.config.checkpoint_every,
                                 log_every=state.config.log_every):
        raise ValueError("resumed state was trained with a different configuration")
    else:
        state.config = cfg

    fh, writer = _open_log(out_dir / LOG_NAME, fresh)
    try:
        while state.step < cfg.total_steps:
            batch = batch_for_step(dataset, cfg.batch_size, cfg.seed, state.step, cfg.lowest_res)
            state, report = train_step(state, batch)
            if report.step % cfg.log_every == 0:
                writer.writerow(report.csv_row())
                fh.flush()
            if report.step % 100 == 0:
                logger.info("step %d L_D=%.4f L_G=%.4f k=%.5f", report.step, report.L_D, report.L_G, report.k_t)
            due = cfg.checkpoint_every and report.step % cfg.checkpoint_every == 0
            if due or report.step == cfg.total_steps:
                save_checkpoint(state, checkpoint_path(out_dir, report.step))
            if callback is not None:
                callback(state, report)
    finally:
        fh.close()
    return state


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "step" else float(v)) for k, v in row.items()} for row in rows]


def all_finite(rows: list[dict]) -> bool:
    return all(math.isfinite(v) for row in rows for v in row.values())
