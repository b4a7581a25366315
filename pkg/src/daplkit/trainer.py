"""Prompt training loop: SGD on prompt parameters with frozen encoders.

One epoch is one pass over the source set; target batches are drawn
cyclically alongside. Gradients come from reverse-mode differentiation
of the composed loss; encoders and class tokens never receive updates.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import torch

from .data import Dataset
from .encoders import DTYPE, TokenTable, manual_prompt_features
from .objectives import (
    PseudoLabelConfig,
    PseudoLabelSet,
    PseudoRefresh,
    generate_pseudo_labels,
    source_loss,
    target_loss,
    total_loss,
)
from .prompts import PromptBank, PromptConfig, all_prompt_features


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 32
    lr0: float = 0.003
    seed: int = 0
    temperature: float = 0.1
    prompt_cfg: PromptConfig | None = None
    pseudo_cfg: PseudoLabelConfig = field(default_factory=PseudoLabelConfig)
    eval_mode: str = "mod_k"

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr0 < 0:
            raise ValueError("lr0 must be nonnegative")


@dataclass
class EpochMetrics:
    epoch: int
    ls: float
    lu: float
    target_accuracy: float
    lr: float


@dataclass
class TrainResult:
    bank: PromptBank
    metrics: list[EpochMetrics]
    pseudo: PseudoLabelSet
    wall_time: float
    diverged: bool = False


def cosine_lr(epoch: int, total_epochs: int, lr0: float) -> float:
    """lr0 * (1 + cos(pi * epoch / total_epochs)) / 2."""
    if not 0 <= epoch < total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs})")
    return lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs)) / 2.0


def encoder_state_hash(*encoders) -> str:
    """SHA-256 over the raw bytes of every encoder tensor, in order."""
    h = hashlib.sha256()
    for enc in encoders:
        for t in enc.tensors():
            h.update(t.detach().numpy().tobytes())
    return h.hexdigest()


def prompt_gradients(
    bank: PromptBank,
    source_feats: torch.Tensor,
    source_labels: torch.Tensor,
    target_feats: torch.Tensor,
    pseudo_batch: list,
    text_enc,
    temperature: float,
) -> tuple[dict[str, torch.Tensor], float, float]:
    """Gradients of the total loss w.r.t. the bank's learnable blocks.

    Returns (grads, ls, lu). Class tokens and encoder weights are outside
    the differentiated parameter set by construction.
    """
    params = bank.learnable()
    for p in params.values():
        if p.grad is not None:
            p.grad = None
    prompt_feats = all_prompt_features(bank, text_enc)
    ls = source_loss(source_feats, source_labels, prompt_feats, temperature)
    if target_feats.shape[0] > 0:
        lu = target_loss(target_feats, pseudo_batch, prompt_feats, temperature)
    else:
        lu = torch.zeros((), dtype=DTYPE)
    loss = total_loss(ls, lu)
    if not torch.isfinite(loss):
        raise FloatingPointError(
            f"non-finite loss (ls={float(ls)!r}, lu={float(lu)!r})"
        )
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in params.items()
    }
    return grads, float(ls.detach()), float(lu.detach())


def sgd_step(bank: PromptBank, grads: dict[str, torch.Tensor], lr: float) -> None:
    """In-place p <- p - lr * grad on each learnable block."""
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    with torch.no_grad():
        for name, p in bank.learnable().items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape mismatch for {name}")
            p -= lr * g


def _target_accuracy(bank, text_enc, target_feats, hidden_labels, temperature, mode):
    from .diagnostics import predict_classes

    preds = predict_classes(bank, text_enc, target_feats, temperature, mode)
    return float((preds == hidden_labels).to(torch.float64).mean())


def train(
    cfg: TrainConfig,
    source: Dataset,
    target: Dataset,
    image_enc,
    text_enc,
    table: TokenTable,
    bank: PromptBank | None = None,
    eval_target: Dataset | None = None,
) -> TrainResult:
    """Full training run; deterministic per seed.

    ``target`` is consumed through its label-stripped view; per-epoch
    target accuracy is reported only when ``eval_target`` (a dataset that
    retains hidden labels) is supplied.
    """
    if len(source) == 0 or len(target) == 0:
        raise ValueError("datasets must be nonempty")
    if source.class_names != target.class_names:
        raise ValueError("domains must share the same class set")
    t0 = time.perf_counter()
    prompt_cfg = cfg.prompt_cfg
    if prompt_cfg is None:
        raise ValueError("train config needs a prompt config")
    if bank is None:
        bank = PromptBank.from_table(prompt_cfg, table, source.class_names, cfg.seed)

    target_view = target.train_view()
    src_x = source.inputs_tensor()
    tgt_x = target_view.inputs_tensor()
    with torch.no_grad():
        src_feats = image_enc.encode(src_x)
        tgt_feats = image_enc.encode(tgt_x)
        manual_feats = manual_prompt_features(table, source.class_names, text_enc)
    src_labels = torch.from_numpy(source.labels).to(torch.long)

    pseudo = generate_pseudo_labels(tgt_feats, manual_feats, cfg.temperature, cfg.pseudo_cfg)

    g = torch.Generator()
    g.manual_seed(cfg.seed)
    ns, nu = len(source), len(target_view)
    metrics: list[EpochMetrics] = []
    diverged = False
    last_good = bank.clone()
    tgt_cursor = 0
    tgt_order = torch.randperm(nu, generator=g)

    for epoch in range(cfg.epochs):
        if cfg.pseudo_cfg.refresh is PseudoRefresh.PER_EPOCH and epoch > 0:
            with torch.no_grad():
                learned = all_prompt_features(bank, text_enc)
            pseudo = generate_pseudo_labels(
                tgt_feats, learned, cfg.temperature, cfg.pseudo_cfg, two_k=True
            )
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr0)
        order = torch.randperm(ns, generator=g)
        ls_sum = lu_sum = 0.0
        steps = 0
        try:
            for start in range(0, ns, cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                bsz = len(idx)
                tidx = []
                for _ in range(bsz):
                    if tgt_cursor >= nu:
                        tgt_order = torch.randperm(nu, generator=g)
                        tgt_cursor = 0
                    tidx.append(int(tgt_order[tgt_cursor]))
                    tgt_cursor += 1
                grads, ls, lu = prompt_gradients(
                    bank,
                    src_feats[idx],
                    src_labels[idx],
                    tgt_feats[tidx],
                    [pseudo[i] for i in tidx],
                    text_enc,
                    cfg.temperature,
                )
                sgd_step(bank, grads, lr)
                ls_sum += ls
                lu_sum += lu
                steps += 1
        except FloatingPointError:
            diverged = True
            bank = last_good
        acc = math.nan
        if eval_target is not None:
            acc = _target_accuracy(
                bank,
                text_enc,
                tgt_feats,
                torch.from_numpy(eval_target.hidden_labels).to(torch.long),
                cfg.temperature,
                cfg.eval_mode,
            )
        metrics.append(
            EpochMetrics(epoch, ls_sum / max(steps, 1), lu_sum / max(steps, 1), acc, lr)
        )
        if diverged:
            break
        last_good = bank.clone()

    return TrainResult(bank, metrics, pseudo, time.perf_counter() - t0, diverged)
