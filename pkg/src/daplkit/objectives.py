"""Training objectives: source cross-entropy, gated target loss, pseudo labels.

The source loss is a cross-entropy over the 2K-way (domain, class) softmax
with the (SOURCE, y) prompt as the positive. Target samples get pseudo
labels from zero-shot inference under manual prompts; only labels whose
confidence clears the threshold contribute to the target loss, which
normalizes by the full sample count.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch

from .head import class_probabilities, marginalize_to_classes


class PseudoRefresh(str, Enum):
    ONCE_BEFORE_TRAINING = "once"
    PER_EPOCH = "per_epoch"


@dataclass(frozen=True)
class PseudoLabelConfig:
    tau: float = 0.6
    refresh: PseudoRefresh = PseudoRefresh.ONCE_BEFORE_TRAINING

    def __post_init__(self):
        # tau slightly above 1 is allowed as an explicit "accept nothing"
        if not 0.0 <= self.tau <= 1.5:
            raise ValueError("tau must lie in [0, 1] (or just above 1 to disable)")


@dataclass(frozen=True)
class PseudoLabel:
    index: int
    label: int
    confidence: float
    accepted: bool


class PseudoLabelSet:
    """Per-target-sample pseudo labels with acceptance flags."""

    def __init__(self, entries: list[PseudoLabel], tau: float):
        self.entries = entries
        self.tau = tau

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i: int) -> PseudoLabel:
        return self.entries[i]

    @property
    def accepted_count(self) -> int:
        return sum(e.accepted for e in self.entries)

    def labels_tensor(self) -> torch.Tensor:
        return torch.tensor([e.label for e in self.entries], dtype=torch.long)

    def accepted_mask(self) -> torch.Tensor:
        return torch.tensor([e.accepted for e in self.entries], dtype=torch.bool)

    def to_text(self) -> str:
        lines = [f"# tau {self.tau!r}", "# index label confidence accepted"]
        for e in self.entries:
            lines.append(f"{e.index} {e.label} {e.confidence!r} {int(e.accepted)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PseudoLabelSet":
        tau = None
        entries = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            if line.startswith("# tau"):
                tau = float(line.split()[2])
                continue
            if line.startswith("#"):
                continue
            idx, label, conf, acc = line.split()
            entries.append(PseudoLabel(int(idx), int(label), float(conf), bool(int(acc))))
        if tau is None:
            raise ValueError("missing tau header")
        return cls(entries, tau)


def generate_pseudo_labels(
    target_feats: torch.Tensor,
    prompt_feats: torch.Tensor,
    temperature: float,
    cfg: PseudoLabelConfig,
    two_k: bool = False,
) -> PseudoLabelSet:
    """Zero-shot pseudo labels for every target sample.

    By default the confidence is the max of the K-way distribution over
    the given (K, D) prompt features. With ``two_k=True`` the prompts are
    the full 2K grid and the distribution is marginalized over domains
    first (used by per-epoch refresh with learned prompts).
    """
    if prompt_feats.shape[0] < 2:
        raise ValueError("need at least two prompts")
    probs = class_probabilities(target_feats, prompt_feats, temperature).detach()
    if two_k:
        probs = marginalize_to_classes(probs)
    conf, labels = probs.max(dim=-1)
    entries = [
        PseudoLabel(i, int(labels[i]), float(conf[i]), bool(conf[i] >= cfg.tau))
        for i in range(target_feats.shape[0])
    ]
    return PseudoLabelSet(entries, cfg.tau)


def source_loss(
    img_feats: torch.Tensor,
    labels: torch.Tensor,
    prompt_feats: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """Mean negative log-probability of the (SOURCE, y) prompt, 2K-way."""
    n = img_feats.shape[0]
    if n == 0:
        raise ValueError("empty source batch")
    k = prompt_feats.shape[0] // 2
    if (labels < 0).any() or (labels >= k).any():
        raise ValueError("label out of range")
    probs = class_probabilities(img_feats, prompt_feats, temperature)
    picked = probs[torch.arange(n), labels]
    return -torch.log(picked).mean()


def target_loss(
    img_feats: torch.Tensor,
    pseudo: list[PseudoLabel],
    prompt_feats: torch.Tensor,
    temperature: float,
) -> torch.Tensor:
    """Gated cross-entropy toward the (TARGET, pseudo-label) prompt.

    Rejected samples contribute zero; the normalizer is the full batch
    count, accepted or not.
    """
    n = img_feats.shape[0]
    if n != len(pseudo):
        raise ValueError("pseudo labels do not align with batch")
    k = prompt_feats.shape[0] // 2
    accepted = [i for i, e in enumerate(pseudo) if e.accepted]
    if not accepted:
        return torch.zeros((), dtype=img_feats.dtype)
    probs = class_probabilities(img_feats[accepted], prompt_feats, temperature)
    cols = torch.tensor([k + pseudo[i].label for i in accepted], dtype=torch.long)
    picked = probs[torch.arange(len(accepted)), cols]
    return -torch.log(picked).sum() / n


def total_loss(ls: torch.Tensor, lu: torch.Tensor) -> torch.Tensor:
    """Sum of the source and (gated) target losses."""
    return ls + lu
