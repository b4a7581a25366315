"""Evaluation and diagnostics: per-class accuracy, positive-pair
dominance over the (domain, class) prompt grid, and ground-truth-class
confidence per prompt variant."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch

from .head import class_probabilities, cosine_matrix, marginalize_to_classes
from .prompts import DomainId, PromptBank, all_prompt_features

EVAL_MODES = ("mod_k", "marginal", "target_only")


def predict_classes(
    bank: PromptBank,
    text_enc,
    img_feats: torch.Tensor,
    temperature: float,
    mode: str = "mod_k",
) -> torch.Tensor:
    """K-way class predictions for a batch of image features.

    mode 'mod_k': argmax over the 2K grid, reduced to the class index;
    'marginal': argmax of the domain-marginalized K-way distribution;
    'target_only': argmax over the target-domain prompts alone.
    """
    if mode not in EVAL_MODES:
        raise ValueError(f"unknown eval mode {mode!r}")
    with torch.no_grad():
        prompt_feats = all_prompt_features(bank, text_enc)
        k = bank.cfg.k
        if mode == "target_only":
            probs = class_probabilities(img_feats, prompt_feats[k:], temperature)
            return torch.argmax(probs, dim=-1)
        probs = class_probabilities(img_feats, prompt_feats, temperature)
        if mode == "marginal":
            return torch.argmax(marginalize_to_classes(probs), dim=-1)
        return torch.argmax(probs, dim=-1) % k


@dataclass
class EvalResult:
    per_class: list[float]
    macro: float
    micro: float


def evaluate(
    bank: PromptBank,
    text_enc,
    img_feats: torch.Tensor,
    labels: torch.Tensor,
    temperature: float,
    mode: str = "mod_k",
) -> EvalResult:
    """Per-class accuracy plus macro (mean over classes) and micro averages."""
    preds = predict_classes(bank, text_enc, img_feats, temperature, mode)
    k = bank.cfg.k
    per_class: list[float] = []
    present: list[float] = []
    for c in range(k):
        mask = labels == c
        if not mask.any():
            warnings.warn(f"class {c} has no samples; excluded from macro mean")
            per_class.append(float("nan"))
            continue
        acc = float((preds[mask] == c).to(torch.float64).mean())
        per_class.append(acc)
        present.append(acc)
    macro = sum(present) / len(present) if present else float("nan")
    micro = float((preds == labels).to(torch.float64).mean())
    return EvalResult(per_class, macro, micro)


@dataclass
class PairSimilarityReport:
    """Per-probe cosine grid over the 2K prompts and dominance summary."""

    sims: torch.Tensor  # (N, 2K)
    domains: torch.Tensor  # (N,) 0=source, 1=target
    classes: torch.Tensor  # (N,)
    dominant: torch.Tensor  # (N,) bool
    dominance_fraction: float
    positive_margins: torch.Tensor  # (N,) positive sim minus best negative


def disentanglement_report(
    bank: PromptBank,
    text_enc,
    probe_feats: torch.Tensor,
    probe_domains: torch.Tensor,
    probe_classes: torch.Tensor,
) -> PairSimilarityReport:
    """For each probe, similarity to every (domain, class) prompt and
    whether the true pair strictly beats all mismatched pairs."""
    with torch.no_grad():
        prompt_feats = all_prompt_features(bank, text_enc)
        sims = cosine_matrix(probe_feats, prompt_feats)
    k = bank.cfg.k
    n = probe_feats.shape[0]
    pos_col = probe_domains.to(torch.long) * k + probe_classes.to(torch.long)
    pos = sims[torch.arange(n), pos_col]
    neg = sims.clone()
    neg[torch.arange(n), pos_col] = -torch.inf
    best_neg = neg.max(dim=-1).values
    dominant = pos > best_neg
    return PairSimilarityReport(
        sims=sims,
        domains=probe_domains,
        classes=probe_classes,
        dominant=dominant,
        dominance_fraction=float(dominant.to(torch.float64).mean()),
        positive_margins=pos - best_neg,
    )


@dataclass
class ConfidenceReport:
    """Ground-truth-class confidence per prompt variant per image."""

    variant_names: list[str]
    confidences: torch.Tensor  # (V, N)

    def mean_confidence(self) -> dict[str, float]:
        return {
            name: float(self.confidences[i].mean())
            for i, name in enumerate(self.variant_names)
        }


def confidence_report(
    variants: dict[str, PromptBank],
    text_enc,
    img_feats: torch.Tensor,
    labels: torch.Tensor,
    temperature: float,
) -> ConfidenceReport:
    """2K-way probabilities marginalized over domains, read at the true class."""
    if not variants:
        raise ValueError("need at least one prompt variant")
    n = img_feats.shape[0]
    rows = []
    for bank in variants.values():
        with torch.no_grad():
            prompt_feats = all_prompt_features(bank, text_enc)
            probs = marginalize_to_classes(
                class_probabilities(img_feats, prompt_feats, temperature)
            )
        rows.append(probs[torch.arange(n), labels.to(torch.long)])
    return ConfidenceReport(list(variants), torch.stack(rows))
