"""Cosine-similarity contrastive head.

Temperature softmax over prompt features: K-way for zero-shot inference
and 2K-way over the (domain, class) prompt grid for training. Features
are normalized inside the cosine op; encoders emit raw vectors.
"""

from __future__ import annotations

import torch


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine of two nonzero vectors, in [-1, 1]."""
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity undefined for zero vector")
    return (a @ b) / (na * nb)


def cosine_matrix(feats: torch.Tensor, prompts: torch.Tensor) -> torch.Tensor:
    """(N, M) cosines between image features (N, D) and prompts (M, D)."""
    nf = torch.linalg.vector_norm(feats, dim=-1, keepdim=True)
    np_ = torch.linalg.vector_norm(prompts, dim=-1, keepdim=True)
    if (nf == 0).any() or (np_ == 0).any():
        raise ValueError("cosine similarity undefined for zero vector")
    return (feats / nf) @ (prompts / np_).T


def _softmax(sims: torch.Tensor, temperature: float) -> torch.Tensor:
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if not torch.isfinite(sims).all():
        raise ValueError("non-finite similarities")
    logits = sims / temperature
    logits = logits - logits.max(dim=-1, keepdim=True).values
    e = torch.exp(logits)
    return e / e.sum(dim=-1, keepdim=True)


def class_probabilities(
    feats: torch.Tensor, prompt_feats: torch.Tensor, temperature: float
) -> torch.Tensor:
    """Softmax over cosine similarities; works for K-way and 2K-way prompt sets.

    feats: (D,) or (N, D); prompt_feats: (M, D). Returns (M,) or (N, M).
    """
    single = feats.dim() == 1
    sims = cosine_matrix(feats.unsqueeze(0) if single else feats, prompt_feats)
    probs = _softmax(sims, temperature)
    return probs[0] if single else probs


# Aliases naming the two label spaces used throughout training/evaluation.
zero_shot_probabilities = class_probabilities
two_k_probabilities = class_probabilities


def predict(probs: torch.Tensor) -> int:
    """Index of the maximum probability; ties break to the lowest index."""
    return int(torch.argmax(probs).item())


def predict_batch(probs: torch.Tensor) -> torch.Tensor:
    return torch.argmax(probs, dim=-1)


def marginalize_to_classes(probs: torch.Tensor) -> torch.Tensor:
    """Collapse a 2K-way (source block | target block) distribution to K-way."""
    n = probs.shape[-1]
    if n % 2 != 0:
        raise ValueError(f"expected even length, got {n}")
    k = n // 2
    return probs[..., :k] + probs[..., k:]
