"""Frozen image/text encoders and the fixed token embedding table.

All encoders are deterministic functions of (seed, dims) and are never
updated during training; only prompt parameters learn. The text encoders
accept continuous embedding sequences so learned prompt vectors can flow
through them with gradients intact.
"""

from __future__ import annotations

import math
from typing import Sequence

import torch

DTYPE = torch.float64

MANUAL_TEMPLATE = ("a", "photo", "of", "a")


class VocabularyError(KeyError):
    """A word is not in the closed vocabulary."""


def _generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def _check_input(x: torch.Tensor, dim: int, what: str) -> None:
    if x.shape[-1] != dim:
        raise ValueError(f"{what}: expected last dim {dim}, got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise ValueError(f"{what}: non-finite entries")


class ImageEncoder:
    """Small frozen two-layer network: input vector -> D-dim feature.

    With ``linear=True`` and ``bias=False`` the map is purely linear,
    which is convenient for tests.
    """

    def __init__(
        self,
        input_dim: int,
        feature_dim: int,
        seed: int,
        hidden_dim: int | None = None,
        linear: bool = False,
        bias: bool = True,
    ):
        self.input_dim = input_dim
        self.feature_dim = feature_dim
        self.seed = seed
        self.linear = linear
        h = hidden_dim if hidden_dim is not None else max(input_dim, feature_dim)
        g = _generator(seed)
        self.w1 = torch.randn(input_dim, h, generator=g, dtype=DTYPE) / math.sqrt(input_dim)
        self.b1 = torch.randn(h, generator=g, dtype=DTYPE) * (0.1 if bias else 0.0)
        self.w2 = torch.randn(h, feature_dim, generator=g, dtype=DTYPE) / math.sqrt(h)
        self.b2 = torch.randn(feature_dim, generator=g, dtype=DTYPE) * (0.1 if bias else 0.0)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Encode a single input (input_dim,) or a batch (N, input_dim)."""
        _check_input(x, self.input_dim, "image input")
        h = x @ self.w1 + self.b1
        if not self.linear:
            h = torch.tanh(h)
        return h @ self.w2 + self.b2

    def tensors(self) -> list[torch.Tensor]:
        return [self.w1, self.b1, self.w2, self.b2]


class OracleImageEncoder:
    """Identity (or fixed orthonormal projection) image encoder.

    Lets the synthetic data generator plant class/domain structure
    directly in feature space; the default backbone for acceptance runs.
    """

    def __init__(self, input_dim: int, feature_dim: int, seed: int = 0):
        self.input_dim = input_dim
        self.feature_dim = feature_dim
        self.seed = seed
        if input_dim == feature_dim:
            self.proj = torch.eye(input_dim, dtype=DTYPE)
        else:
            g = _generator(seed)
            q, _ = torch.linalg.qr(
                torch.randn(max(input_dim, feature_dim), max(input_dim, feature_dim),
                            generator=g, dtype=DTYPE)
            )
            self.proj = q[:input_dim, :feature_dim].contiguous()

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        _check_input(x, self.input_dim, "image input")
        return x @ self.proj

    def tensors(self) -> list[torch.Tensor]:
        return [self.proj]


class TextEncoder:
    """Frozen position-sensitive sequence encoder.

    Per-position affine mix with tanh nonlinearity, mean pooling, and a
    linear readout to the shared feature space. Differentiable with
    respect to the input embedding sequence.
    """

    def __init__(
        self,
        embed_dim: int,
        feature_dim: int,
        max_seq_len: int,
        seed: int,
        hidden_dim: int | None = None,
    ):
        self.embed_dim = embed_dim
        self.feature_dim = feature_dim
        self.max_seq_len = max_seq_len
        self.seed = seed
        h = hidden_dim if hidden_dim is not None else max(embed_dim, feature_dim)
        g = _generator(seed)
        self.w1 = torch.randn(embed_dim, h, generator=g, dtype=DTYPE) / math.sqrt(embed_dim)
        self.pos = torch.randn(max_seq_len, h, generator=g, dtype=DTYPE) * 0.1
        self.w2 = torch.randn(h, feature_dim, generator=g, dtype=DTYPE) / math.sqrt(h)
        self.b2 = torch.randn(feature_dim, generator=g, dtype=DTYPE) * 0.1

    def _check_len(self, length: int) -> None:
        if length > self.max_seq_len:
            raise ValueError(
                f"sequence length {length} exceeds max_seq_len {self.max_seq_len}"
            )

    def encode(self, seq: torch.Tensor) -> torch.Tensor:
        """Encode one (L, E) sequence to a (D,) feature."""
        _check_input(seq, self.embed_dim, "text sequence")
        self._check_len(seq.shape[0])
        h = torch.tanh(seq @ self.w1 + self.pos[: seq.shape[0]])
        return h.mean(dim=0) @ self.w2 + self.b2

    def encode_batch(self, seqs: torch.Tensor) -> torch.Tensor:
        """Encode a (B, L, E) stack of equal-length sequences to (B, D)."""
        _check_input(seqs, self.embed_dim, "text sequence")
        self._check_len(seqs.shape[1])
        h = torch.tanh(seqs @ self.w1 + self.pos[: seqs.shape[1]])
        return h.mean(dim=1) @ self.w2 + self.b2

    def tensors(self) -> list[torch.Tensor]:
        return [self.w1, self.pos, self.w2, self.b2]


class OracleTextEncoder:
    """Pooling + fixed orthogonal projection text encoder.

    Pools a weighted combination of the final row (the class token slot,
    mirroring the end-token readout of contrastive text encoders) and the
    mean of the remaining rows, then applies a fixed projection. Keeps
    the map from prompt rows to feature space transparent so synthetic
    tasks are learnable by prompts alone. Requires feature_dim <= embed_dim.
    """

    def __init__(self, embed_dim: int, feature_dim: int, seed: int = 0,
                 max_seq_len: int = 4096, last_row_weight: float = 0.5):
        if feature_dim > embed_dim:
            raise ValueError("oracle text encoder requires feature_dim <= embed_dim")
        if not 0.0 <= last_row_weight < 1.0:
            raise ValueError("last_row_weight must lie in [0, 1)")
        self.embed_dim = embed_dim
        self.feature_dim = feature_dim
        self.max_seq_len = max_seq_len
        self.seed = seed
        self.last_row_weight = last_row_weight
        g = _generator(seed)
        q, _ = torch.linalg.qr(torch.randn(embed_dim, embed_dim, generator=g, dtype=DTYPE))
        self.proj = q[:, :feature_dim].contiguous()

    def _pool(self, seqs: torch.Tensor) -> torch.Tensor:
        if seqs.shape[-2] == 1:
            return seqs[..., -1, :]
        w = self.last_row_weight
        return w * seqs[..., -1, :] + (1.0 - w) * seqs[..., :-1, :].mean(dim=-2)

    def encode(self, seq: torch.Tensor) -> torch.Tensor:
        _check_input(seq, self.embed_dim, "text sequence")
        if seq.shape[0] > self.max_seq_len:
            raise ValueError("sequence too long")
        return self._pool(seq) @ self.proj

    def encode_batch(self, seqs: torch.Tensor) -> torch.Tensor:
        _check_input(seqs, self.embed_dim, "text sequence")
        if seqs.shape[1] > self.max_seq_len:
            raise ValueError("sequence too long")
        return self._pool(seqs) @ self.proj

    def tensors(self) -> list[torch.Tensor]:
        return [self.proj]


class TokenTable:
    """Closed-vocabulary embedding table with seed-derived fixed rows.

    Rows are i.i.d. Gaussian with std 1/sqrt(E), a scale-controlled
    stand-in for pretrained word embeddings.
    """

    def __init__(self, vocabulary: Sequence[str], embed_dim: int, seed: int):
        seen: dict[str, int] = {}
        for w in vocabulary:
            if w not in seen:
                seen[w] = len(seen)
        self.vocabulary = list(seen)
        self.index = seen
        self.embed_dim = embed_dim
        self.seed = seed
        g = _generator(seed)
        self.embeddings = torch.randn(
            len(self.vocabulary), embed_dim, generator=g, dtype=DTYPE
        ) / math.sqrt(embed_dim)

    @classmethod
    def for_classes(cls, class_names: Sequence[str], embed_dim: int, seed: int) -> "TokenTable":
        """Table covering the manual template plus the given class names."""
        return cls(list(MANUAL_TEMPLATE) + list(class_names), embed_dim, seed)

    def embed(self, words: Sequence[str]) -> torch.Tensor:
        """Look up a word sequence as an (L, E) matrix."""
        rows = []
        for w in words:
            if w not in self.index:
                raise VocabularyError(f"unknown word {w!r}")
            rows.append(self.embeddings[self.index[w]])
        if not rows:
            return torch.zeros(0, self.embed_dim, dtype=DTYPE)
        return torch.stack(rows)

    def manual_prompt(self, class_name: str) -> torch.Tensor:
        """Embedding sequence of the fixed template with the class token appended."""
        return self.embed(list(MANUAL_TEMPLATE) + [class_name])


def manual_prompt_features(table: TokenTable, class_names: Sequence[str],
                           text_enc) -> torch.Tensor:
    """(K, D) features of the manual prompts for the given classes."""
    seqs = torch.stack([table.manual_prompt(c) for c in class_names])
    return text_enc.encode_batch(seqs)
