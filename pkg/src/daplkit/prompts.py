"""Learnable prompt contexts and prompt sequence assembly.

A prompt for (domain, class) is the row-concatenation
``[shared context | domain context | class token]``. The shared context
is either one block reused by every class (unified) or one block per
class (class-specific); the domain context exists only in DSC modes and
is selected by the domain indicator.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import torch

from .encoders import DTYPE, TokenTable, MANUAL_TEMPLATE


class PromptMode(str, Enum):
    MANUAL = "MANUAL"
    UNIFIED = "UNIFIED"
    CLASS_SPECIFIC = "CLASS_SPECIFIC"
    UNIFIED_DSC = "UNIFIED_DSC"
    CLASS_SPECIFIC_DSC = "CLASS_SPECIFIC_DSC"


DSC_MODES = {PromptMode.UNIFIED_DSC, PromptMode.CLASS_SPECIFIC_DSC}
CLASS_SPECIFIC_MODES = {PromptMode.CLASS_SPECIFIC, PromptMode.CLASS_SPECIFIC_DSC}


class DomainId(Enum):
    SOURCE = 0
    TARGET = 1


@dataclass(frozen=True)
class PromptConfig:
    mode: PromptMode
    m1: int
    m2: int
    k: int
    embed_dim: int
    init_std: float = 0.02

    def __post_init__(self):
        if self.m1 < 0 or self.m2 < 0:
            raise ValueError("context lengths must be nonnegative")
        if self.k < 1:
            raise ValueError("need at least one class")
        has_dsc = self.mode in DSC_MODES
        if has_dsc and self.m2 <= 0:
            raise ValueError(f"{self.mode.value} requires m2 > 0")
        if not has_dsc and self.m2 != 0:
            raise ValueError(f"{self.mode.value} requires m2 == 0")
        if self.mode is not PromptMode.MANUAL and self.m1 <= 0:
            raise ValueError(f"{self.mode.value} requires m1 > 0")

    @property
    def has_dsc(self) -> bool:
        return self.mode in DSC_MODES

    @property
    def class_specific(self) -> bool:
        return self.mode in CLASS_SPECIFIC_MODES

    @property
    def learnable_param_count(self) -> int:
        if self.mode is PromptMode.MANUAL:
            return 0
        v = (self.k if self.class_specific else 1) * self.m1 * self.embed_dim
        d = 2 * self.m2 * self.embed_dim if self.has_dsc else 0
        return v + d

    @property
    def seq_len(self) -> int:
        """Assembled prompt length: context rows plus one class-token row."""
        if self.mode is PromptMode.MANUAL:
            return len(MANUAL_TEMPLATE) + 1
        return self.m1 + self.m2 + 1


class PromptBank:
    """All learnable prompt parameters plus the fixed class-token rows.

    Learnable blocks: ``v`` (shared context, shape (M1, E) or (K, M1, E)),
    ``d_src`` and ``d_tgt`` (domain contexts, (M2, E) each). ``class_tokens``
    and the manual ``template`` rows are fixed and never receive updates.
    """

    def __init__(
        self,
        cfg: PromptConfig,
        v: torch.Tensor | None,
        d_src: torch.Tensor | None,
        d_tgt: torch.Tensor | None,
        class_tokens: torch.Tensor,
        template: torch.Tensor | None = None,
    ):
        self.cfg = cfg
        if class_tokens.shape != (cfg.k, cfg.embed_dim):
            raise ValueError("class_tokens shape mismatch")
        self.class_tokens = class_tokens.detach().clone()
        if template is None:
            template = torch.zeros(0, cfg.embed_dim, dtype=DTYPE)
        self.template = template.detach().clone()
        self.v = v
        self.d_src = d_src
        self.d_tgt = d_tgt
        if d_src is not None and d_tgt is not None and d_src is d_tgt:
            raise ValueError("d_src and d_tgt must be distinct parameter blocks")
        for t in self.learnable().values():
            t.requires_grad_(True)

    @classmethod
    def init(cls, cfg: PromptConfig, class_tokens: torch.Tensor, seed: int,
             template: torch.Tensor | None = None) -> "PromptBank":
        """Gaussian(0, init_std) initialization of every learnable block."""
        g = torch.Generator()
        g.manual_seed(seed)
        v = d_src = d_tgt = None
        if cfg.mode is not PromptMode.MANUAL:
            shape = (cfg.k, cfg.m1, cfg.embed_dim) if cfg.class_specific else (cfg.m1, cfg.embed_dim)
            v = torch.randn(shape, generator=g, dtype=DTYPE) * cfg.init_std
        if cfg.has_dsc:
            d_src = torch.randn(cfg.m2, cfg.embed_dim, generator=g, dtype=DTYPE) * cfg.init_std
            d_tgt = torch.randn(cfg.m2, cfg.embed_dim, generator=g, dtype=DTYPE) * cfg.init_std
        return cls(cfg, v, d_src, d_tgt, class_tokens, template)

    @classmethod
    def from_table(cls, cfg: PromptConfig, table: TokenTable,
                   class_names: list[str], seed: int) -> "PromptBank":
        """Build a bank whose class tokens come from the token table."""
        class_tokens = table.embed(class_names)
        template = table.embed(list(MANUAL_TEMPLATE))
        return cls.init(cfg, class_tokens, seed, template)

    def learnable(self) -> dict[str, torch.Tensor]:
        out = {}
        if self.v is not None:
            out["v"] = self.v
        if self.d_src is not None:
            out["d_src"] = self.d_src
        if self.d_tgt is not None:
            out["d_tgt"] = self.d_tgt
        return out

    def assemble(self, domain: DomainId, k: int) -> torch.Tensor:
        """Full (L, E) prompt sequence for one (domain, class) pair."""
        cfg = self.cfg
        if not 0 <= k < cfg.k:
            raise IndexError(f"class index {k} out of range [0, {cfg.k})")
        cls_row = self.class_tokens[k : k + 1]
        if cfg.mode is PromptMode.MANUAL:
            return torch.cat([self.template, cls_row])
        v = self.v[k] if cfg.class_specific else self.v
        blocks = [v]
        if cfg.has_dsc:
            blocks.append(self.d_src if domain is DomainId.SOURCE else self.d_tgt)
        blocks.append(cls_row)
        return torch.cat(blocks)

    def clone(self) -> "PromptBank":
        return PromptBank(
            self.cfg,
            None if self.v is None else self.v.detach().clone(),
            None if self.d_src is None else self.d_src.detach().clone(),
            None if self.d_tgt is None else self.d_tgt.detach().clone(),
            self.class_tokens,
            self.template,
        )


def all_prompt_features(bank: PromptBank, text_enc) -> torch.Tensor:
    """(2K, D) prompt features, source classes 0..K-1 then target classes.

    Differentiable with respect to the bank's learnable blocks.
    """
    seqs = [bank.assemble(d, k)
            for d in (DomainId.SOURCE, DomainId.TARGET)
            for k in range(bank.cfg.k)]
    return text_enc.encode_batch(torch.stack(seqs))


def source_prompt_features(bank: PromptBank, text_enc) -> torch.Tensor:
    """(K, D) features of the source-domain prompts only."""
    seqs = [bank.assemble(DomainId.SOURCE, k) for k in range(bank.cfg.k)]
    return text_enc.encode_batch(torch.stack(seqs))
