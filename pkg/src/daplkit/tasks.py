"""Standard synthetic task setups used by the harness and acceptance runs.

An oracle task bundles frozen oracle encoders, a token table, and a
two-domain synthetic dataset whose class prototypes are planted along
directions the text encoder can reach, so the task is learnable by
prompts alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset, SyntheticSpec, _gram_schmidt, class_names_for, generate_synthetic_task
from .encoders import (
    ImageEncoder,
    OracleImageEncoder,
    OracleTextEncoder,
    TextEncoder,
    TokenTable,
    manual_prompt_features,
)

ORACLE_LAST_ROW_WEIGHT = 0.3


@dataclass
class Task:
    """Everything a run needs: encoders, token table, and both domains."""

    table: TokenTable
    text_enc: object
    image_enc: object
    source: Dataset
    target: Dataset
    spec: SyntheticSpec
    embed_dim: int
    feature_dim: int


def _anchors(kind: str, table: TokenTable, text_enc, class_names: list[str]) -> np.ndarray | None:
    if kind == "random":
        return None
    if kind == "class_token":
        feats = (table.embed(class_names) @ text_enc.proj).numpy()
        return _gram_schmidt(feats)
    if kind == "manual":
        feats = manual_prompt_features(table, class_names, text_enc).numpy()
        return feats / np.linalg.norm(feats, axis=1, keepdims=True)
    raise ValueError(f"unknown anchor kind {kind!r}")


def build_oracle_task(
    spec: SyntheticSpec,
    embed_dim: int | None = None,
    anchor: str = "class_token",
    encoder_seed: int | None = None,
) -> Task:
    """Oracle-encoder task: identity image encoder, pooled-projection text
    encoder, prototypes along anchor directions derived from the table."""
    e = embed_dim if embed_dim is not None else spec.input_dim
    d = spec.input_dim
    seed = spec.seed if encoder_seed is None else encoder_seed
    names = class_names_for(spec.k)
    table = TokenTable.for_classes(names, e, seed)
    text_enc = OracleTextEncoder(e, d, seed, last_row_weight=ORACLE_LAST_ROW_WEIGHT)
    image_enc = OracleImageEncoder(d, d, seed)
    source, target = generate_synthetic_task(spec, anchors=_anchors(anchor, table, text_enc, names))
    return Task(table, text_enc, image_enc, source, target, spec, e, d)


def build_mlp_task(
    spec: SyntheticSpec,
    embed_dim: int | None = None,
    encoder_seed: int | None = None,
    max_seq_len: int = 64,
) -> Task:
    """Task backed by the small frozen random networks instead of oracles."""
    e = embed_dim if embed_dim is not None else spec.input_dim
    d = spec.input_dim
    seed = spec.seed if encoder_seed is None else encoder_seed
    names = class_names_for(spec.k)
    table = TokenTable.for_classes(names, e, seed)
    text_enc = TextEncoder(e, d, max_seq_len, seed)
    image_enc = ImageEncoder(spec.input_dim, d, seed)
    source, target = generate_synthetic_task(spec)
    return Task(table, text_enc, image_enc, source, target, spec, e, d)


def acceptance_spec(seed: int) -> SyntheticSpec:
    """The standard acceptance task: K=4, separation 4, noise 0.5, 30 deg."""
    return SyntheticSpec(
        k=4, ns=400, nu=400, input_dim=16,
        class_separation=4.0, noise_std=0.5, rotation_deg=30.0, seed=seed,
    )


def build_probe_task(
    seed: int, shift_magnitude: float = 2.5, n_probe: int = 200
) -> tuple[Task, Dataset, Dataset]:
    """2-class, 2-domain separable task for the disentanglement diagnostic.

    The domain shift is a translation orthogonal to both class anchors, so
    domains separate cleanly without class confusion. Returns the training
    task plus held-out (source, target) probe sets drawn around the same
    prototypes with fresh noise.
    """
    e = d = 16
    names = class_names_for(2)
    table = TokenTable.for_classes(names, e, seed)
    text_enc = OracleTextEncoder(e, d, seed, last_row_weight=ORACLE_LAST_ROW_WEIGHT)
    image_enc = OracleImageEncoder(d, d, seed)
    anchors = _gram_schmidt((table.embed(names) @ text_enc.proj).numpy())
    rng = np.random.default_rng(seed + 77)
    t = rng.standard_normal(d)
    for a in anchors:
        t -= (t @ a) * a
    t = t / np.linalg.norm(t) * shift_magnitude
    spec = SyntheticSpec(
        k=2, ns=400, nu=400, input_dim=d,
        class_separation=4.0, noise_std=0.4, translation=tuple(t), seed=seed,
    )
    source, target = generate_synthetic_task(spec, anchors=anchors)
    probe_spec = SyntheticSpec(
        k=2, ns=n_probe, nu=n_probe, input_dim=d,
        class_separation=4.0, noise_std=0.4, translation=tuple(t), seed=seed + 1000,
    )
    probe_source, probe_target = generate_synthetic_task(probe_spec, anchors=anchors)
    task = Task(table, text_enc, image_enc, source, target, spec, e, d)
    return task, probe_source, probe_target
