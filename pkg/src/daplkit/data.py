"""Synthetic two-domain tasks, dataset files, and checkpoint persistence.

The generator places K class prototypes in input space (optionally along
caller-supplied anchor directions so the oracle encoders see the same
structure in feature space), samples source points around them, and
produces target points by rotating fresh draws by a fixed angle in
disjoint planes, plus optional translation and extra noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .encoders import DTYPE
from .prompts import DomainId, PromptBank, PromptConfig, PromptMode


class DatasetFormatError(ValueError):
    """Malformed dataset file."""


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


class HiddenLabelError(RuntimeError):
    """Trainer-facing view attempted to read target labels."""


def class_names_for(k: int) -> list[str]:
    return [f"class_{i}" for i in range(k)]


@dataclass
class Dataset:
    """Samples of one domain. Target training views carry no labels;
    evaluation-only ground truth lives in ``hidden_labels``."""

    inputs: np.ndarray
    labels: np.ndarray | None
    hidden_labels: np.ndarray | None
    domain: DomainId
    class_names: list[str]

    def __len__(self) -> int:
        return self.inputs.shape[0]

    @property
    def k(self) -> int:
        return len(self.class_names)

    def train_view(self) -> "Dataset":
        """Label-stripped view handed to the trainer for target domains."""
        if self.domain is DomainId.SOURCE:
            return self
        return _UnlabeledView(self.inputs, None, None, self.domain, self.class_names)

    def inputs_tensor(self) -> torch.Tensor:
        return torch.from_numpy(self.inputs).to(DTYPE)


class _UnlabeledView(Dataset):
    @property
    def labels(self):  # type: ignore[override]
        raise HiddenLabelError("labels are hidden from trainer code paths")

    @labels.setter
    def labels(self, value):
        if value is not None:
            raise HiddenLabelError("labels are hidden from trainer code paths")

    @property
    def hidden_labels(self):  # type: ignore[override]
        raise HiddenLabelError("labels are hidden from trainer code paths")

    @hidden_labels.setter
    def hidden_labels(self, value):
        if value is not None:
            raise HiddenLabelError("labels are hidden from trainer code paths")


@dataclass(frozen=True)
class SyntheticSpec:
    k: int
    ns: int
    nu: int
    input_dim: int
    class_separation: float
    noise_std: float
    rotation_deg: float = 0.0
    translation: tuple[float, ...] | None = None
    shift_noise_std: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("need at least two classes")
        if self.ns < self.k or self.nu < self.k:
            raise ValueError("need at least one sample per class")
        if self.input_dim < self.k:
            raise ValueError("input_dim must be at least K for distinct prototypes")
        if self.noise_std < 0 or self.shift_noise_std < 0:
            raise ValueError("noise std must be nonnegative")


def _orthonormal_anchors(k: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q[:, :k].T.copy()


def _gram_schmidt(rows: np.ndarray) -> np.ndarray:
    out = np.zeros_like(rows)
    for i, r in enumerate(rows):
        v = r.copy()
        for j in range(i):
            v -= (v @ out[j]) * out[j]
        n = np.linalg.norm(v)
        if n < 1e-12:
            raise ValueError("anchor rows are linearly dependent")
        out[i] = v / n
    return out


def rotation_matrix(anchors: np.ndarray, dim: int, angle_deg: float) -> np.ndarray:
    """Rotation by angle_deg in the planes spanned by consecutive anchor pairs.

    Anchor rows are orthonormalized first; an odd leftover anchor is
    paired with a direction orthogonal to all anchors so every class
    moves by the same angle.
    """
    theta = math.radians(angle_deg)
    if theta == 0.0:
        return np.eye(dim)
    basis = _gram_schmidt(anchors)
    rows = list(basis)
    if len(rows) % 2 == 1:
        # deterministic complement direction for the unpaired anchor
        comp = np.ones(dim)
        for b in rows:
            comp -= (comp @ b) * b
        n = np.linalg.norm(comp)
        if n < 1e-9:
            comp = np.zeros(dim)
            comp[-1] = 1.0
            for b in rows:
                comp -= (comp @ b) * b
            n = np.linalg.norm(comp)
        rows.append(comp / n)
    r = np.eye(dim)
    c, s = math.cos(theta), math.sin(theta)
    for i in range(0, len(rows) - 1, 2):
        u, v = rows[i], rows[i + 1]
        # plane rotation: I + (c-1)(uuT + vvT) + s(vuT - uvT)
        r = r @ (
            np.eye(dim)
            + (c - 1.0) * (np.outer(u, u) + np.outer(v, v))
            + s * (np.outer(v, u) - np.outer(u, v))
        )
    return r


def generate_synthetic_task(
    spec: SyntheticSpec, anchors: np.ndarray | None = None
) -> tuple[Dataset, Dataset]:
    """Build (source, target) datasets sharing K classes.

    ``anchors``: optional (K, input_dim) rows giving class directions;
    defaults to random orthonormal directions. Prototypes are scaled so
    neighboring prototypes sit ``class_separation`` apart.
    """
    rng = np.random.default_rng(spec.seed)
    if anchors is None:
        dirs = _orthonormal_anchors(spec.k, spec.input_dim, rng)
    else:
        if anchors.shape != (spec.k, spec.input_dim):
            raise ValueError("anchors shape mismatch")
        norms = np.linalg.norm(anchors, axis=1, keepdims=True)
        dirs = anchors / norms
    # radius such that orthogonal prototypes are class_separation apart
    radius = spec.class_separation / math.sqrt(2.0)
    if spec.class_separation <= 0 or (spec.noise_std > spec.class_separation > 0):
        import warnings

        warnings.warn("class separation is small relative to noise; task may be infeasible")
    prototypes = dirs * radius

    def draw(n: int) -> tuple[np.ndarray, np.ndarray]:
        labels = np.arange(n) % spec.k
        rng.shuffle(labels)
        x = prototypes[labels] + rng.standard_normal((n, spec.input_dim)) * spec.noise_std
        return x, labels

    xs, ys = draw(spec.ns)
    xu, yu = draw(spec.nu)
    r = rotation_matrix(dirs, spec.input_dim, spec.rotation_deg)
    xu = xu @ r.T
    if spec.translation is not None:
        t = np.asarray(spec.translation, dtype=float)
        if t.size == 1:
            t = np.full(spec.input_dim, float(t.reshape(())))
        xu = xu + t
    if spec.shift_noise_std > 0:
        xu = xu + rng.standard_normal(xu.shape) * spec.shift_noise_std
    names = class_names_for(spec.k)
    source = Dataset(xs, ys, None, DomainId.SOURCE, names)
    target = Dataset(xu, None, yu, DomainId.TARGET, names)
    return source, target


# ---------------------------------------------------------------------------
# dataset files


def save_dataset(dataset: Dataset, path) -> None:
    """Plain-text format: header ``K input_dim N domain has_labels`` then
    one comma-separated sample per line with an optional trailing label."""
    labels = dataset.labels if dataset.domain is DomainId.SOURCE else dataset.hidden_labels
    has_labels = int(labels is not None)
    n, dim = dataset.inputs.shape
    lines = [f"{dataset.k} {dim} {n} {dataset.domain.name.lower()} {has_labels}"]
    for i in range(n):
        row = ",".join(repr(float(v)) for v in dataset.inputs[i])
        if has_labels:
            row += f",{int(labels[i])}"
        lines.append(row)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetFormatError("empty file")
    parts = lines[0].split()
    if len(parts) != 5:
        raise DatasetFormatError("line 1: expected 'K input_dim N domain has_labels'")
    try:
        k, dim, n = int(parts[0]), int(parts[1]), int(parts[2])
        domain = DomainId[parts[3].upper()]
        has_labels = bool(int(parts[4]))
    except (ValueError, KeyError) as e:
        raise DatasetFormatError(f"line 1: {e}") from e
    inputs = np.zeros((n, dim))
    labels = np.zeros(n, dtype=np.int64) if has_labels else None
    expected = dim + int(has_labels)
    for i in range(n):
        lineno = i + 2
        if i + 1 >= len(lines):
            raise DatasetFormatError(f"line {lineno}: missing sample row")
        cells = lines[i + 1].split(",")
        if len(cells) != expected:
            raise DatasetFormatError(
                f"line {lineno}: expected {expected} columns, got {len(cells)}"
            )
        try:
            inputs[i] = [float(c) for c in cells[:dim]]
            if has_labels:
                labels[i] = int(cells[dim])
        except ValueError as e:
            raise DatasetFormatError(f"line {lineno}: {e}") from e
    names = class_names_for(k)
    if domain is DomainId.SOURCE:
        return Dataset(inputs, labels, None, domain, names)
    return Dataset(inputs, None, labels, domain, names)


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = "daplkit-checkpoint v1"


def _write_block(lines: list[str], name: str, t: torch.Tensor | None) -> None:
    if t is None:
        lines.append(f"block {name} absent")
        return
    dims = " ".join(str(d) for d in t.shape)
    lines.append(f"block {name} {t.dim()} {dims}".rstrip())
    flat = t.detach().reshape(-1).tolist()
    lines.append(",".join(f"{v:.17g}" for v in flat) if flat else "")


def save_checkpoint(bank: PromptBank, path) -> None:
    cfg = bank.cfg
    lines = [
        _MAGIC,
        f"mode {cfg.mode.value}",
        f"K {cfg.k}",
        f"M1 {cfg.m1}",
        f"M2 {cfg.m2}",
        f"E {cfg.embed_dim}",
        f"init_std {cfg.init_std:.17g}",
    ]
    _write_block(lines, "v", bank.v)
    _write_block(lines, "d_src", bank.d_src)
    _write_block(lines, "d_tgt", bank.d_tgt)
    _write_block(lines, "class_tokens", bank.class_tokens)
    _write_block(lines, "template", bank.template)
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[PromptBank, PromptConfig]:
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise CheckpointError("bad magic line")
    header: dict[str, str] = {}
    i = 1
    while i < len(lines) and not lines[i].startswith("block "):
        key, _, val = lines[i].partition(" ")
        header[key] = val
        i += 1
    try:
        cfg = PromptConfig(
            mode=PromptMode(header["mode"]),
            m1=int(header["M1"]),
            m2=int(header["M2"]),
            k=int(header["K"]),
            embed_dim=int(header["E"]),
            init_std=float(header["init_std"]),
        )
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"bad header: {e}") from e
    blocks: dict[str, torch.Tensor | None] = {}
    while i < len(lines):
        parts = lines[i].split()
        if parts[0] != "block":
            raise CheckpointError(f"expected block header at line {i + 1}")
        name = parts[1]
        if parts[2] == "absent":
            blocks[name] = None
            i += 1
            continue
        ndim = int(parts[2])
        shape = tuple(int(d) for d in parts[3 : 3 + ndim])
        i += 1
        payload = lines[i] if i < len(lines) else ""
        vals = [float(v) for v in payload.split(",")] if payload else []
        n_expected = int(np.prod(shape)) if shape else 1
        if math.prod(shape) != len(vals):
            raise CheckpointError(
                f"block {name}: expected {n_expected} values, got {len(vals)}"
            )
        blocks[name] = torch.tensor(vals, dtype=DTYPE).reshape(shape)
        i += 1
    expected_v = (
        None
        if cfg.mode is PromptMode.MANUAL
        else ((cfg.k, cfg.m1, cfg.embed_dim) if cfg.class_specific else (cfg.m1, cfg.embed_dim))
    )
    v = blocks.get("v")
    if (v is None) != (expected_v is None) or (v is not None and v.shape != expected_v):
        raise CheckpointError("v block inconsistent with header")
    for name in ("d_src", "d_tgt"):
        b = blocks.get(name)
        if cfg.has_dsc:
            if b is None or b.shape != (cfg.m2, cfg.embed_dim):
                raise CheckpointError(f"{name} block inconsistent with header")
        elif b is not None:
            raise CheckpointError(f"unexpected {name} block")
    if "class_tokens" not in blocks or blocks["class_tokens"] is None:
        raise CheckpointError("missing class_tokens block")
    bank = PromptBank(
        cfg, v, blocks.get("d_src"), blocks.get("d_tgt"),
        blocks["class_tokens"], blocks.get("template"),
    )
    return bank, cfg
