"""daplkit: prompt-based unsupervised domain adaptation at desk scale.

Learnable domain-agnostic and domain-specific prompt contexts are
optimized against frozen encoders with a 2K-way contrastive objective
and threshold-gated pseudo-labels, plus a synthetic-task experiment
harness for the ablation protocols.
"""

from .encoders import (
    ImageEncoder,
    OracleImageEncoder,
    OracleTextEncoder,
    TextEncoder,
    TokenTable,
    VocabularyError,
    manual_prompt_features,
)
from .prompts import (
    DomainId,
    PromptBank,
    PromptConfig,
    PromptMode,
    all_prompt_features,
)
from .head import (
    cosine_similarity,
    marginalize_to_classes,
    predict,
    two_k_probabilities,
    zero_shot_probabilities,
)
from .objectives import (
    PseudoLabelConfig,
    PseudoLabelSet,
    PseudoRefresh,
    generate_pseudo_labels,
    source_loss,
    target_loss,
    total_loss,
)
from .trainer import TrainConfig, TrainResult, cosine_lr, sgd_step, train
from .data import (
    Dataset,
    SyntheticSpec,
    generate_synthetic_task,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
)
from .diagnostics import confidence_report, disentanglement_report, evaluate

__version__ = "0.1.0"
