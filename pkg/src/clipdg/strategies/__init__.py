"""The five adaptation strategies: losses, steps and estimators."""

from clipdg.strategies.estimators import (
    STRATEGY_CLASSES,
    CoOpLVTClassifier,
    DGClassifier,
    ERMClassifier,
    LinearProbeClassifier,
    NaiveMultiModalClassifier,
    ZeroShotClassifier,
)
from clipdg.strategies.layers import ClassifierHead, Conditioner, LogitScale
from clipdg.strategies.losses import (
    ce_loss,
    cooplvt_contrastive_loss,
    cooplvt_contrastive_terms,
    naive_mm_loss,
    similarity_logits,
    zero_shot_classify,
)
from clipdg.strategies.steps import (
    FreezeError,
    class_text_features,
    condition_tokens,
    conditioned_text_features_train,
    cooplvt_infer,
    cooplvt_scores,
    cooplvt_train_step,
    erm_step,
    linear_probe_step,
    make_optimizer,
    naive_mm_step,
)
