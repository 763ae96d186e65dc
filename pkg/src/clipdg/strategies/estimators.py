"""scikit-learn style classifiers, one per adaptation strategy.

Each estimator owns an encoder bundle plus its strategy-specific modules and
exposes ``fit`` / ``predict`` / ``predict_proba`` / ``decision_function``.
``fit`` draws per-domain balanced batches (``b`` samples from every value of
``sample_domain``) for ``steps`` optimizer steps. Training loops that need
finer control (periodic validation, checkpoint snapshots) call
:meth:`initialize` once and then :meth:`train_step` per batch.

Inputs are preprocessed ``(N, C, H, W)`` arrays; labels are class indices.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from clipdg.data import DomainDataset, make_dg_batches
from clipdg.encoders import EncoderBundle, build_bundle, encode_image
from clipdg.prompts import DEFAULT_TEMPLATE, PromptSet, build_prompt_set, load_prompt_file
from clipdg.rng import RngState
from clipdg.strategies.layers import ClassifierHead, Conditioner, LogitScale
from clipdg.strategies.losses import similarity_logits, zero_shot_classify
from clipdg.strategies.steps import (
    class_text_features,
    cooplvt_scores,
    cooplvt_train_step,
    erm_step,
    linear_probe_step,
    make_optimizer,
    naive_mm_step,
)
from clipdg.validation import check_images, check_labels, check_sample_domain

_EVAL_CHUNK = 256


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class DGClassifier(ClassifierMixin, BaseEstimator):
    """Shared fit/predict machinery; subclasses define the modules and the step."""

    uses_text = False

    def _init_modules(self, K: int, rng: RngState) -> dict[str, nn.Module]:
        raise NotImplementedError

    def _step(self, x: np.ndarray, y: np.ndarray) -> float:
        raise NotImplementedError

    def _scores(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    # -------------------------------------------------------------- setup

    def _encoder_spec(self, image_shape) -> dict:
        spec = dict(self.encoder) if self.encoder is not None else {"kind": "toy"}
        if spec.get("kind") == "toy" and image_shape is not None:
            spec.setdefault("channels", int(image_shape[0]))
            spec.setdefault("image_side", int(image_shape[-1]))
        return spec

    def _resolve_n_classes(self, y=None) -> int:
        if getattr(self, "n_classes", None) is not None:
            return int(self.n_classes)
        names = getattr(self, "class_names", None)
        if names is not None:
            return len(names)
        if y is None:
            raise ValueError("cannot infer the number of classes; pass n_classes or class_names")
        return int(np.max(y)) + 1

    def _prompt_set(self, bundle: EncoderBundle, K: int) -> PromptSet:
        ctx = bundle.dims.context_length
        if getattr(self, "prompt_file", None):
            ps = load_prompt_file(self.prompt_file, bundle.tokenizer, ctx)
        else:
            names = self.class_names if self.class_names is not None else [f"class_{k}" for k in range(K)]
            ps = build_prompt_set(self.prompt_family, names, bundle.tokenizer, self.prompt_template, ctx)
        if len(ps) != K:
            raise ValueError(f"prompt set has {len(ps)} prompts for a {K}-class task")
        return ps

    def initialize(self, n_classes: int | None = None, image_shape=None, y=None) -> "DGClassifier":
        """Build the bundle, strategy modules and optimizer from scratch."""
        K = n_classes if n_classes is not None else self._resolve_n_classes(y)
        rng = RngState(int(self.random_state), "initializer")
        self.bundle_ = build_bundle(self._encoder_spec(image_shape))
        self.n_classes_ = K
        self.classes_ = np.arange(K)
        self.prompt_set_ = self._prompt_set(self.bundle_, K) if self.uses_text else None
        self.modules_ = {"bundle": self.bundle_, **self._init_modules(K, rng)}
        params = [p for m in self.modules_.values() for p in m.parameters()]
        self.optimizer_ = make_optimizer(params, self.optimizer, self.lr, self.weight_decay)
        self.step_ = 0
        self.loss_curve_: list[float] = []
        return self

    @property
    def dtype(self) -> torch.dtype:
        return self.bundle_.dtype

    @property
    def _np_dtype(self):
        return np.float64 if self.dtype == torch.float64 else np.float32

    # -------------------------------------------------------------- training

    def train_step(self, X, y) -> float:
        check_is_fitted(self, "modules_")
        X = check_images(X, dtype=self._np_dtype)
        y = check_labels(y, len(X), self.n_classes_)
        for m in self.modules_.values():
            m.train()
        loss = self._step(X, y)
        self.step_ += 1
        self.loss_curve_.append(loss)
        return loss

    def fit(self, X, y, sample_domain=None):
        X = check_images(X, dtype=None)
        y = check_labels(y, len(X))
        sd = check_sample_domain(sample_domain, len(X))
        self.initialize(y=y, image_shape=X.shape[1:])
        check_labels(y, len(X), self.n_classes_)
        if self.steps == 0 or not self._trainable():
            return self
        groups = []
        for name in dict.fromkeys(sd.tolist()):
            idx = np.flatnonzero(sd == name)
            groups.append(DomainDataset(str(name), X[idx], y[idx], tuple(str(i) for i in idx)))
        seed = RngState(int(self.random_state), "sampler").int_seed()
        for batch in make_dg_batches(groups, self.b, seed=seed, n_batches=self.steps):
            self.train_step(batch.images, batch.labels)
        return self

    def _trainable(self) -> bool:
        return any(p.requires_grad for m in self.modules_.values() for p in m.parameters())

    # -------------------------------------------------------------- inference

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "modules_")
        X = check_images(X, dtype=self._np_dtype)
        for m in self.modules_.values():
            m.eval()
        out = []
        with torch.no_grad():
            for i in range(0, len(X), _EVAL_CHUNK):
                xb = torch.as_tensor(X[i:i + _EVAL_CHUNK]).to(self.dtype)
                out.append(self._scores(xb).cpu().numpy())
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)

    def predict_proba(self, X) -> np.ndarray:
        return _softmax(self.decision_function(X))

    # -------------------------------------------------------------- state

    def state_dict(self) -> dict[str, torch.Tensor]:
        check_is_fitted(self, "modules_")
        return {f"{name}.{k}": v.detach().clone()
                for name, m in self.modules_.items() for k, v in m.state_dict().items()}

    def load_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        check_is_fitted(self, "modules_")
        for name, m in self.modules_.items():
            prefix = f"{name}."
            m.load_state_dict({k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)})
        if hasattr(self, "class_features_"):
            self.class_features_ = None

    def optimizer_state(self) -> dict:
        return {} if self.optimizer_ is None else copy.deepcopy(self.optimizer_.state_dict())


class ERMClassifier(DGClassifier):
    """Vision encoder + linear head trained with pooled cross-entropy."""

    def __init__(self, encoder=None, n_classes=None, b=32, steps=100, lr=1e-3, weight_decay=0.0,
                 optimizer="adamw", random_state=0):
        self.encoder = encoder
        self.n_classes = n_classes
        self.b = b
        self.steps = steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.random_state = random_state

    def _init_modules(self, K, rng):
        self.bundle_.set_trainable(vision=True, projector=True, text=False)
        self.head_ = ClassifierHead(self.bundle_.dims.c_f, K, rng.child("head").torch_generator()).to(self.dtype)
        return {"head": self.head_}

    def _step(self, x, y):
        return erm_step(self.bundle_, self.head_, (x, y), self.optimizer_)

    def _scores(self, x):
        return self.head_(encode_image(self.bundle_, x))


class LinearProbeClassifier(ERMClassifier):
    """Linear head on frozen image features."""

    def _init_modules(self, K, rng):
        modules = super()._init_modules(K, rng)
        self.bundle_.set_trainable(vision=False, projector=False, text=False)
        return modules

    def _step(self, x, y):
        return linear_probe_step(self.bundle_, self.head_, (x, y), self.optimizer_)


class _PromptedClassifier(DGClassifier):
    uses_text = True

    def _class_features(self) -> torch.Tensor:
        if getattr(self, "class_features_", None) is None:
            self.class_features_ = class_text_features(self.bundle_, self.prompt_set_)
        return self.class_features_


class ZeroShotClassifier(_PromptedClassifier):
    """Nearest class prompt by cosine similarity; ``fit`` only builds the model."""

    def __init__(self, encoder=None, n_classes=None, class_names=None, prompt_family="custom",
                 prompt_template=DEFAULT_TEMPLATE, prompt_file=None, random_state=0):
        self.encoder = encoder
        self.n_classes = n_classes
        self.class_names = class_names
        self.prompt_family = prompt_family
        self.prompt_template = prompt_template
        self.prompt_file = prompt_file
        self.random_state = random_state

    # Training hyperparameters are meaningless here but keep the shared loop uniform.
    b, steps, lr, weight_decay, optimizer = 1, 0, 0.0, 0.0, "adamw"

    def _init_modules(self, K, rng):
        self.bundle_.set_trainable(vision=False, projector=False, text=False)
        self.class_features_ = None
        return {}

    def _step(self, x, y):
        raise RuntimeError("zero-shot classification has nothing to train")

    def _scores(self, x):
        return similarity_logits(encode_image(self.bundle_, x), self._class_features())

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "modules_")
        X = torch.as_tensor(check_images(X, dtype=self._np_dtype))
        with torch.no_grad():
            return zero_shot_classify(encode_image(self.bundle_, X), self._class_features())


class NaiveMultiModalClassifier(_PromptedClassifier):
    """Vision encoder fine-tuned on cross-entropy over image/class-prompt similarities."""

    def __init__(self, encoder=None, n_classes=None, class_names=None, prompt_family="custom",
                 prompt_template=DEFAULT_TEMPLATE, prompt_file=None, b=32, steps=100, lr=1e-3,
                 weight_decay=0.0, optimizer="adamw", logit_scale_init=1 / 0.07, learn_logit_scale=True,
                 random_state=0):
        self.encoder = encoder
        self.n_classes = n_classes
        self.class_names = class_names
        self.prompt_family = prompt_family
        self.prompt_template = prompt_template
        self.prompt_file = prompt_file
        self.b = b
        self.steps = steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.logit_scale_init = logit_scale_init
        self.learn_logit_scale = learn_logit_scale
        self.random_state = random_state

    def _init_modules(self, K, rng):
        self.bundle_.set_trainable(vision=True, projector=True, text=False)
        self.class_features_ = None
        self.logit_scale_ = LogitScale(self.logit_scale_init, self.learn_logit_scale).to(self.dtype)
        return {"logit_scale": self.logit_scale_}

    def _step(self, x, y):
        return naive_mm_step(self.bundle_, self._class_features(), self.logit_scale_, (x, y), self.optimizer_)

    def _scores(self, x):
        return similarity_logits(encode_image(self.bundle_, x), self._class_features(), self.logit_scale_)


class CoOpLVTClassifier(_PromptedClassifier):
    """Image-conditioned prompt tuning with a trainable vision encoder.

    A conditioner MLP maps intermediate image features to ``n_p`` extra token
    embeddings appended to the class prompt; training uses the symmetric
    contrastive loss over the batch, and prediction conditions every class
    prompt on the test image and takes the most similar one.
    """

    def __init__(self, encoder=None, n_classes=None, class_names=None, prompt_family="custom",
                 prompt_template=DEFAULT_TEMPLATE, prompt_file=None, n_p=4, mlp_layers=2, b=32,
                 steps=100, lr=1e-3, weight_decay=0.0, optimizer="adamw", logit_scale_init=1 / 0.07,
                 learn_logit_scale=True, train_vision=True, train_projector=True, random_state=0):
        self.encoder = encoder
        self.n_classes = n_classes
        self.class_names = class_names
        self.prompt_family = prompt_family
        self.prompt_template = prompt_template
        self.prompt_file = prompt_file
        self.n_p = n_p
        self.mlp_layers = mlp_layers
        self.b = b
        self.steps = steps
        self.lr = lr
        self.weight_decay = weight_decay
        self.optimizer = optimizer
        self.logit_scale_init = logit_scale_init
        self.learn_logit_scale = learn_logit_scale
        self.train_vision = train_vision
        self.train_projector = train_projector
        self.random_state = random_state

    def _init_modules(self, K, rng):
        self.bundle_.set_trainable(vision=self.train_vision, projector=self.train_projector, text=False)
        dims = self.bundle_.dims
        self.conditioner_ = Conditioner(dims.d_i, self.n_p, dims.d_t, self.mlp_layers,
                                        generator=rng.child("conditioner").torch_generator()).to(self.dtype)
        self.logit_scale_ = LogitScale(self.logit_scale_init, self.learn_logit_scale).to(self.dtype)
        return {"conditioner": self.conditioner_, "logit_scale": self.logit_scale_}

    def _step(self, x, y):
        return cooplvt_train_step(self.bundle_, self.conditioner_, self.prompt_set_, (x, y),
                                  self.optimizer_, self.logit_scale_)

    def _scores(self, x):
        return self.logit_scale_() * cooplvt_scores(self.bundle_, self.conditioner_, self.prompt_set_, x)


STRATEGY_CLASSES = {
    "erm": ERMClassifier,
    "linear_probe": LinearProbeClassifier,
    "zero_shot": ZeroShotClassifier,
    "naive_mm": NaiveMultiModalClassifier,
    "cooplvt": CoOpLVTClassifier,
}
