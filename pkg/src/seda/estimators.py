"""scikit-learn compatible estimators.

Textual features are privileged information: ``fit`` takes them through the
``text_features`` keyword, while ``predict``/``transform`` only ever see
visual features.

    >>> clf = SedaClassifier(epochs=5).fit(X_vis, y, text_features=X_txt)
    >>> clf.predict(X_vis_test)
"""

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import type_of_target
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import PairedFeatureDataset
from .losses import StagedLossConfig
from .sampler import SamplingOptions, reverse_chain
from .trainer import TrainConfig, fit, init_run


class _AlignedFeatureClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Shared fit/predict plumbing; subclasses pick the model kind."""

    _kind = None

    def _train_config(self):
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            base_lr=self.learning_rate,
            weight_decay=self.weight_decay,
            lr_halving_period_epochs=self.lr_halving_period,
            total_steps=getattr(self, "total_steps", 1),
            beta_start=getattr(self, "beta_start", 1e-4),
            beta_end=getattr(self, "beta_end", 0.02),
            loss=self._loss_config(),
            seed=self.random_state,
            use_dst=getattr(self, "use_dst", True),
            use_attention_interaction=getattr(self, "use_attention_interaction", True),
            use_dsl=getattr(self, "use_dsl", False),
        )

    def _loss_config(self):
        return StagedLossConfig(alpha2=self.alpha2, gamma=self.gamma, staged_step=0)

    def _denoiser_kwargs(self):
        return {"decoder_hidden_dims": self.hidden_dims}

    def _encode_labels(self, y):
        if type_of_target(y) == "multilabel-indicator":
            self.classes_ = np.arange(y.shape[1])
            return np.asarray(y, dtype=bool)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        return encoded

    def fit(self, X, y, text_features=None):
        X, y = check_X_y(X, y, dtype=np.float32, multi_output=True)
        if text_features is None:
            if self._kind != "visual":
                raise ValueError(f"{type(self).__name__} needs text_features during fit")
            text = X
        else:
            text = check_array(text_features, dtype=np.float32)
            if text.shape != X.shape:
                raise ValueError(f"text_features shape {text.shape} does not match X shape {X.shape}")
        labels = self._encode_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        train = PairedFeatureDataset(X, text, labels, len(self.classes_), "train").validate()
        self.train_config_ = self._train_config()
        model, generator = init_run(self.train_config_, train, kind=self._kind, **self._denoiser_kwargs())
        result = fit(model, train, self.train_config_, generator=generator)
        self.model_ = result.model
        self.history_ = result.history
        self.schedule_ = self.train_config_.schedule()
        self.n_features_in_ = X.shape[1]
        self.label_mode_ = train.label_mode
        return self

    def _features(self, X):
        with torch.no_grad():
            return self.model_(X)

    def transform(self, X):
        """Visual features mapped into the aligned (textual-side) space."""
        check_is_fitted(self, "model_")
        X = torch.from_numpy(check_array(X, dtype=np.float32))
        return self._features(X).numpy()

    def decision_function(self, X):
        feats = torch.from_numpy(self.transform(X))
        with torch.no_grad():
            return self.model_.head(feats).numpy()

    def predict_proba(self, X):
        logits = torch.from_numpy(self.decision_function(X))
        return self.model_.head.scores(logits).numpy()

    def predict(self, X):
        proba = self.predict_proba(X)
        if self.label_mode_ == "multi":
            return (proba > 0.5).astype(int)
        return self.classes_[np.argmax(proba, axis=1)]


class SedaClassifier(_AlignedFeatureClassifier):
    """Diffusion-based visual-to-textual aligner followed by a linear head.

    Training noises the textual features and teaches the denoiser to recover
    them from the visual features (above ``staged_step``) or to stay close to
    the visual class structure (at or below it). Prediction runs the reverse
    chain from Gaussian noise and classifies the result; ``random_state``
    seeds both initialization and sampling, so repeated calls agree.
    """

    _kind = "seda"

    def __init__(
        self,
        total_steps=200,
        beta_start=5e-4,
        beta_end=0.1,
        staged_step=50,
        alpha1=1.0,
        alpha2=1.0,
        beta=1.5,
        gamma=1.5,
        stage_order="as-written",
        token_count=8,
        attention_heads=1,
        hidden_dims=None,
        activation="silu",
        use_attention_interaction=True,
        use_dsl=True,
        use_dst=True,
        epochs=20,
        batch_size=64,
        learning_rate=1e-4,
        weight_decay=1e-4,
        lr_halving_period=4,
        noise_scale=1.0,
        stride=1,
        random_state=0,
    ):
        self.total_steps = total_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.staged_step = staged_step
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.beta = beta
        self.gamma = gamma
        self.stage_order = stage_order
        self.token_count = token_count
        self.attention_heads = attention_heads
        self.hidden_dims = hidden_dims
        self.activation = activation
        self.use_attention_interaction = use_attention_interaction
        self.use_dsl = use_dsl
        self.use_dst = use_dst
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.lr_halving_period = lr_halving_period
        self.noise_scale = noise_scale
        self.stride = stride
        self.random_state = random_state

    def _loss_config(self):
        return StagedLossConfig(
            alpha1=self.alpha1,
            alpha2=self.alpha2,
            beta=self.beta,
            gamma=self.gamma,
            staged_step=self.staged_step,
            stage_order=self.stage_order,
        )

    def _denoiser_kwargs(self):
        return {
            "decoder_hidden_dims": self.hidden_dims,
            "token_count": self.token_count,
            "attention_heads": self.attention_heads,
            "activation": self.activation,
        }

    def fit(self, X, y, text_features=None):
        if not (self.use_dst or self.use_dsl):
            raise ValueError("at least one of use_dst / use_dsl must be enabled")
        return super().fit(X, y, text_features=text_features)

    def _features(self, X):
        generator = torch.Generator().manual_seed(int(self.random_state) + 1)
        options = SamplingOptions(noise_scale=self.noise_scale, stride=self.stride)
        return reverse_chain(self.model_, self.schedule_, X, generator, options).features


class OneStepAlignClassifier(_AlignedFeatureClassifier):
    """Feed-forward projector regressed onto textual features, then a linear head."""

    _kind = "onestep"

    def __init__(
        self,
        hidden_dims=None,
        alpha2=1.0,
        gamma=1.5,
        epochs=20,
        batch_size=64,
        learning_rate=1e-4,
        weight_decay=1e-4,
        lr_halving_period=4,
        random_state=0,
    ):
        self.hidden_dims = hidden_dims
        self.alpha2 = alpha2
        self.gamma = gamma
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.lr_halving_period = lr_halving_period
        self.random_state = random_state


class VisualLinearClassifier(_AlignedFeatureClassifier):
    """Linear head trained directly on visual features; ``text_features`` is ignored."""

    _kind = "visual"

    def __init__(
        self,
        epochs=20,
        batch_size=64,
        learning_rate=1e-4,
        weight_decay=1e-4,
        lr_halving_period=4,
        random_state=0,
    ):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.lr_halving_period = lr_halving_period
        self.random_state = random_state

    def _loss_config(self):
        return StagedLossConfig(staged_step=0)

    def _denoiser_kwargs(self):
        return {}

    def fit(self, X, y, text_features=None):
        return super().fit(X, y, text_features=None)
