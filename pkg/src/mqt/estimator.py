"""scikit-learn style wrapper: images in, answer labels out, budget as a knob."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.metrics import accuracy_score
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .core import ATTN_THEN_PROJ, encode_image
from .tasks import Samples
from .toyvlm import patch_embed
from .training import TrainConfig, train_two_stage
from .validation import check_budget, check_images, check_labels, check_questions


class ArrayStream:
    """Batches drawn from in-memory arrays, reshuffled every epoch.

    Batch ``k`` is a pure function of ``(seed, k)``, like the task streams.
    """

    def __init__(self, samples, seed=0):
        self.samples = samples
        self.seed = seed
        self._perms = {}

    def _perm(self, epoch):
        if epoch not in self._perms:
            rng = np.random.default_rng([self.seed, epoch])
            self._perms = {epoch: rng.permutation(len(self.samples))}
        return self._perms[epoch]

    def batch(self, index, batch_size):
        n = len(self.samples)
        flat = np.arange(index * batch_size, (index + 1) * batch_size)
        idx = np.array([self._perm(i // n)[i % n] for i in flat])
        return self.samples[idx]


class MQTClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Patch encoder + Matryoshka query transformer + toy decoder, trained
    end to end with the two-stage schedule.

    ``budget`` is the number of visual tokens used by ``predict`` and
    ``transform``; ``None`` means all ``max_tokens``.  It can be changed after
    fitting with ``set_params`` without retraining.
    """

    def __init__(self, budget=None, regime="mqt", token_set="linear", max_tokens=32,
                 patch_size=3, n_heads=4, lm_layers=2, ordering=ATTN_THEN_PROJ,
                 stage1_steps=300, stage2_steps=2000, lr_stage1=1e-3, lr_stage2=1e-3,
                 batch_size=32, random_state=0):
        self.budget = budget
        self.regime = regime
        self.token_set = token_set
        self.max_tokens = max_tokens
        self.patch_size = patch_size
        self.n_heads = n_heads
        self.lm_layers = lm_layers
        self.ordering = ordering
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.lr_stage1 = lr_stage1
        self.lr_stage2 = lr_stage2
        self.batch_size = batch_size
        self.random_state = random_state

    def _train_config(self, image_size, n_classes, n_questions):
        return TrainConfig(
            regime=self.regime,
            token_set=self.token_set,
            stage1_steps=self.stage1_steps,
            stage2_steps=self.stage2_steps,
            lr_stage1=self.lr_stage1,
            lr_stage2=self.lr_stage2,
            batch_size=self.batch_size,
            seed=int(self.random_state or 0),
            model={
                "image_size": image_size,
                "patch_size": self.patch_size,
                "n_answers": n_classes,
                "n_questions": n_questions,
                "max_tokens": self.max_tokens,
                "n_heads": self.n_heads,
                "lm_layers": self.lm_layers,
                "ordering": self.ordering,
            },
        )

    def fit(self, X, y, questions=None):
        X = check_images(X, self.patch_size)
        y = check_labels(y, len(X))
        n_questions = 1 if questions is None else int(np.max(questions)) + 1
        q = check_questions(questions, len(X), n_questions)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_questions_ = n_questions
        config = self._train_config(X.shape[-1], len(self.classes_), n_questions)
        stream = ArrayStream(Samples(X, q, codes.astype(np.int64)), seed=config.seed)
        self.model_, self.train_log_ = train_two_stage(config, data=stream)
        self.config_ = config
        return self

    def _budget(self):
        m = self.model_.M if self.budget is None else self.budget
        return check_budget(m, self.model_.M)

    def _inputs(self, X, questions):
        check_is_fitted(self, "model_")
        X = check_images(X, self.patch_size)
        return X, check_questions(questions, len(X), self.n_questions_)

    def predict_proba(self, X, questions=None):
        X, q = self._inputs(X, questions)
        logits = self.model_.predict(X, q, self._budget())
        z = np.exp(logits - logits.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X, questions=None):
        proba = self.predict_proba(X, questions)
        return self.classes_[proba.argmax(axis=1)]

    def transform(self, X):
        """Visual tokens at the current budget, shape (n, m, d_lm)."""
        X, _ = self._inputs(X, None)
        m = self._budget()
        model = self.model_
        with ad.no_grad():
            grid = patch_embed(X, model.config.patch_size, model.embed)
            return encode_image(grid, model.bank, m, model.qt).tokens.data

    def score(self, X, y, questions=None, sample_weight=None):
        return accuracy_score(y, self.predict(X, questions), sample_weight=sample_weight)
