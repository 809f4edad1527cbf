"""Input checks shared by the estimator wrapper and the CLI."""

from __future__ import annotations

import numpy as np

from .core import BudgetError, ConfigError


def check_images(X, patch_size=None, channels=3):
    """Return ``X`` as a float64 array of shape (n, C, S, S) with pixels in [0, 1].

    A single (C, S, S) image is promoted to a batch of one.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"expected images of shape (n, C, S, S), got {X.shape}")
    n, c, h, w = X.shape
    if n == 0:
        raise ValueError("no images given")
    if c != channels:
        raise ValueError(f"expected {channels} channels, got {c}")
    if h != w:
        raise ValueError(f"images must be square, got {h}x{w}")
    if patch_size is not None and h % patch_size:
        raise ConfigError(f"image size {h} not divisible by patch size {patch_size}")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or inf")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def check_questions(questions, n, n_questions):
    """Question ids as an int64 vector of length ``n``; ``None`` means all zero."""
    if questions is None:
        return np.zeros(n, dtype=np.int64)
    q = np.asarray(questions)
    if q.ndim == 0:
        q = np.full(n, q)
    if q.shape != (n,):
        raise ValueError(f"expected {n} question ids, got shape {q.shape}")
    if not np.issubdtype(q.dtype, np.integer):
        raise ValueError("question ids must be integers")
    if q.size and (q.min() < 0 or q.max() >= n_questions):
        raise ValueError(f"question ids must lie in [0, {n_questions})")
    return q.astype(np.int64)


def check_budget(m, M):
    if isinstance(m, bool) or not isinstance(m, (int, np.integer)):
        raise BudgetError(f"budget must be an integer, got {m!r}")
    if not 1 <= m <= M:
        raise BudgetError(f"budget m={m} outside [1, M={M}]")
    return int(m)


def check_labels(y, n):
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    return y
