"""Synthetic image / question / answer generators aligned to the patch grid.

Each sample is a pure function of ``(spec, seed, index)``, so datasets can be
regenerated or produced in parallel without coordination.

* ``global-majority``: the whole image is one tint; any coarse summary suffices.
* ``detail-locate``: a lattice of candidate cells each carries a glyph; the
  question names one cell and the answer is that cell's glyph class.  Every
  other cell is clutter, so the answer lives in exactly one patch.
* ``count-objects``: the answer is the number of non-touching bright blobs.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

TASKS = ("global-majority", "detail-locate", "count-objects")

# RGB cube corners: 8 maximally separated tints.
PALETTE = np.array([[(i >> 2) & 1, (i >> 1) & 1, i & 1] for i in range(8)], dtype=np.float64)


@dataclass(frozen=True)
class TaskSpec:
    name: str = "detail-locate"
    image_size: int = 24
    patch_size: int = 3
    n_answers: int = 8
    noise: float = 0.1
    seed: int = 0
    n_targets: int = 4

    def __post_init__(self):
        if self.name not in TASKS:
            raise ValueError(f"unknown task {self.name!r}; expected one of {TASKS}")
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image size {self.image_size} not divisible by patch size {self.patch_size}")
        if self.noise < 0:
            raise ValueError("noise must be >= 0")
        if self.name == "global-majority" and self.n_answers > len(PALETTE):
            raise ValueError(f"global-majority supports at most {len(PALETTE)} answers")
        if not 1 <= self.n_targets <= self.grid ** 2:
            raise ValueError(f"n_targets must lie in [1, {self.grid ** 2}]")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_questions(self):
        return self.n_targets if self.name == "detail-locate" else 1

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class Samples:
    images: np.ndarray     # (n, 3, S, S) in [0, 1]
    questions: np.ndarray  # (n,) int
    answers: np.ndarray    # (n,) int

    def __len__(self):
        return len(self.answers)

    def __getitem__(self, idx):
        return Samples(self.images[idx], self.questions[idx], self.answers[idx])


@functools.lru_cache(maxsize=None)
def glyph_bank(n_classes, patch_size):
    """Fixed binary glyph patterns, (n_classes, 3, p, p), independent of any seed."""
    rng = np.random.default_rng(20240917)
    size = 3 * patch_size * patch_size
    chosen = []
    while len(chosen) < n_classes:
        cand = rng.integers(0, 2, size=size).astype(np.float64)
        if all(np.abs(cand - c).sum() >= size // 3 for c in chosen):
            chosen.append(cand)
    bank = np.stack(chosen).reshape(n_classes, 3, patch_size, patch_size)
    bank.flags.writeable = False
    return bank


def target_cells(spec):
    """Flat cell indices (row-major) addressed by detail-locate questions."""
    n = spec.grid ** 2
    return np.round(np.linspace(0, n - 1, spec.n_targets)).astype(int)


def _cell_slice(spec, cell):
    p = spec.patch_size
    r, c = divmod(int(cell), spec.grid)
    return slice(r * p, (r + 1) * p), slice(c * p, (c + 1) * p)


def draw_glyph(img, spec, cell, cls):
    """Paint glyph ``cls`` into ``cell`` of a (3, S, S) image in place."""
    rs, cs = _cell_slice(spec, cell)
    img[:, rs, cs] = glyph_bank(spec.n_answers, spec.patch_size)[cls]
    return img


def _rng(spec, seed, index):
    return np.random.default_rng([TASKS.index(spec.name), seed, index])


def _noisy(img, spec, rng):
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _global_majority(spec, rng):
    label = int(rng.integers(spec.n_answers))
    S = spec.image_size
    img = np.broadcast_to(PALETTE[label][:, None, None], (3, S, S)).copy()
    return _noisy(img, spec, rng), 0, label


def _detail_locate(spec, rng):
    S = spec.image_size
    img = rng.uniform(0.0, 1.0, size=(3, S, S))
    glyphs = glyph_bank(spec.n_answers, spec.patch_size)
    classes = rng.integers(spec.n_answers, size=spec.n_targets)
    for cell, cls in zip(target_cells(spec), classes):
        rs, cs = _cell_slice(spec, cell)
        img[:, rs, cs] = glyphs[cls]
    q = int(rng.integers(spec.n_targets))
    return _noisy(img, spec, rng), q, int(classes[q])


def blob_count_distribution(spec):
    """Declared distribution of the number of blobs: uniform on [0, K-1]."""
    return np.full(spec.n_answers, 1.0 / spec.n_answers)


def _count_objects(spec, rng):
    G = spec.grid
    S = spec.image_size
    n = int(rng.choice(spec.n_answers, p=blob_count_distribution(spec)))
    taken = np.zeros((G, G), dtype=bool)
    placed = 0
    for cell in rng.permutation(G * G):
        if placed == n:
            break
        r, c = divmod(int(cell), G)
        if taken[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2].any():
            continue
        taken[r, c] = True
        placed += 1
    if placed < n:
        raise RuntimeError(f"could not place {n} separated blobs on a {G}x{G} grid")
    img = rng.uniform(0.0, 0.3, size=(3, S, S))
    p = spec.patch_size
    for r, c in zip(*np.nonzero(taken)):
        img[:, r * p:(r + 1) * p, c * p:(c + 1) * p] = 1.0
    return _noisy(img, spec, rng), 0, min(n, spec.n_answers - 1)


_GENERATORS = {
    "global-majority": _global_majority,
    "detail-locate": _detail_locate,
    "count-objects": _count_objects,
}


def generate(spec, n, seed=None, start=0):
    """Samples ``start .. start+n-1`` of the stream for ``(spec, seed)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seed = spec.seed if seed is None else seed
    gen = _GENERATORS[spec.name]
    imgs, qs, ys = [], [], []
    for i in range(start, start + n):
        img, q, y = gen(spec, _rng(spec, seed, i))
        imgs.append(img)
        qs.append(q)
        ys.append(y)
    return Samples(np.stack(imgs), np.array(qs, dtype=np.int64), np.array(ys, dtype=np.int64))


def gen_global_majority(spec, n):
    return generate(dataclasses.replace(spec, name="global-majority"), n)


def gen_detail_locate(spec, n):
    return generate(dataclasses.replace(spec, name="detail-locate"), n)


def gen_count_objects(spec, n):
    return generate(dataclasses.replace(spec, name="count-objects"), n)


def oracle_answer(spec, image, question):
    """Recover the label from pixels alone, task by task."""
    p = spec.patch_size
    if spec.name == "global-majority":
        mean = image.reshape(3, -1).mean(axis=1)
        return int(np.argmin(((PALETTE[:spec.n_answers] - mean) ** 2).sum(axis=1)))
    if spec.name == "detail-locate":
        rs, cs = _cell_slice(spec, target_cells(spec)[question])
        patch = image[:, rs, cs]
        glyphs = glyph_bank(spec.n_answers, p)
        return int(np.argmin(((glyphs - patch) ** 2).reshape(len(glyphs), -1).sum(axis=1)))
    G = spec.grid
    cells = image.reshape(3, G, p, G, p).mean(axis=(0, 2, 4)) > 0.5
    _, n = ndimage.label(cells, structure=np.ones((3, 3)))
    return min(int(n), spec.n_answers - 1)


def sample_hashes(samples):
    return {
        hashlib.sha256(img.tobytes() + bytes([int(q) & 0xFF, int(y) & 0xFF])).hexdigest()
        for img, q, y in zip(samples.images, samples.questions, samples.answers)
    }


class TaskStream:
    """Infinite on-the-fly training stream: batch ``k`` covers indices k*B .. k*B+B-1."""

    def __init__(self, spec, seed=None):
        self.spec = spec
        self.seed = spec.seed if seed is None else seed

    def batch(self, index, batch_size):
        return generate(self.spec, batch_size, seed=self.seed, start=index * batch_size)


def save_dataset(samples, spec, seed, path):
    """Write ``<path>.bin`` (images, questions, answers as little-endian arrays)
    and ``<path>.json`` (spec, seed, n, sha256 checksum)."""
    blob = (np.ascontiguousarray(samples.images, dtype="<f8").tobytes()
            + np.ascontiguousarray(samples.questions, dtype="<i8").tobytes()
            + np.ascontiguousarray(samples.answers, dtype="<i8").tobytes())
    with open(f"{path}.bin", "wb") as fh:
        fh.write(blob)
    manifest = {
        "version": 1,
        "spec": spec.to_dict(),
        "seed": seed,
        "n": len(samples),
        "image_shape": list(samples.images.shape[1:]),
        "checksum": hashlib.sha256(blob).hexdigest(),
    }
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def load_dataset(path):
    with open(f"{path}.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    with open(f"{path}.bin", "rb") as fh:
        blob = fh.read()
    if hashlib.sha256(blob).hexdigest() != manifest["checksum"]:
        raise ValueError(f"checksum mismatch for {path}.bin")
    n = manifest["n"]
    shape = tuple(manifest["image_shape"])
    n_img = n * int(np.prod(shape))
    images = np.frombuffer(blob, dtype="<f8", count=n_img).reshape((n,) + shape).copy()
    rest = np.frombuffer(blob, dtype="<i8", offset=8 * n_img)
    return Samples(images, rest[:n].astype(np.int64), rest[n:].astype(np.int64)), manifest
