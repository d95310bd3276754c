"""Deterministic synthetic classification tasks with a controllable
correlation knob.

Images come from per-class template generators: a low-resolution class
template is jittered, upsampled, smoothed, and channel-mixed by a fixed
"style" matrix.  Correlation between a source task and a downstream task
is realized through *shared generator parameters*, not shared images:

  subset  - reuses a subset of the source class generators verbatim
  strong  - source templates plus a mild fixed perturbation, same style
  weak    - heavily blended templates and a substantially rotated style
  none    - entirely fresh generators; zero arrays shared with source

This gives four task families whose transferability from a
source-pretrained backbone degrades in that order, which is what the
ordering experiments measure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

UPSAMPLE = 4
TEMPLATE_JITTER = 0.55
PIXEL_NOISE = 0.04
STRONG_SHIFT = 0.5
STRONG_STYLE_KEEP = 0.65
WEAK_KEEP = 0.35
WEAK_FRESH = 1.0
WEAK_STYLE_KEEP = 0.25

TASK_KINDS = ("subset", "strong", "weak", "none")


@dataclass(frozen=True)
class TaskSpec:
    kind: str
    image_size: int = 32
    classes: int = 4
    train_samples: int = 64
    val_samples: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.image_size % UPSAMPLE != 0:
            raise ValueError(f"image_size must be a multiple of {UPSAMPLE}")
        if self.train_samples % self.classes or self.val_samples % self.classes:
            raise ValueError("sample counts must divide evenly by classes "
                             "(class balance is exact by construction)")


@dataclass
class Generators:
    """Frozen parameters of one task's image generator."""

    templates: np.ndarray   # K x 3 x g x g
    style: np.ndarray       # 3 x 3 channel mixing
    kernel: np.ndarray      # 3 x 3 spatial smoothing

    def arrays(self):
        return (self.templates, self.style, self.kernel)

    def shares_nothing_with(self, other: "Generators") -> bool:
        for a in self.arrays():
            for b in other.arrays():
                if a.shape == b.shape and np.array_equal(a, b):
                    return False
                if np.shares_memory(a, b):
                    return False
        return True


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    n_classes: int
    kind: str
    gens: Generators = field(repr=False, default=None)


def _smooth(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Same-size 3x3 depthwise smoothing via shift-and-add."""
    c, h, w = img.shape
    padded = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(img)
    for i in range(3):
        for j in range(3):
            out += kernel[i, j] * padded[:, i:i + h, j:j + w]
    return out


def _render(gens: Generators, cls: int, rng: np.random.Generator,
            image_size: int) -> np.ndarray:
    t = gens.templates[cls] \
        + TEMPLATE_JITTER * rng.standard_normal(gens.templates[cls].shape)
    up = np.kron(t, np.ones((UPSAMPLE, UPSAMPLE)))
    img = _smooth(up, gens.kernel)
    img = np.einsum("ij,jhw->ihw", gens.style, img)
    img += PIXEL_NOISE * rng.standard_normal(img.shape)
    return img.astype(np.float32)


def _fresh_generators(rng: np.random.Generator, classes: int,
                      image_size: int) -> Generators:
    g = image_size // UPSAMPLE
    templates = rng.standard_normal((classes, 3, g, g))
    style = rng.standard_normal((3, 3)) * 0.45 + np.eye(3)
    kernel = rng.random((3, 3)) + 0.15
    kernel /= kernel.sum()
    return Generators(templates, style, kernel)


def _build_split(gens: Generators, classes: int, per_class: int,
                 rng: np.random.Generator, image_size: int):
    xs, ys = [], []
    for cls in range(classes):
        for _ in range(per_class):
            xs.append(_render(gens, cls, rng, image_size))
            ys.append(cls)
    x = np.stack(xs)
    y = np.asarray(ys, dtype=np.int64)
    order = rng.permutation(len(y))
    return x[order], y[order]


def _make_dataset(gens: Generators, classes: int, train_samples: int,
                  val_samples: int, seed: int, image_size: int,
                  kind: str) -> Dataset:
    rng = np.random.default_rng(seed)
    x_tr, y_tr = _build_split(gens, classes, train_samples // classes, rng,
                              image_size)
    x_va, y_va = _build_split(gens, classes, val_samples // classes, rng,
                              image_size)
    return Dataset(x_tr, y_tr, x_va, y_va, classes, kind, gens)


def make_source_task(seed: int, classes: int = 6, image_size: int = 32,
                     train_samples: int = 96, val_samples: int = 48):
    """The upstream task: dataset plus its frozen teacher generators."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC0FFEE)))
    gens = _fresh_generators(rng, classes, image_size)
    data = _make_dataset(gens, classes, train_samples, val_samples,
                         seed, image_size, "source")
    return data, gens


def make_target_task(spec: TaskSpec, source_gens: Generators) -> Dataset:
    """A downstream task whose generators share structure with the source
    according to ``spec.kind``."""
    n_source = source_gens.templates.shape[0]
    image_size = spec.image_size
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed,
                                                        0x7A58)))
    if spec.kind == "subset":
        if spec.classes > n_source:
            raise ValueError(
                f"subset task wants {spec.classes} classes but the source "
                f"has only {n_source}")
        gens = Generators(source_gens.templates[:spec.classes].copy(),
                          source_gens.style.copy(),
                          source_gens.kernel.copy())
    elif spec.kind == "strong":
        fresh = _fresh_generators(rng, spec.classes, image_size)
        base = _tile_templates(source_gens.templates, spec.classes)
        style = _mix_styles(source_gens.style, fresh.style,
                            STRONG_STYLE_KEEP)
        gens = Generators(base + STRONG_SHIFT * fresh.templates,
                          style, source_gens.kernel.copy())
    elif spec.kind == "weak":
        fresh = _fresh_generators(rng, spec.classes, image_size)
        base = _tile_templates(source_gens.templates, spec.classes)
        style = _mix_styles(source_gens.style, fresh.style, WEAK_STYLE_KEEP)
        gens = Generators(WEAK_KEEP * base + WEAK_FRESH * fresh.templates,
                          style, fresh.kernel)
    else:  # none: fully independent generators
        gens = _fresh_generators(rng, spec.classes, image_size)
    return _make_dataset(gens, spec.classes, spec.train_samples,
                         spec.val_samples, spec.seed, image_size, spec.kind)


def _tile_templates(templates: np.ndarray, classes: int) -> np.ndarray:
    if classes <= templates.shape[0]:
        return templates[:classes].copy()
    reps = -(-classes // templates.shape[0])
    return np.tile(templates, (reps, 1, 1, 1))[:classes]


def _mix_styles(src: np.ndarray, fresh: np.ndarray, keep: float) -> np.ndarray:
    """Blend styles, rescaled to the source norm so the drift changes
    direction (feature mismatch) without changing signal power."""
    mixed = keep * src + (1.0 - keep) * fresh
    return mixed * (np.linalg.norm(src) / np.linalg.norm(mixed))
