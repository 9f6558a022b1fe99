"""Synthetic identity/style datasets and the on-disk dataset layout.

Identity sets draw one fixed character (round head, two ears, two eyes) at
small random offsets over varying gradient backgrounds. Style sets draw
random shapes and push them through a fixed palette + hatching transform.
Both are generated procedurally so that identity and style can be scored
without a human in the loop.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError
from .unet import tokenize

ID_TRIGGER = "zkchar"
STYLE_TRIGGER = "zkstyle"
ID_CLASS = "character"
STYLE_CLASS = "shapes"

BACKGROUNDS = {
    "blue background": ((0.15, 0.25, 0.55), (0.25, 0.40, 0.70)),
    "green background": ((0.15, 0.45, 0.20), (0.30, 0.55, 0.30)),
    "red background": ((0.55, 0.15, 0.15), (0.70, 0.30, 0.25)),
    "gray background": ((0.32, 0.32, 0.35), (0.42, 0.42, 0.44)),
    "teal background": ((0.10, 0.45, 0.45), (0.20, 0.55, 0.55)),
    "brown background": ((0.40, 0.28, 0.15), (0.50, 0.38, 0.25)),
}
SHAPE_COLORS = {
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
    "red": (0.90, 0.15, 0.15),
    "green": (0.15, 0.80, 0.25),
    "blue": (0.15, 0.30, 0.90),
    "yellow": (0.95, 0.85, 0.15),
}
SHAPES = ("circle", "square", "triangle")
BODY_COLOR = (0.96, 0.82, 0.30)
EYE_COLOR = (0.08, 0.06, 0.05)


@dataclass(frozen=True)
class Style:
    name: str
    palette: tuple[tuple[float, float, float], ...]
    thresholds: tuple[float, ...]
    hatch: str  # "diagonal" | "horizontal"
    hatch_period: int = 6
    hatch_width: int = 2
    hatch_gain: float = 0.7


STYLES = {
    "sunset": Style(
        "sunset",
        ((0.20, 0.05, 0.32), (0.78, 0.16, 0.46), (0.98, 0.55, 0.15), (1.00, 0.95, 0.72)),
        (0.22, 0.50, 0.70),
        "diagonal",
    ),
    "ice": Style(
        "ice",
        ((0.02, 0.10, 0.20), (0.10, 0.45, 0.55), (0.55, 0.85, 0.90), (0.92, 0.97, 1.00)),
        (0.22, 0.50, 0.70),
        "horizontal",
    ),
}


def synthetic_vocabulary() -> list[str]:
    """Every tag the synthetic generators can emit, triggers included."""
    vocab = [ID_TRIGGER, STYLE_TRIGGER, ID_CLASS, STYLE_CLASS]
    vocab += list(BACKGROUNDS)
    vocab += list(SHAPES) + list(SHAPE_COLORS)
    return vocab


# --------------------------------------------------------------------------- drawing


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    return np.mgrid[0:size, 0:size].astype(np.float64)


def _triangle_mask(yy, xx, p0, p1, p2) -> np.ndarray:
    def edge(a, b):
        return (xx - a[1]) * (b[0] - a[0]) - (yy - a[0]) * (b[1] - a[1])

    e0, e1, e2 = edge(p0, p1), edge(p1, p2), edge(p2, p0)
    return ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | ((e0 <= 0) & (e1 <= 0) & (e2 <= 0))


def gradient_background(size: int, top, bottom) -> np.ndarray:
    ramp = np.linspace(0.0, 1.0, size)[:, None, None]
    img = (1.0 - ramp) * np.asarray(top) + ramp * np.asarray(bottom)
    return np.broadcast_to(img, (size, size, 3)).copy()


@dataclass(frozen=True)
class IdentityTemplate:
    """Canonical silhouette and landmarks of the synthetic character.

    ``reference`` is the silhouette as recovered by the scoring pipeline from a
    canonical rendering, so that images and template pass through the same
    thresholding and smoothing.
    """

    size: int
    silhouette: np.ndarray  # (H, W) bool
    eyes: np.ndarray  # (H, W) bool
    landmarks: dict
    reference: np.ndarray | None = None

    @property
    def centroid(self) -> np.ndarray:
        ys, xs = np.nonzero(self.reference if self.reference is not None else self.silhouette)
        return np.array([ys.mean(), xs.mean()])


def identity_template(size: int = 32) -> IdentityTemplate:
    u = size / 32.0
    yy, xx = _grid(size)
    cy, cx, r = 17.5 * u, 15.5 * u, 8.0 * u
    head = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    ear_l = _triangle_mask(yy, xx, (13 * u, 8 * u), (4 * u, 9 * u), (11 * u, 14 * u))
    ear_r = _triangle_mask(yy, xx, (13 * u, 23 * u), (4 * u, 22 * u), (11 * u, 17 * u))
    sil = head | ear_l | ear_r
    eye_r = 1.5 * u
    eyes = ((yy - 16 * u) ** 2 + (xx - 12.5 * u) ** 2 <= eye_r**2) | ((yy - 16 * u) ** 2 + (xx - 18.5 * u) ** 2 <= eye_r**2)
    landmarks = {
        "center": (cy, cx),
        "left_eye": (16 * u, 12.5 * u),
        "right_eye": (16 * u, 18.5 * u),
        "left_ear": (4 * u, 9 * u),
        "right_ear": (4 * u, 22 * u),
    }
    tpl = IdentityTemplate(size, sil, eyes, landmarks)
    from .metrics import silhouette

    ref = silhouette(to_model_range(render_identity(tpl)))
    return IdentityTemplate(size, sil, eyes, landmarks, ref)


def _shift(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys = slice(max(dy, 0), h + min(dy, 0))
    xs = slice(max(dx, 0), w + min(dx, 0))
    yd = slice(max(-dy, 0), h + min(-dy, 0))
    xd = slice(max(-dx, 0), w + min(-dx, 0))
    out[ys, xs] = mask[yd, xd]
    return out


def render_identity(template: IdentityTemplate, shift=(0, 0), background: str = "blue background") -> np.ndarray:
    """(H, W, 3) image in [0, 1] with the character translated by integer ``shift`` (dy, dx)."""
    top, bottom = BACKGROUNDS[background]
    img = gradient_background(template.size, top, bottom)
    sil = _shift(template.silhouette, *shift)
    eyes = _shift(template.eyes, *shift)
    img[sil] = BODY_COLOR
    img[eyes & sil] = EYE_COLOR
    return img


def render_generic_character(size: int, rng: np.random.Generator, background: str = "blue background") -> np.ndarray:
    """An earless character with a random elliptical head: the class prior, never the identity."""
    u = size / 32.0
    img = gradient_background(size, *BACKGROUNDS[background])
    yy, xx = _grid(size)
    cy, cx = (16 + rng.uniform(-4, 4)) * u, (16 + rng.uniform(-4, 4)) * u
    ry, rx = rng.uniform(5, 10) * u, rng.uniform(5, 10) * u
    head = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    img[head] = rng.uniform(0.2, 1.0, size=3)
    for side in (-1, 1):
        eye = (yy - (cy - 0.1 * ry)) ** 2 + (xx - (cx + side * 0.4 * rx)) ** 2 <= (1.5 * u) ** 2
        img[eye & head] = EYE_COLOR
    return img


def render_shapes(size: int, rng: np.random.Generator) -> tuple[np.ndarray, list[str]]:
    """Random shapes over a random background. Returns (image in [0, 1], tags)."""
    bg = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
    img = gradient_background(size, *BACKGROUNDS[bg])
    yy, xx = _grid(size)
    tags: list[str] = []
    for _ in range(rng.integers(1, 4)):
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = list(SHAPE_COLORS)[rng.integers(len(SHAPE_COLORS))]
        cy, cx = rng.uniform(0.2, 0.8, size=2) * size
        r = rng.uniform(0.12, 0.25) * size
        if shape == "circle":
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif shape == "square":
            mask = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        else:
            mask = _triangle_mask(yy, xx, (cy - r, cx), (cy + r, cx - r), (cy + r, cx + r))
        img[mask] = SHAPE_COLORS[color]
        for tag in (color, shape):
            if tag not in tags:
                tags.append(tag)
    return img, tags


def apply_style(img: np.ndarray, style: Style | str = "sunset") -> np.ndarray:
    """Posterize luminance onto the style palette, then darken a periodic hatch pattern."""
    style = STYLES[style] if isinstance(style, str) else style
    lum = img @ np.array([0.299, 0.587, 0.114])
    idx = np.digitize(lum, style.thresholds)
    out = np.asarray(style.palette)[idx]
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    phase = (xx + yy) if style.hatch == "diagonal" else yy
    hatch = (phase % style.hatch_period) < style.hatch_width
    out[hatch] *= style.hatch_gain
    return out


def to_model_range(img: np.ndarray, dtype=np.float32) -> np.ndarray:
    """(H, W, 3) in [0, 1] -> (3, H, W) in [-1, 1]."""
    return (np.asarray(img).transpose(2, 0, 1) * 2.0 - 1.0).astype(dtype)


def to_unit_range(img: np.ndarray) -> np.ndarray:
    """(3, H, W) in [-1, 1] -> (H, W, 3) in [0, 1]."""
    return np.clip((np.asarray(img, dtype=np.float64).transpose(1, 2, 0) + 1.0) / 2.0, 0.0, 1.0)


# --------------------------------------------------------------------------- datasets


@dataclass
class TrainDataset:
    instance_images: np.ndarray  # (N, 3, H, W) in [-1, 1]
    instance_captions: list[str]
    trigger: str
    repeats: int = 25
    reg_images: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 32, 32), np.float32))
    reg_captions: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.instance_images) != len(self.instance_captions):
            raise ContractError("instance images and captions differ in count")
        if len(self.reg_images) != len(self.reg_captions):
            raise ContractError("regularization images and captions differ in count")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        for c in self.instance_captions:
            toks = tokenize(c)
            if not toks or toks[0] != self.trigger:
                raise ContractError(f"instance caption {c!r} must begin with trigger {self.trigger!r}")
        for c in self.reg_captions:
            if self.trigger in tokenize(c):
                raise ContractError(f"regularization caption {c!r} contains the trigger {self.trigger!r}")

    @property
    def image_size(self) -> int:
        return int(self.instance_images.shape[-1])

    @property
    def stream_length(self) -> int:
        return len(self.instance_images) * self.repeats

    def with_regularization(self, images: np.ndarray, captions: Sequence[str]) -> "TrainDataset":
        return TrainDataset(self.instance_images, list(self.instance_captions), self.trigger, self.repeats,
                            np.asarray(images, dtype=self.instance_images.dtype), list(captions))


class InstanceStream:
    """Each image repeated ``repeats`` times per epoch, reshuffled every epoch from a seeded rng."""

    def __init__(self, n_images: int, repeats: int, rng: np.random.Generator):
        self.base = np.repeat(np.arange(n_images), repeats)
        self.rng = rng
        self.order = self.rng.permutation(self.base)
        self.pos = 0
        self.epoch = 0

    def take(self, k: int) -> np.ndarray:
        out = []
        while len(out) < k:
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(self.base)
                self.pos = 0
                self.epoch += 1
            out.append(self.order[self.pos])
            self.pos += 1
        return np.array(out)


def identity_dataset(count: int = 8, size: int = 32, seed: int = 0, repeats: int = 25,
                     trigger: str = ID_TRIGGER, max_shift: int = 2) -> tuple[TrainDataset, IdentityTemplate]:
    rng = np.random.default_rng(seed)
    tpl = identity_template(size)
    images, captions = [], []
    names = list(BACKGROUNDS)
    for i in range(count):
        bg = names[i % len(names)] if i < len(names) else names[rng.integers(len(names))]
        shift = tuple(int(s) for s in rng.integers(-max_shift, max_shift + 1, size=2))
        images.append(to_model_range(render_identity(tpl, shift, bg)))
        captions.append(f"{trigger}, {ID_CLASS}, {bg}")
    return TrainDataset(np.stack(images), captions, trigger, repeats), tpl


def style_images(count: int, size: int = 32, seed: int = 0, style: str | None = "sunset") -> tuple[np.ndarray, list[list[str]]]:
    rng = np.random.default_rng(seed)
    images, tags = [], []
    for _ in range(count):
        img, t = render_shapes(size, rng)
        if style is not None:
            img = apply_style(img, style)
        images.append(to_model_range(img))
        tags.append(t)
    return np.stack(images), tags


def style_dataset(count: int = 8, size: int = 32, seed: int = 0, repeats: int = 25,
                  trigger: str = STYLE_TRIGGER, style: str = "sunset") -> TrainDataset:
    images, tags = style_images(count, size, seed, style)
    captions = [", ".join([trigger, STYLE_CLASS, *t]) for t in tags]
    return TrainDataset(images, captions, trigger, repeats)


def generic_corpus(count: int, size: int = 32, seed: int = 0) -> tuple[np.ndarray, list[str]]:
    """Unstyled shapes and trigger-free characters: a stand-in pre-training corpus for the base model."""
    rng = np.random.default_rng(seed)
    images, captions = [], []
    names = list(BACKGROUNDS)
    for i in range(count):
        if i % 4 == 3:
            bg = names[rng.integers(len(names))]
            img = render_generic_character(size, rng, bg)
            captions.append(f"{ID_CLASS}, {bg}")
        else:
            img, tags = render_shapes(size, rng)
            captions.append(", ".join([STYLE_CLASS, *tags]))
        images.append(to_model_range(img))
    return np.stack(images), captions


# --------------------------------------------------------------------------- directory layout


def save_dataset(dataset: TrainDataset, root: str | os.PathLike) -> Path:
    """Write ``instance/<name>.png`` + ``.txt`` and ``reg/<name>.png`` + ``.txt``."""
    from .sampler import save_png

    root = Path(root)
    for sub, images, captions in (("instance", dataset.instance_images, dataset.instance_captions),
                                  ("reg", dataset.reg_images, dataset.reg_captions)):
        (root / sub).mkdir(parents=True, exist_ok=True)
        for i, (img, cap) in enumerate(zip(images, captions)):
            save_png(root / sub / f"{i:04d}.png", img)
            (root / sub / f"{i:04d}.txt").write_text(cap + "\n")
    return root


def _read_split(folder: Path, dtype) -> tuple[np.ndarray, list[str]]:
    from .sampler import load_png

    if not folder.is_dir():
        return None, []
    pngs = sorted(folder.glob("*.png"))
    images, captions = [], []
    for png in pngs:
        txt = png.with_suffix(".txt")
        if not txt.exists():
            raise ContractError(f"missing caption file {txt}")
        images.append(load_png(png, dtype))
        captions.append(txt.read_text().strip())
    if not images:
        return None, []
    return np.stack(images), captions


def load_dataset(root: str | os.PathLike, repeats: int = 25, trigger: str | None = None, dtype=np.float32) -> TrainDataset:
    root = Path(root)
    inst, inst_caps = _read_split(root / "instance", dtype)
    if inst is None:
        raise ContractError(f"dataset at {root} has no instance images")
    if trigger is None:
        trigger = tokenize(inst_caps[0])[0]
    reg, reg_caps = _read_split(root / "reg", dtype)
    if reg is None:
        reg = np.zeros((0,) + inst.shape[1:], dtype=dtype)
    return TrainDataset(inst, inst_caps, trigger, repeats, reg, reg_caps)


def dataset_vocabulary(*datasets: TrainDataset) -> list[str]:
    vocab: dict[str, None] = {}
    for ds in datasets:
        for cap in list(ds.instance_captions) + list(ds.reg_captions):
            for tok in tokenize(cap):
                vocab.setdefault(tok)
    return list(vocab)
