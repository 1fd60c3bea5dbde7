"""Synthetic slides with multiple-instance semantics.

A slide is a bag of small textured patches.  Each slide has a dominant
texture family (task B) and, for tumor slides, one or more patches carrying a
bright blob (task A = any tumor patch present).  Generation is a pure
function of the config: slide ``i`` draws from ``SeedSequence([seed, i])``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, FormatError

TUMOR = "tumor"
NORMAL = "normal"


@dataclass(frozen=True)
class GenConfig:
    n_slides: int = 200
    n_patches: int = 64
    tumor_slide_fraction: float = 0.5
    tumor_patch_fraction: float = 0.1
    texture_families: int = 4
    noise_scale: float = 0.1
    seed: int = 0
    patch_shape: tuple[int, int, int] = (8, 8, 3)
    dominant_fraction: float = 0.75
    blob_amplitude: float = 0.6
    patch_cap: int = 7000

    def validate(self) -> None:
        def bad(key, value, rule):
            raise ConfigurationError(f"data.{key}: {value!r} must satisfy {rule}")

        if not 0.0 <= self.tumor_slide_fraction <= 1.0:
            bad("tumor_slide_fraction", self.tumor_slide_fraction, "0 <= x <= 1")
        if not 0.0 < self.tumor_patch_fraction < 1.0:
            bad("tumor_patch_fraction", self.tumor_patch_fraction, "0 < x < 1")
        if not 0.0 < self.dominant_fraction <= 1.0:
            bad("dominant_fraction", self.dominant_fraction, "0 < x <= 1")
        if self.n_slides < 1:
            bad("n_slides", self.n_slides, "n_slides >= 1")
        if not 1 <= self.n_patches <= self.patch_cap:
            bad("n_patches", self.n_patches, f"1 <= n_patches <= patch_cap ({self.patch_cap})")
        if self.texture_families < 1:
            bad("texture_families", self.texture_families, "texture_families >= 1")
        if self.noise_scale < 0:
            bad("noise_scale", self.noise_scale, "noise_scale >= 0")
        shape = tuple(self.patch_shape)
        if len(shape) != 3 or not all(isinstance(v, int) for v in shape):
            bad("patch_shape", self.patch_shape, "three integers [H, W, C]")
        h, w, c = shape
        if min(h, w) < 3 or c < 1:
            bad("patch_shape", self.patch_shape, "H, W >= 3 and C >= 1")


@dataclass(frozen=True)
class PatchRecord:
    pixels: np.ndarray
    semantic_tag: str
    texture_family: int


@dataclass
class Slide:
    slide_id: int
    pixels: np.ndarray  # (N, H, W, C), read-only
    tags: tuple[str, ...]
    families: tuple[int, ...]
    labels: dict[str, int]
    seed: int

    def __len__(self) -> int:
        return self.pixels.shape[0]

    @property
    def patches(self) -> list[PatchRecord]:
        return [PatchRecord(p, t, f) for p, t, f in zip(self.pixels, self.tags, self.families)]

    def with_pixels(self, pixels: np.ndarray) -> Slide:
        pixels = np.array(pixels, dtype=np.float64)
        pixels.flags.writeable = False
        return Slide(self.slide_id, pixels, self.tags, self.families, dict(self.labels), self.seed)


@dataclass
class Dataset:
    slides: list[Slide]
    gen_config: GenConfig
    master_seed: int = field(init=False)

    def __post_init__(self):
        self.master_seed = self.gen_config.seed

    def __len__(self) -> int:
        return len(self.slides)

    def __iter__(self):
        return iter(self.slides)

    def __getitem__(self, i) -> Slide:
        return self.slides[i]

    def subset(self, indices: Sequence[int]) -> Dataset:
        return Dataset([self.slides[i] for i in indices], self.gen_config)

    @property
    def task_classes(self) -> dict[str, int]:
        return {"A": 2, "B": self.gen_config.texture_families}


def texture_bank(families: int, patch_shape) -> np.ndarray:
    """Fixed smooth base patterns, one per family: (F, H, W, C)."""
    h, w, c = patch_shape
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    bank = np.empty((families, h, w, c))
    for k in range(families):
        angle = np.pi * k / families
        wave = np.sin(2 * np.pi * (np.cos(angle) * xx + np.sin(angle) * yy) + 0.7 * k)
        for ch in range(c):
            tint = 0.2 + 0.1 * ((k + ch) % 3)
            bank[k, :, :, ch] = tint + 0.1 * wave * np.cos(np.pi * ch / max(c, 1) + k)
    return bank


def slide_seed(master_seed: int, slide_id: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(master_seed), int(slide_id)])


def generate_slide(cfg: GenConfig, slide_id: int, bank: np.ndarray | None = None) -> Slide:
    if bank is None:
        bank = texture_bank(cfg.texture_families, cfg.patch_shape)
    rng = np.random.default_rng(slide_seed(cfg.seed, slide_id))
    n = cfg.n_patches
    h, w, c = cfg.patch_shape
    families_n = cfg.texture_families

    is_tumor = bool(rng.random() < cfg.tumor_slide_fraction)
    dominant = int(rng.integers(families_n))
    fam = np.full(n, dominant)
    if families_n > 1:
        off = rng.random(n) >= cfg.dominant_fraction
        others = (dominant + rng.integers(1, families_n, size=n)) % families_n
        fam = np.where(off, others, fam)
    pixels = bank[fam] + rng.uniform(-cfg.noise_scale, cfg.noise_scale, size=(n, h, w, c))

    tumor = np.zeros(n, dtype=bool)
    if is_tumor:
        m = max(1, int(rng.binomial(n, cfg.tumor_patch_fraction)))
        tumor[rng.choice(n, size=m, replace=False)] = True
        for i in np.flatnonzero(tumor):
            r, q = rng.integers(0, h - 2), rng.integers(0, w - 2)
            pixels[i, r : r + 3, q : q + 3, :] += cfg.blob_amplitude

    pixels = np.clip(pixels, 0.0, 1.0)
    pixels.flags.writeable = False
    tags = tuple(TUMOR if t else NORMAL for t in tumor)
    labels = {"A": int(tumor.any()), "B": dominant}
    return Slide(slide_id, pixels, tags, tuple(int(f) for f in fam), labels, int(cfg.seed))


def generate_dataset(cfg: GenConfig | None = None, **overrides) -> Dataset:
    cfg = cfg or GenConfig()
    if overrides:
        cfg = GenConfig(**{**asdict(cfg), **overrides})
    cfg.validate()
    bank = texture_bank(cfg.texture_families, cfg.patch_shape)
    return Dataset([generate_slide(cfg, i, bank) for i in range(cfg.n_slides)], cfg)


# --- partitions -------------------------------------------------------------

def _by_class(dataset: Dataset, rng: np.random.Generator) -> list[np.ndarray]:
    labels = np.array([s.labels["A"] for s in dataset.slides])
    return [rng.permutation(np.flatnonzero(labels == c)) for c in np.unique(labels)]


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified (by task A) train/test partition."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigurationError(f"train_fraction: {train_fraction!r} must satisfy 0 < x < 1")
    rng = np.random.default_rng(seed)
    groups = _by_class(dataset, rng)
    total = int(round(train_fraction * len(dataset)))
    exact = np.array([train_fraction * len(g) for g in groups])
    take = np.floor(exact).astype(int)
    # largest remainder so the overall count hits round(fraction * n)
    for j in np.argsort(-(exact - take), kind="stable")[: max(0, total - take.sum())]:
        take[j] += 1
    train = np.sort(np.concatenate([g[:t] for g, t in zip(groups, take)]))
    test = np.sort(np.concatenate([g[t:] for g, t in zip(groups, take)]))
    return dataset.subset(train), dataset.subset(test)


def kfold(dataset: Dataset, k: int, seed: int) -> list[tuple[Dataset, Dataset]]:
    """Stratified k-fold partition; returns (train, test) per fold."""
    if k < 2:
        raise ConfigurationError(f"k: {k!r} must satisfy k >= 2")
    rng = np.random.default_rng(seed)
    groups = _by_class(dataset, rng)
    for g in groups:
        if len(g) < k:
            raise ConfigurationError(f"k: class with {len(g)} slides has fewer members than k={k}")
    folds: list[list[int]] = [[] for _ in range(k)]
    offset = 0
    for g in groups:
        for j, idx in enumerate(g):
            folds[(offset + j) % k].append(int(idx))
        offset += len(g)
    out = []
    for f in range(k):
        test = sorted(folds[f])
        train = sorted(i for j in range(k) if j != f for i in folds[j])
        out.append((dataset.subset(train), dataset.subset(test)))
    return out


# --- manifest -----------------------------------------------------------------

def save_manifest(dataset: Dataset, path) -> None:
    """Store the dataset by recipe; pixels are regenerated on load."""
    doc = {"format_version": "1", "gen_config": asdict(dataset.gen_config)}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> Dataset:
    try:
        doc = json.loads(Path(path).read_text())
        raw = dict(doc["gen_config"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: not a dataset manifest ({exc})") from None
    if doc.get("format_version") != "1":
        raise FormatError(f"{path}: format_version {doc.get('format_version')!r} is not '1'")
    raw["patch_shape"] = tuple(raw.get("patch_shape", (8, 8, 3)))
    try:
        cfg = GenConfig(**raw)
    except TypeError as exc:
        raise FormatError(f"{path}: bad gen_config ({exc})") from None
    return generate_dataset(cfg)
