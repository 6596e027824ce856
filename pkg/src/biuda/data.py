"""Synthetic two-domain segmentation datasets.

Each case is a shared "anatomy" (nested smooth blobs) rendered once per
domain with domain-specific appearance (intensity polarity, blur, noise,
texture). Both renderings carry the identical label mask, so a segmenter
trained on one domain can be scored exactly on the other.

On-disk layout::

    root/manifest.json
    root/domain{0,1}/images/case{C}_slice{S}.png
    root/domain{0,1}/masks/case{C}_slice{S}.png
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigurationError, DataError

SOURCE = 0
TARGET = 1

# pad-then-crop margin as a fraction of the image side
CROP_MARGIN = 0.1
MAX_ROTATION_DEG = 15.0


@dataclass
class AppearanceParams:
    """Domain-specific rendering knobs; geometry is shared across domains."""

    polarity: int = 1          # +1: bright structures on dark bg, -1: inverted
    blur_sigma: float = 0.6
    noise_std: float = 0.02
    texture_freq: float = 0.0  # cycles per image side, 0 disables texture
    texture_amp: float = 0.08

    def validate(self) -> None:
        if self.polarity not in (1, -1):
            raise ConfigurationError(f"polarity must be +1 or -1, got {self.polarity}")
        if self.blur_sigma < 0 or self.noise_std < 0 or self.texture_freq < 0:
            raise ConfigurationError("appearance parameters must be nonnegative")


def default_appearances() -> tuple[AppearanceParams, AppearanceParams]:
    # domain 0: clean, bright structures; domain 1: inverted, textured, noisier
    return (
        AppearanceParams(polarity=1, blur_sigma=0.6, noise_std=0.02, texture_freq=0.0),
        AppearanceParams(polarity=-1, blur_sigma=1.2, noise_std=0.05, texture_freq=6.0),
    )


@dataclass
class SynthConfig:
    image_size: int = 64
    num_cases: int = 15           # per domain; cases are paired across domains
    slices_per_case: int = 4
    num_classes: int = 5          # background + 4 nested structures
    num_folds: int = 5
    appearance: tuple[AppearanceParams, AppearanceParams] = field(
        default_factory=default_appearances
    )
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 16:
            raise ConfigurationError(f"image_size must be >= 16, got {self.image_size}")
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.num_cases < 1 or self.slices_per_case < 1:
            raise ConfigurationError("num_cases and slices_per_case must be positive")
        if not (2 <= self.num_folds <= self.num_cases):
            raise ConfigurationError(
                f"num_folds must be in [2, num_cases], got {self.num_folds}"
            )
        for app in self.appearance:
            app.validate()


@dataclass
class ImageSample:
    """One 2D single-channel slice with optional label mask."""

    image: np.ndarray              # (H, W) float32 in [0, 1]
    mask: Optional[np.ndarray]     # (H, W) uint8 labels in {0..K-1}, or None
    domain: int
    case_id: int
    slice_id: int

    def validate(self, num_classes: Optional[int] = None) -> None:
        if self.image.ndim != 2:
            raise ValueError(f"image must be 2D, got shape {self.image.shape}")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        if self.domain not in (SOURCE, TARGET):
            raise ValueError(f"domain must be 0 or 1, got {self.domain}")
        if self.mask is not None:
            if self.mask.shape != self.image.shape:
                raise ValueError(
                    f"mask shape {self.mask.shape} != image shape {self.image.shape}"
                )
            if num_classes is not None and self.mask.max(initial=0) >= num_classes:
                raise ValueError(
                    f"mask contains label {int(self.mask.max())} >= K={num_classes}"
                )


@dataclass
class Manifest:
    classes: list[str]
    domains: list[str]
    image_size: int
    folds: dict[int, int]          # case_id -> fold index
    seed: int

    @property
    def num_classes(self) -> int:
        return len(self.classes)

    def to_json(self) -> str:
        payload = {
            "classes": self.classes,
            "domains": self.domains,
            "image_size": self.image_size,
            "folds": {str(cid): f for cid, f in sorted(self.folds.items())},
            "seed": self.seed,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        raw = json.loads(text)
        return cls(
            classes=list(raw["classes"]),
            domains=list(raw["domains"]),
            image_size=int(raw["image_size"]),
            folds={int(k): int(v) for k, v in raw["folds"].items()},
            seed=int(raw["seed"]),
        )


@dataclass
class DatasetBundle:
    samples: list[ImageSample]
    manifest: Manifest

    def select(
        self,
        domain: Optional[int] = None,
        fold: Optional[int] = None,
        exclude_fold: Optional[int] = None,
    ) -> list[ImageSample]:
        """Samples filtered by domain and fold membership, in stable order."""
        out = []
        for s in self.samples:
            if domain is not None and s.domain != domain:
                continue
            f = self.manifest.folds[s.case_id]
            if fold is not None and f != fold:
                continue
            if exclude_fold is not None and f == exclude_fold:
                continue
            out.append(s)
        return out

    def case_ids(self) -> list[int]:
        return sorted({s.case_id for s in self.samples})


def class_names(num_classes: int) -> list[str]:
    return ["background"] + [f"structure{i}" for i in range(1, num_classes)]


def _blob_mask(
    size: int,
    num_classes: int,
    center: np.ndarray,
    radius: float,
    amps: np.ndarray,
    phases: np.ndarray,
) -> np.ndarray:
    """Nested-band label map from a smooth star-shaped blob boundary."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy = yy - center[0]
    dx = xx - center[1]
    theta = np.arctan2(dy, dx)
    rho = np.hypot(dy, dx)
    rim = np.full_like(rho, radius)
    for k, (a, ph) in enumerate(zip(amps, phases), start=2):
        rim = rim + radius * a * np.cos(k * theta + ph)
    frac = rho / np.maximum(rim, 1.0)
    bands = num_classes - 1
    label = bands - np.floor(frac * bands)
    return np.clip(label, 0, bands).astype(np.uint8)


def _render(
    mask: np.ndarray,
    num_classes: int,
    app: AppearanceParams,
    noise_rng: np.random.Generator,
) -> np.ndarray:
    ramp = 0.2 + 0.6 * np.arange(num_classes) / (num_classes - 1)
    if app.polarity < 0:
        ramp = ramp[::-1]
    img = ramp[mask.astype(np.intp)]
    if app.texture_freq > 0:
        size = mask.shape[0]
        yy, xx = np.mgrid[0 : mask.shape[0], 0 : mask.shape[1]].astype(np.float64)
        img = img + app.texture_amp * np.sin(
            2 * math.pi * app.texture_freq * xx / size
        ) * np.cos(2 * math.pi * app.texture_freq * yy / size)
    if app.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, app.blur_sigma, mode="nearest")
    img = img + app.noise_std * noise_rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_dataset(config: SynthConfig) -> DatasetBundle:
    """Generate the paired two-domain benchmark described in the module docstring."""
    config.validate()
    size = config.image_size
    root_ss = np.random.SeedSequence(config.seed)
    case_seeds = root_ss.spawn(config.num_cases)

    samples: list[ImageSample] = []
    for case_id in range(config.num_cases):
        geo_rng = np.random.default_rng(case_seeds[case_id])
        center = size / 2 + geo_rng.uniform(-0.09 * size, 0.09 * size, size=2)
        base_radius = geo_rng.uniform(0.28, 0.40) * size
        amps = geo_rng.uniform(-0.10, 0.10, size=4)
        phases = geo_rng.uniform(0, 2 * math.pi, size=4)
        # through-slice size profile, peaked mid-case like a volume
        n_slices = config.slices_per_case
        noise_seeds = case_seeds[case_id].spawn(2 * n_slices)
        for slice_id in range(n_slices):
            pos = (slice_id + 1) / (n_slices + 1)
            scale = 0.8 + 0.35 * math.sin(math.pi * pos)
            jitter = geo_rng.uniform(-0.02, 0.02, size=4)
            mask = _blob_mask(
                size, config.num_classes, center, base_radius * scale, amps + jitter, phases
            )
            for domain in (SOURCE, TARGET):
                noise_rng = np.random.default_rng(noise_seeds[2 * slice_id + domain])
                img = _render(mask, config.num_classes, config.appearance[domain], noise_rng)
                samples.append(
                    ImageSample(
                        image=img,
                        mask=mask.copy(),
                        domain=domain,
                        case_id=case_id,
                        slice_id=slice_id,
                    )
                )

    manifest = Manifest(
        classes=class_names(config.num_classes),
        domains=["domainA", "domainB"],
        image_size=size,
        folds={},
        seed=config.seed,
    )
    bundle = DatasetBundle(samples=samples, manifest=manifest)
    split_folds(bundle, config.num_folds)
    return bundle


def split_folds(bundle: DatasetBundle, k: int) -> dict[int, int]:
    """Partition cases (not slices) into k near-equal folds, seeded by the manifest."""
    cases = bundle.case_ids()
    if k < 2 or k > len(cases):
        raise ConfigurationError(f"fold count {k} invalid for {len(cases)} cases")
    rng = np.random.default_rng(np.random.SeedSequence((bundle.manifest.seed, 0xF01D)))
    order = list(rng.permutation(cases))
    folds = {int(cid): i % k for i, cid in enumerate(order)}
    bundle.manifest.folds = folds
    return folds


def save_dataset(bundle: DatasetBundle, path: str | Path) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    (root / "manifest.json").write_text(bundle.manifest.to_json())
    for s in bundle.samples:
        ddir = root / f"domain{s.domain}"
        img_path = ddir / "images" / f"case{s.case_id}_slice{s.slice_id}.png"
        img_path.parent.mkdir(parents=True, exist_ok=True)
        img8 = np.round(np.clip(s.image, 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(img8, mode="L").save(img_path)
        if s.mask is not None:
            mask_path = ddir / "masks" / f"case{s.case_id}_slice{s.slice_id}.png"
            mask_path.parent.mkdir(parents=True, exist_ok=True)
            Image.fromarray(s.mask.astype(np.uint8), mode="L").save(mask_path)


_NAME_RE = re.compile(r"case(\d+)_slice(\d+)\.png$")


def load_dataset(path: str | Path) -> DatasetBundle:
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise DataError(f"missing manifest: {manifest_path}")
    try:
        manifest = Manifest.from_json(manifest_path.read_text())
    except (KeyError, ValueError) as exc:
        raise DataError(f"malformed manifest {manifest_path}: {exc}") from exc

    samples: list[ImageSample] = []
    for domain in (SOURCE, TARGET):
        img_dir = root / f"domain{domain}" / "images"
        mask_dir = root / f"domain{domain}" / "masks"
        if not img_dir.is_dir():
            raise DataError(f"missing image directory: {img_dir}")
        entries = []
        for p in img_dir.glob("case*_slice*.png"):
            m = _NAME_RE.search(p.name)
            if m:
                entries.append((int(m.group(1)), int(m.group(2)), p))
        for case_id, slice_id, img_path in sorted(entries):
            img = np.asarray(Image.open(img_path), dtype=np.float32) / 255.0
            if img.shape != (manifest.image_size, manifest.image_size):
                raise DataError(
                    f"{img_path}: image shape {img.shape} does not match "
                    f"manifest image_size {manifest.image_size}"
                )
            if case_id not in manifest.folds:
                raise DataError(f"{img_path}: case {case_id} missing from manifest folds")
            mask_path = mask_dir / img_path.name
            mask = None
            if mask_path.is_file():
                mask = np.asarray(Image.open(mask_path), dtype=np.uint8)
                if mask.shape != img.shape:
                    raise DataError(
                        f"{mask_path}: mask shape {mask.shape} does not match image"
                    )
                if mask.max(initial=0) >= manifest.num_classes:
                    raise DataError(
                        f"{mask_path}: label {int(mask.max())} out of range for "
                        f"{manifest.num_classes} classes"
                    )
            samples.append(
                ImageSample(image=img, mask=mask, domain=domain, case_id=case_id, slice_id=slice_id)
            )
    return DatasetBundle(samples=samples, manifest=manifest)


def apply_augment(
    image: np.ndarray,
    mask: Optional[np.ndarray],
    dy: int,
    dx: int,
    flip: bool,
    angle_deg: float,
) -> tuple[np.ndarray, Optional[np.ndarray]]:
    """Deterministic crop/flip/rotate; the mask follows with nearest-neighbor labels.

    dy, dx index the crop window into the padded raster; the centered window
    (dy = dx = margin) with flip=False and angle 0 is the identity.
    """
    h, w = image.shape
    margin = int(round(CROP_MARGIN * h))
    dy = int(np.clip(dy, 0, 2 * margin))
    dx = int(np.clip(dx, 0, 2 * margin))

    img = np.pad(image, margin, mode="edge")[dy : dy + h, dx : dx + w]
    msk = None
    if mask is not None:
        msk = np.pad(mask, margin, mode="constant", constant_values=0)[
            dy : dy + h, dx : dx + w
        ]
    if flip:
        img = img[:, ::-1]
        if msk is not None:
            msk = msk[:, ::-1]
    if abs(angle_deg) > 1e-9:
        img = ndimage.rotate(img, angle_deg, reshape=False, order=1, mode="nearest")
        if msk is not None:
            msk = ndimage.rotate(msk, angle_deg, reshape=False, order=0, mode="nearest")
    img = np.clip(np.ascontiguousarray(img, dtype=np.float32), 0.0, 1.0)
    if msk is not None:
        msk = np.ascontiguousarray(msk, dtype=np.uint8)
    return img, msk


def augment(sample: ImageSample, rng: np.random.Generator) -> ImageSample:
    """Random crop (pad-then-crop), horizontal flip (p=0.5), rotation in +/-15 deg."""
    margin = int(round(CROP_MARGIN * sample.image.shape[0]))
    dy = int(rng.integers(0, 2 * margin + 1))
    dx = int(rng.integers(0, 2 * margin + 1))
    flip = bool(rng.random() < 0.5)
    angle = float(rng.uniform(-MAX_ROTATION_DEG, MAX_ROTATION_DEG))
    img, msk = apply_augment(sample.image, sample.mask, dy, dx, flip, angle)
    return replace(sample, image=img, mask=msk)
