"""Synthetic bi-temporal scenes with planted class changes and phenological
pseudo-changes, plus splitting and PNG serialization.

A scene is a Voronoi partition of the grid into land-cover regions. Every
region carries one class and one phenological stage. The t2 image relabels a
set of change cells to a different class (true change) and moves the stage of
some unchanged regions (pseudo-change). Pixel colour is
``clip(base[class] + stage_delta[class, stage]) + noise``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from . import config as cfg
from .config import SceneConfig
from .errors import ConfigError, IngestionError, ValidationError

LAND_COVER = (
    "grassland", "shrubs", "built-up", "bare land", "crops",
    "trees", "water", "paddy", "fallow", "other",
)
CHANGE_CELL_AREA = 144  # pixels per candidate change cell
MAP_FILES = ("sem1.png", "sem2.png", "change.png", "stage1.png", "stage2.png")


@dataclass
class ClassPalette:
    names: list[str]
    base: np.ndarray  # (n_classes, 3)
    stage_deltas: np.ndarray  # (n_classes, n_stages, 3)

    def __post_init__(self):
        self.base = np.asarray(self.base, dtype=np.float64)
        self.stage_deltas = np.asarray(self.stage_deltas, dtype=np.float64)
        n = len(self.names)
        if n < 2:
            raise ConfigError("palette needs at least 2 classes")
        if self.base.shape != (n, 3):
            raise ConfigError(f"palette base must be ({n}, 3), got {self.base.shape}")
        if self.stage_deltas.ndim != 3 or self.stage_deltas.shape[0] != n or self.stage_deltas.shape[2] != 3:
            raise ConfigError(f"palette stage_deltas must be ({n}, S, 3), got {self.stage_deltas.shape}")
        if self.stage_deltas.shape[1] < 2:
            raise ConfigError("palette needs at least 2 stages")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def num_stages(self) -> int:
        return self.stage_deltas.shape[1]

    def signatures(self) -> np.ndarray:
        """Clamped (n_classes, n_stages, 3) noise-free colours."""
        return np.clip(self.base[:, None, :] + self.stage_deltas, 0.0, 1.0)

    def to_json(self) -> dict:
        return {
            "classes": [
                {"class_id": i, "name": name, "base_signature": self.base[i].tolist()}
                for i, name in enumerate(self.names)
            ],
            "stage_deltas": self.stage_deltas.tolist(),
        }

    @classmethod
    def from_json(cls, data: dict) -> "ClassPalette":
        classes = sorted(data["classes"], key=lambda c: c["class_id"])
        if [c["class_id"] for c in classes] != list(range(len(classes))):
            raise ConfigError("palette class_ids must be contiguous from 0")
        return cls(
            names=[c["name"] for c in classes],
            base=[c["base_signature"] for c in classes],
            stage_deltas=data["stage_deltas"],
        )


def default_palette(num_classes: int = 4, num_stages: int = 4,
                    hue_radius: float = 0.3, stage_radius: float = 0.12) -> ClassPalette:
    """Classes sit on a hue circle around mid-grey; each class cycles through
    its stages on a small circle spanned by brightness and its own hue tangent."""
    if num_classes < 2 or num_stages < 2:
        raise ConfigError("palette needs at least 2 classes and 2 stages")
    grey = np.ones(3) / math.sqrt(3.0)
    e1 = np.array([1.0, -1.0, 0.0]) / math.sqrt(2.0)
    e2 = np.cross(grey, e1)
    base, deltas = [], []
    for c in range(num_classes):
        phi = 2 * math.pi * c / num_classes
        radial = math.cos(phi) * e1 + math.sin(phi) * e2
        tangent = -math.sin(phi) * e1 + math.cos(phi) * e2
        base.append(0.5 + hue_radius * radial)
        deltas.append([
            stage_radius * (math.cos(2 * math.pi * s / num_stages) * grey
                            + math.sin(2 * math.pi * s / num_stages) * tangent)
            for s in range(num_stages)
        ])
    names = [LAND_COVER[c] if c < len(LAND_COVER) else f"class_{c}" for c in range(num_classes)]
    return ClassPalette(names, np.array(base), np.array(deltas))


@dataclass
class SceneSample:
    image_t1: np.ndarray  # (H, W, 3) float32 in [0, 1]
    image_t2: np.ndarray
    sem_t1: np.ndarray  # (H, W) uint8
    sem_t2: np.ndarray
    change: np.ndarray  # (H, W) uint8 in {0, 1}
    stage_t1: np.ndarray  # (H, W) uint8
    stage_t2: np.ndarray
    sample_id: str = "sample"
    meta: dict = field(default_factory=dict)

    @property
    def shape(self) -> tuple[int, int]:
        return self.sem_t1.shape

    def maps(self) -> dict[str, np.ndarray]:
        return {
            "sem1.png": self.sem_t1, "sem2.png": self.sem_t2, "change.png": self.change,
            "stage1.png": self.stage_t1, "stage2.png": self.stage_t2,
        }


def _voronoi(rng: np.random.Generator, h: int, w: int, n: int) -> np.ndarray:
    seeds = rng.uniform(0, 1, size=(n, 2)) * np.array([h, w])
    yy, xx = np.mgrid[0:h, 0:w]
    d = (yy[..., None] + 0.5 - seeds[:, 0]) ** 2 + (xx[..., None] + 0.5 - seeds[:, 1]) ** 2
    return np.argmin(d, axis=-1)


def _pick_toward(rng: np.random.Generator, sizes: np.ndarray, target: float) -> list[int]:
    """Visit cells in random order, keeping each one that moves the running
    total closer to ``target``. Always keeps at least one non-empty cell."""
    chosen, total = [], 0
    for idx in rng.permutation(len(sizes)):
        if sizes[idx] == 0:
            continue
        if abs(total + sizes[idx] - target) < abs(total - target):
            chosen.append(int(idx))
            total += sizes[idx]
    if not chosen:
        nonzero = np.flatnonzero(sizes)
        if len(nonzero):
            chosen.append(int(nonzero[np.argmin(sizes[nonzero])]))
    return chosen


def generate_scene(config: SceneConfig, palette: ClassPalette, sample_id: str = "sample") -> SceneSample:
    config = cfg.build(SceneConfig, config.model_dump())
    if config.num_classes != palette.num_classes:
        raise ConfigError(f"num_classes ({config.num_classes}) does not match palette ({palette.num_classes})")
    if config.num_stages != palette.num_stages:
        raise ConfigError(f"num_stages ({config.num_stages}) does not match palette ({palette.num_stages})")

    rng = np.random.default_rng(config.seed)
    h, w = config.height, config.width
    n_cls, n_stg = config.num_classes, config.num_stages

    n_regions = int(rng.integers(config.blob_count[0], config.blob_count[1] + 1))
    regions = _voronoi(rng, h, w, n_regions)
    region_class = rng.integers(0, n_cls, size=n_regions)
    region_stage = rng.integers(0, n_stg, size=n_regions)
    sem1 = region_class[regions]
    stage1 = region_stage[regions]

    sem2 = sem1.copy()
    stage2 = stage1.copy()
    changed = np.zeros((h, w), dtype=bool)
    if config.change_fraction > 0:
        n_cells = max(2, round(h * w / CHANGE_CELL_AREA))
        cells = _voronoi(rng, h, w, n_cells)
        sizes = np.bincount(cells.ravel(), minlength=n_cells)
        for cell in _pick_toward(rng, sizes, config.change_fraction * h * w):
            mask = cells == cell
            offset = int(rng.integers(1, n_cls))
            sem2[mask] = (sem1[mask] + offset) % n_cls
            stage2[mask] = int(rng.integers(0, n_stg))
            changed |= mask

    if config.pseudo_change_fraction > 0:
        unchanged_sizes = np.bincount(regions[~changed], minlength=n_regions)
        target = config.pseudo_change_fraction * unchanged_sizes.sum()
        for region in _pick_toward(rng, unchanged_sizes, target):
            mask = (regions == region) & ~changed
            stage2[mask] = (stage1[mask] + int(rng.integers(1, n_stg))) % n_stg

    signatures = palette.signatures()
    noise1 = rng.normal(0.0, config.noise_sigma, size=(h, w, 3))
    noise2 = rng.normal(0.0, config.noise_sigma, size=(h, w, 3))
    img1 = np.clip(signatures[sem1, stage1] + noise1, 0.0, 1.0).astype(np.float32)
    img2 = np.clip(signatures[sem2, stage2] + noise2, 0.0, 1.0).astype(np.float32)

    return SceneSample(
        image_t1=img1, image_t2=img2,
        sem_t1=sem1.astype(np.uint8), sem_t2=sem2.astype(np.uint8),
        change=(sem1 != sem2).astype(np.uint8),
        stage_t1=stage1.astype(np.uint8), stage_t2=stage2.astype(np.uint8),
        sample_id=sample_id,
        meta={"seed": int(config.seed)},
    )


def sample_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1, dtype=np.uint64)[0])


def generate_dataset(config: SceneConfig, palette: ClassPalette, count: int,
                     seed: int | None = None, prefix: str = "s") -> list[SceneSample]:
    base = config.seed if seed is None else seed
    return [
        generate_scene(config.model_copy(update={"seed": sample_seed(base, i)}), palette, f"{prefix}{i:05d}")
        for i in range(count)
    ]


def split_dataset(samples: Sequence, ratios: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> tuple[list, list, list]:
    """Shuffle under ``seed`` and cut into train/val/test.

    Val and test sizes are floored; the remainder goes to train.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(f"ratios must be three positive numbers summing to 1, got {tuple(ratios)}")
    n = len(samples)
    if n < 3:
        raise ValidationError(f"need at least 3 samples to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = math.floor(n * ratios[1] + 1e-9)
    n_test = math.floor(n * ratios[2] + 1e-9)
    n_train = n - n_val - n_test
    pick = [samples[i] for i in order]
    return pick[:n_train], pick[n_train:n_train + n_val], pick[n_train + n_val:]


# -- serialization -----------------------------------------------------------

def quantize(image: np.ndarray) -> np.ndarray:
    """[0, 1] reals to bytes, rounding half up (0.5 -> 128)."""
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def dequantize(data: np.ndarray) -> np.ndarray:
    return data.astype(np.float32) / np.float32(255.0)


def write_palette(palette: ClassPalette, directory: str | Path) -> None:
    path = Path(directory) / "palette.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(palette.to_json(), indent=2) + "\n")


def read_palette(directory: str | Path) -> ClassPalette:
    path = Path(directory) / "palette.json"
    try:
        return ClassPalette.from_json(json.loads(path.read_text()))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise IngestionError(f"cannot read palette {path}: {exc}") from None


def write_dataset(samples: Sequence[SceneSample], directory: str | Path,
                  palette: ClassPalette | None = None) -> dict:
    root = Path(directory)
    if palette is not None:
        write_palette(palette, root)
    ids = [s.sample_id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValidationError("sample ids must be unique")
    for sample in samples:
        out = root / "samples" / sample.sample_id
        out.mkdir(parents=True, exist_ok=True)
        Image.fromarray(quantize(sample.image_t1)).save(out / "t1.png")
        Image.fromarray(quantize(sample.image_t2)).save(out / "t2.png")
        for name, array in sample.maps().items():
            Image.fromarray(np.ascontiguousarray(array, dtype=np.uint8)).save(out / name)
        meta = {
            "sample_id": sample.sample_id,
            "height": int(sample.shape[0]),
            "width": int(sample.shape[1]),
            "classes": sorted({int(c) for c in np.unique(sample.sem_t1)} | {int(c) for c in np.unique(sample.sem_t2)}),
            "stages": sorted({int(c) for c in np.unique(sample.stage_t1)} | {int(c) for c in np.unique(sample.stage_t2)}),
            **sample.meta,
        }
        (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    manifest = {"count": len(ids), "samples": ids}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def _load_png(path: Path, sample_id: str, mode: str) -> np.ndarray:
    if not path.is_file():
        raise IngestionError(f"sample '{sample_id}': missing file {path.name}")
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise IngestionError(f"sample '{sample_id}': {path.name} has mode {im.mode}, expected {mode}")
            return np.array(im)
    except OSError as exc:
        raise IngestionError(f"sample '{sample_id}': unreadable {path.name}: {exc}") from None


def read_sample(directory: str | Path, sample_id: str) -> SceneSample:
    folder = Path(directory) / "samples" / sample_id
    if not folder.is_dir():
        raise IngestionError(f"sample '{sample_id}': directory missing")
    try:
        meta = json.loads((folder / "meta.json").read_text())
    except FileNotFoundError:
        raise IngestionError(f"sample '{sample_id}': missing file meta.json") from None
    except json.JSONDecodeError as exc:
        raise IngestionError(f"sample '{sample_id}': malformed meta.json: {exc}") from None
    img1 = _load_png(folder / "t1.png", sample_id, "RGB")
    img2 = _load_png(folder / "t2.png", sample_id, "RGB")
    maps = [_load_png(folder / name, sample_id, "L") for name in MAP_FILES]
    shape = img1.shape[:2]
    expected = (meta.get("height"), meta.get("width"))
    for name, arr in zip(("t2.png", *MAP_FILES), [img2, *maps]):
        if arr.shape[:2] != shape or shape != expected:
            raise IngestionError(
                f"sample '{sample_id}': dimension mismatch in {name} "
                f"({arr.shape[:2]} vs {shape}, meta {expected})"
            )
    extra = {k: v for k, v in meta.items() if k not in ("sample_id", "height", "width", "classes", "stages")}
    return SceneSample(dequantize(img1), dequantize(img2), *maps, sample_id=sample_id, meta=extra)


def read_dataset(directory: str | Path, ids: Sequence[str] | None = None) -> list[SceneSample]:
    root = Path(directory)
    if ids is None:
        try:
            manifest = json.loads((root / "manifest.json").read_text())
            ids = list(manifest["samples"])
        except FileNotFoundError:
            raise IngestionError(f"dataset {root}: missing manifest.json") from None
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise IngestionError(f"dataset {root}: malformed manifest.json: {exc}") from None
    return [read_sample(root, sid) for sid in ids]


def write_splits(directory: str | Path, splits: dict[str, Sequence[str]]) -> None:
    payload = {name: list(ids) for name, ids in splits.items()}
    (Path(directory) / "splits.json").write_text(json.dumps(payload, indent=2) + "\n")


def read_splits(directory: str | Path) -> dict[str, list[str]]:
    path = Path(directory) / "splits.json"
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise IngestionError(f"dataset {directory}: missing splits.json") from None
    except json.JSONDecodeError as exc:
        raise IngestionError(f"dataset {directory}: malformed splits.json: {exc}") from None
    if not isinstance(data, dict) or not all(isinstance(v, list) for v in data.values()):
        raise IngestionError(f"dataset {directory}: splits.json must map split names to id lists")
    return data
