"""Bi-temporal samples, manifests, PNG I/O, tiling and synthetic scenes."""
from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .rng import RngStream

SPLITS = ("train", "test", "pretrain")
MASK_THRESHOLD = 127


class DataError(ValueError):
    pass


class MissingFileError(FileNotFoundError):
    pass


class DimensionMismatchError(DataError):
    pass


class NotRGBError(DataError):
    pass


class ManifestError(DataError):
    pass


@dataclass
class BitemporalSample:
    """``t1``/``t2`` are ``H x W x 3`` in [0, 1]; ``mask`` is ``H x W`` of {0, 1}.

    Pretrain (single-epoch building) samples carry ``t2=None`` and the
    building footprint as ``mask``.
    """

    t1: np.ndarray
    t2: np.ndarray | None
    mask: np.ndarray
    id: str = ""

    def __post_init__(self):
        if self.t1.ndim != 3 or self.t1.shape[2] != 3:
            raise NotRGBError(f"{self.id}: t1 must be H x W x 3, got {self.t1.shape}")
        if self.t2 is not None and self.t2.shape != self.t1.shape:
            raise DimensionMismatchError(f"{self.id}: t1 {self.t1.shape} vs t2 {self.t2.shape}")
        if self.mask.shape != self.t1.shape[:2]:
            raise DimensionMismatchError(f"{self.id}: mask {self.mask.shape} vs image {self.t1.shape[:2]}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise DataError(f"{self.id}: mask must be strictly binary (0/1)")

    @property
    def shape(self) -> tuple[int, int]:
        return self.t1.shape[:2]


@dataclass
class ManifestEntry:
    id: str
    t1_path: str
    t2_path: str | None
    mask_path: str
    split: str

    def to_dict(self) -> dict:
        return {"id": self.id, "t1_path": self.t1_path, "t2_path": self.t2_path,
                "mask_path": self.mask_path, "split": self.split}


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path = Path(".")

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.id in seen:
                raise ManifestError(f"duplicate id {e.id!r}")
            if e.split not in SPLITS:
                raise ManifestError(f"{e.id}: unknown split {e.split!r}")
            seen.add(e.id)

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, path: str | None) -> Path | None:
        if path is None:
            return None
        p = Path(path)
        return p if p.is_absolute() else self.root / p


def read_manifest(path, root=None) -> DatasetManifest:
    """One JSON object per line; relative paths resolve against ``root``
    (default: the manifest's directory)."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
            missing = [k for k in ("id", "t1_path", "mask_path", "split") if k not in rec]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            entries.append(ManifestEntry(rec["id"], rec["t1_path"], rec.get("t2_path"),
                                         rec["mask_path"], rec["split"]))
    return DatasetManifest(entries, Path(root) if root is not None else path.parent)


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in manifest.entries:
            fh.write(json.dumps(e.to_dict(), sort_keys=True) + "\n")
    return path


def levircd_template(root=".") -> DatasetManifest:
    """The shipped LEVIR-CD layout: 150 train / 40 test pairs, paths relative to ``root``."""
    text = resources.files("fscd").joinpath("templates/levircd_manifest.jsonl").read_text("utf-8")
    entries = []
    for line in text.splitlines():
        if line.strip():
            rec = json.loads(line)
            entries.append(ManifestEntry(rec["id"], rec["t1_path"], rec["t2_path"], rec["mask_path"], rec["split"]))
    return DatasetManifest(entries, Path(root))


def split_report(manifest: DatasetManifest) -> dict[str, int]:
    counts = {s: 0 for s in SPLITS}
    for e in manifest.entries:
        counts[e.split] += 1
    return counts


# ---------------------------------------------------------------------------
# I/O


def _open(path: Path, entry_id: str) -> Image.Image:
    if not path.exists():
        raise MissingFileError(f"{entry_id}: missing file {path}")
    img = Image.open(path)
    img.load()
    return img


def _read_rgb(path: Path, entry_id: str) -> np.ndarray:
    img = _open(path, entry_id)
    if img.mode != "RGB":
        raise NotRGBError(f"{entry_id}: {path} is mode {img.mode}, expected 8-bit RGB")
    return np.asarray(img, dtype=np.float32) / np.float32(255)


def _read_mask(path: Path, entry_id: str) -> np.ndarray:
    img = _open(path, entry_id)
    if img.mode in ("1", "P", "RGB"):
        img = img.convert("L")
    if img.mode != "L":
        raise DataError(f"{entry_id}: mask {path} is mode {img.mode}, expected 8-bit grayscale")
    return (np.asarray(img) > MASK_THRESHOLD).astype(np.uint8)


def load_sample(entry: ManifestEntry, manifest: DatasetManifest | None = None) -> BitemporalSample:
    resolve = manifest.resolve if manifest is not None else (lambda p: None if p is None else Path(p))
    t1 = _read_rgb(resolve(entry.t1_path), entry.id)
    t2 = _read_rgb(resolve(entry.t2_path), entry.id) if entry.t2_path is not None else None
    mask = _read_mask(resolve(entry.mask_path), entry.id)
    shapes = [t1.shape[:2], mask.shape] + ([t2.shape[:2]] if t2 is not None else [])
    if len(set(shapes)) != 1:
        raise DimensionMismatchError(f"{entry.id}: dimension mismatch between images and mask {shapes}")
    return BitemporalSample(t1, t2, mask, entry.id)


def load_split(manifest: DatasetManifest, split: str, workers: int = 1) -> list[BitemporalSample]:
    entries = manifest.split(split)
    if workers <= 1:
        return [load_sample(e, manifest) for e in entries]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda e: load_sample(e, manifest), entries))


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)


def save_png(arr: np.ndarray, path) -> Path:
    path = Path(path)
    Image.fromarray(arr).save(path, format="PNG")
    return path


def save_sample(sample: BitemporalSample, directory, stem: str | None = None) -> dict[str, str]:
    """Write the sample as PNGs; returns paths relative to ``directory``."""
    directory = Path(directory)
    stem = stem or sample.id
    out = {"t1_path": f"{stem}_t1.png", "t2_path": None, "mask_path": f"{stem}_mask.png"}
    save_png(to_uint8(sample.t1), directory / out["t1_path"])
    if sample.t2 is not None:
        out["t2_path"] = f"{stem}_t2.png"
        save_png(to_uint8(sample.t2), directory / out["t2_path"])
    save_png((sample.mask * 255).astype(np.uint8), directory / out["mask_path"])
    return out


# ---------------------------------------------------------------------------
# tiling


def tile(sample: BitemporalSample, tile_size: int, stride: int | None = None) -> list[BitemporalSample]:
    """Row-major aligned crops; only positions where a full tile fits."""
    stride = tile_size if stride is None else stride
    h, w = sample.shape
    if tile_size < 1 or stride < 1:
        raise ValueError(f"tile_size and stride must be >= 1, got {tile_size}, {stride}")
    if tile_size > h or tile_size > w:
        raise ValueError(f"{sample.id}: tile {tile_size} larger than image {h} x {w}")
    out = []
    for r in range(0, h - tile_size + 1, stride):
        for c in range(0, w - tile_size + 1, stride):
            sl = (slice(r, r + tile_size), slice(c, c + tile_size))
            out.append(BitemporalSample(
                sample.t1[sl].copy(),
                None if sample.t2 is None else sample.t2[sl].copy(),
                sample.mask[sl].copy(),
                f"{sample.id}@{r}_{c}",
            ))
    return out


def tile_grid(shape: tuple[int, int], tile_size: int, stride: int | None = None) -> list[tuple[int, int]]:
    stride = tile_size if stride is None else stride
    h, w = shape
    return [(r, c) for r in range(0, h - tile_size + 1, stride) for c in range(0, w - tile_size + 1, stride)]


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SynthParams:
    size: int = 64
    n_buildings: tuple[int, int] = (3, 6)
    change_fraction: float = 0.5
    noise_sigma: float = 0.02
    seed: int = 0
    n_samples: int = 1
    id_prefix: str = "synth"

    def validate(self) -> "SynthParams":
        if self.size < 16:
            raise ValueError(f"size must be >= 16, got {self.size}")
        lo, hi = self.n_buildings
        if not 0 <= lo <= hi:
            raise ValueError(f"n_buildings must be an increasing non-negative range, got {self.n_buildings}")
        if not 0 <= self.change_fraction <= 1:
            raise ValueError(f"change_fraction must lie in [0, 1], got {self.change_fraction}")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if self.n_samples < 0:
            raise ValueError(f"n_samples must be >= 0, got {self.n_samples}")
        return self


@dataclass
class SceneLayout:
    """Axis-aligned building rectangles ``(row, col, height, width)`` per epoch."""

    before: list[tuple[int, int, int, int]]
    after: list[tuple[int, int, int, int]]
    size: int


def rasterize(rects, size: int) -> np.ndarray:
    occ = np.zeros((size, size), dtype=np.uint8)
    for r, c, h, w in rects:
        occ[r:r + h, c:c + w] = 1
    return occ


def _place_rects(gen: np.random.Generator, count: int, size: int, taken: list) -> list:
    rects = []
    lo, hi = max(4, size // 10), max(6, size // 3)
    for _ in range(count):
        for _attempt in range(50):
            h, w = (int(v) for v in gen.integers(lo, hi + 1, size=2))
            r = int(gen.integers(1, size - h))
            c = int(gen.integers(1, size - w))
            # one-pixel gap keeps buildings separable
            if all(r + h + 1 <= r2 or r2 + h2 + 1 <= r or c + w + 1 <= c2 or c2 + w2 + 1 <= c
                   for r2, c2, h2, w2 in taken + rects):
                rects.append((r, c, h, w))
                break
    return rects


def synth_layout(gen: np.random.Generator, params: SynthParams) -> SceneLayout:
    """A changed building exists in exactly one epoch (demolished or newly built)."""
    lo, hi = params.n_buildings
    n = int(gen.integers(lo, hi + 1))
    rects = _place_rects(gen, n, params.size, [])
    n_change = int(round(params.change_fraction * len(rects)))
    changed = set(gen.permutation(len(rects))[:n_change].tolist())
    before, after = [], []
    for i, rect in enumerate(rects):
        if i not in changed:
            before.append(rect)
            after.append(rect)
        elif gen.random() < 0.5:
            before.append(rect)
        else:
            after.append(rect)
    return SceneLayout(before=before, after=after, size=params.size)


def _background(gen: np.random.Generator, size: int) -> np.ndarray:
    base = gen.uniform(0.15, 0.45, size=3)
    coarse = gen.normal(0, 0.06, size=(size // 8 + 2, size // 8 + 2, 3))
    up = np.kron(coarse, np.ones((8, 8, 1)))[:size, :size]
    # 3x3 box blur softens the block edges of the coarse field
    pad = np.pad(up, ((1, 1), (1, 1), (0, 0)), mode="edge")
    smooth = sum(pad[i:i + size, j:j + size] for i in range(3) for j in range(3)) / 9
    return base + smooth


def _render(background, rects, roofs) -> np.ndarray:
    img = background.copy()
    for (r, c, h, w), roof in zip(rects, roofs):
        img[r:r + h, c:c + w] = roof
        img[r + h - 1:r + h, c:c + w] *= 0.8
    return img


def synth_sample(params: SynthParams, index: int, kind: str = "change") -> BitemporalSample:
    """Scene ``index`` of ``params``; a pure function of ``(params, index, kind)``."""
    gen = RngStream(params.seed).child("synth", kind, index).generator()
    layout = synth_layout(gen, params)
    background = _background(gen, params.size)
    roof_color = {rect: gen.uniform(0.55, 0.95, size=3) for rect in sorted(set(layout.before + layout.after))}
    sid = f"{params.id_prefix}_{kind}_{index:04d}"
    n1 = gen.normal(0, params.noise_sigma, size=background.shape) if params.noise_sigma else 0
    t1 = np.clip(_render(background, layout.before, [roof_color[r] for r in layout.before]) + n1, 0, 1)
    if kind == "pretrain":
        mask = rasterize(layout.before, params.size)
        return BitemporalSample(t1.astype(np.float32), None, mask, sid)
    n2 = gen.normal(0, params.noise_sigma, size=background.shape) if params.noise_sigma else 0
    t2 = np.clip(_render(background, layout.after, [roof_color[r] for r in layout.after]) + n2, 0, 1)
    mask = rasterize(layout.before, params.size) ^ rasterize(layout.after, params.size)
    return BitemporalSample(t1.astype(np.float32), t2.astype(np.float32), mask, sid)


def synth_layout_for(params: SynthParams, index: int, kind: str = "change") -> SceneLayout:
    gen = RngStream(params.seed).child("synth", kind, index).generator()
    return synth_layout(gen, params)


def synth_generate(params: SynthParams, kind: str = "change", start: int = 0,
                   workers: int = 1) -> list[BitemporalSample]:
    params.validate()
    idx = range(start, start + params.n_samples)
    if workers <= 1:
        return [synth_sample(params, i, kind) for i in idx]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda i: synth_sample(params, i, kind), idx))


DEFAULT_RECIPE = {"train": 80, "test": 20, "pretrain": 64}


def synth_dataset(out_dir, seed: int = 0, size: int = 64, recipe: dict | None = None,
                  workers: int = 1, **synth_kwargs) -> Path:
    """Generate a synthetic corpus with PNG files and ``manifest.jsonl``."""
    recipe = dict(DEFAULT_RECIPE if recipe is None else recipe)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = {"train": 0, "test": recipe.get("train", 0)}
    for split in ("pretrain", "train", "test"):
        count = recipe.get(split, 0)
        kind = "pretrain" if split == "pretrain" else "change"
        params = SynthParams(size=size, seed=seed, n_samples=count, **synth_kwargs)
        samples = synth_generate(params, kind, start=offset.get(split, 0), workers=workers)
        for s in samples:
            paths = save_sample(s, out_dir)
            entries.append(ManifestEntry(s.id, paths["t1_path"], paths["t2_path"], paths["mask_path"], split))
    return write_manifest(DatasetManifest(entries, out_dir), out_dir / "manifest.jsonl")


# ---------------------------------------------------------------------------
# rendering


def render_maps(prob, mask_bin, umaps, out_dir, prefix: str = "") -> dict[str, Path]:
    """Change map (8-bit 0/255), mean probability (8-bit) and entropy maps (16-bit)."""
    out_dir = Path(out_dir)
    if not out_dir.is_dir():
        try:
            out_dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    if not os.access(out_dir, os.W_OK):
        raise PermissionError(f"output directory {out_dir} is not writable")
    paths = {}
    paths["change_map"] = save_png((np.asarray(mask_bin) > 0).astype(np.uint8) * 255, out_dir / f"{prefix}change_map.png")
    paths["probability"] = save_png(np.round(np.clip(prob, 0, 1) * 255).astype(np.uint8), out_dir / f"{prefix}probability.png")
    if umaps is not None:
        for name in ("total", "aleatoric", "epistemic"):
            paths[name] = save_png(encode_bits16(getattr(umaps, name)), out_dir / f"{prefix}{name}.png")
        paths["mean_prob"] = save_png(np.round(np.clip(umaps.mean_prob, 0, 1) * 255).astype(np.uint8),
                                      out_dir / f"{prefix}mean_prob.png")
    return paths


def encode_bits16(bits: np.ndarray) -> np.ndarray:
    return np.round(np.clip(bits, 0, 1) * 65535).astype(np.uint16)


def read_png(path) -> np.ndarray:
    img = Image.open(path)
    img.load()
    arr = np.asarray(img)
    if img.mode.startswith("I"):
        arr = arr.astype(np.uint16) if arr.max(initial=0) < 65536 else arr
    return arr


def read_bits16(path) -> np.ndarray:
    return read_png(path).astype(np.float64) / 65535
