"""Deterministic synthetic person dataset: paired images and captions.

Each identity gets a fixed attribute record (shirt colour, pants colour,
background colour, build); each of its images varies bbox placement/size,
camera id, mild colour jitter and pixel noise. The person is drawn as a
torso rectangle over a legs rectangle inside the bbox. Pixel values are
quantized to the 8-bit grid at generation time so the PPM export/import
round-trip is bit-exact in float64.

Every sample derives from an independent per-sample seed, so generation
is pure given (args, seed) and parallelizable across samples.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, UsageError

SHIRT_COLORS = {
    "red": (0.85, 0.10, 0.10),
    "blue": (0.12, 0.25, 0.85),
    "green": (0.10, 0.70, 0.20),
    "yellow": (0.92, 0.88, 0.12),
    "purple": (0.55, 0.15, 0.75),
    "orange": (0.95, 0.55, 0.08),
    "white": (0.95, 0.95, 0.95),
    "black": (0.06, 0.06, 0.06),
}
PANTS_COLORS = {
    "navy": (0.08, 0.10, 0.38),
    "black": (0.06, 0.06, 0.06),
    "gray": (0.55, 0.55, 0.55),
    "brown": (0.45, 0.28, 0.12),
    "khaki": (0.76, 0.70, 0.50),
    "white": (0.95, 0.95, 0.95),
    "olive": (0.40, 0.45, 0.18),
    "red": (0.85, 0.10, 0.10),
}
BACKGROUND_COLORS = {
    "beige": (0.82, 0.78, 0.68),
    "teal": (0.20, 0.55, 0.55),
    "slate": (0.45, 0.50, 0.58),
    "cream": (0.93, 0.90, 0.82),
}
# build -> bbox width/height aspect
BUILDS = {"slim": 0.36, "average": 0.46, "broad": 0.58}

BBOX_AREA_BAND = (0.20, 0.80)  # hard invariant enforced by the generator


@dataclass(frozen=True)
class AttributeRecord:
    shirt_color: str
    pants_color: str
    background_color: str
    build: str


@dataclass
class Sample:
    image: np.ndarray   # H x W x 3 float64 in [0, 1]
    caption: str
    identity: int
    camera: int
    bbox: tuple         # (top, left, height, width) in pixels
    domain: int


@dataclass
class SyntheticDataset:
    samples: List[Sample]
    num_identities: int
    num_cameras: int
    height: int
    width: int
    seed: int
    attributes: Dict[int, AttributeRecord]


@dataclass
class PKBatch:
    """P distinct identities with exactly K samples each."""
    samples: List[Sample]
    identities: tuple

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.identity for s in self.samples], dtype=np.intp)


def render_caption(record: AttributeRecord) -> str:
    return (f"a {record.build} person wearing {record.shirt_color} shirt "
            f"and {record.pants_color} pants in front of "
            f"{record.background_color} background")


def _sample_bbox(rng: np.random.Generator, height: int, width: int,
                 aspect: float, area_range: tuple) -> tuple:
    area_px = float(height * width)
    for _ in range(32):
        frac = rng.uniform(*area_range)
        jitter = 1.0 + rng.uniform(-0.08, 0.08)
        h = int(round(np.sqrt(frac * area_px / (aspect * jitter))))
        w = int(round(aspect * jitter * h))
        h = min(max(h, 4), height)
        w = min(max(w, 4), width)
        got = h * w / area_px
        if BBOX_AREA_BAND[0] <= got <= BBOX_AREA_BAND[1]:
            top = int(rng.integers(0, height - h + 1))
            left = int(rng.integers(0, width - w + 1))
            return (top, left, h, w)
    raise ConfigError(
        f"cannot place a bbox within the {BBOX_AREA_BAND} area band on a "
        f"{height}x{width} image; widen the image or the area range")


def _camera_shade(camera: int, num_cameras: int) -> float:
    """Deterministic per-camera brightness: the cross-camera gap retrieval
    must bridge."""
    if num_cameras == 1:
        return 1.0
    return 0.92 + 0.16 * camera / (num_cameras - 1)


def _render_image(rng: np.random.Generator, height: int, width: int,
                  record: AttributeRecord, bbox: tuple, shade: float) -> np.ndarray:
    jitter = 1.0 + rng.uniform(-0.06, 0.06, size=3)
    # backgrounds vary strongly between shots of the same person; clothes
    # stay the stable cue, like the scenes the protocol models
    bg = np.array(BACKGROUND_COLORS[record.background_color]) \
        * jitter * rng.uniform(0.72, 1.28)
    shirt = np.array(SHIRT_COLORS[record.shirt_color]) * jitter
    pants = np.array(PANTS_COLORS[record.pants_color]) * jitter

    img = np.empty((height, width, 3))
    img[:] = bg
    top, left, h, w = bbox
    torso_h = h // 2
    img[top:top + torso_h, left:left + w] = shirt
    img[top + torso_h:top + h, left:left + w] = pants
    img *= shade
    img += rng.uniform(-0.05, 0.05, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0) / 255.0  # 8-bit grid, PPM round-trips exactly


def _assign_attributes(rng: np.random.Generator, num_identities: int) -> Dict[int, AttributeRecord]:
    shirts = list(SHIRT_COLORS)
    pants = list(PANTS_COLORS)
    combos = len(shirts) * len(pants)
    # distinct shirt/pants pairs while they last: the person region stays
    # more identity-discriminative than the small background palette
    replace = num_identities > combos
    picks = rng.choice(combos, size=num_identities, replace=replace)
    records = {}
    for identity, pick in enumerate(picks):
        records[identity] = AttributeRecord(
            shirt_color=shirts[pick // len(pants)],
            pants_color=pants[pick % len(pants)],
            background_color=list(BACKGROUND_COLORS)[rng.integers(len(BACKGROUND_COLORS))],
            build=list(BUILDS)[rng.integers(len(BUILDS))],
        )
    return records


def generate_dataset(num_identities: int, images_per_identity: int,
                     num_cameras: int, seed: int, height: int = 64,
                     width: int = 32, bbox_area_range: tuple = (0.22, 0.50),
                     domain: int = 0) -> SyntheticDataset:
    """Deterministic paired image/caption corpus for a fixed seed."""
    if num_identities < 1 or images_per_identity < 1 or num_cameras < 1:
        raise UsageError("generate_dataset: all counts must be >= 1")
    lo, hi = bbox_area_range
    if not (BBOX_AREA_BAND[0] <= lo < hi <= BBOX_AREA_BAND[1]):
        raise ConfigError(f"bbox_area_range {bbox_area_range} must sit inside {BBOX_AREA_BAND}")

    global_rng = np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(entropy=seed, spawn_key=(0,))))
    attributes = _assign_attributes(global_rng, num_identities)

    samples = []
    for identity in range(num_identities):
        record = attributes[identity]
        caption = render_caption(record)
        for idx in range(images_per_identity):
            rng = np.random.Generator(np.random.PCG64(
                np.random.SeedSequence(entropy=seed, spawn_key=(1, identity, idx))))
            camera = int(rng.integers(num_cameras))
            bbox = _sample_bbox(rng, height, width, BUILDS[record.build], (lo, hi))
            image = _render_image(rng, height, width, record, bbox,
                                  _camera_shade(camera, num_cameras))
            samples.append(Sample(image, caption, identity, camera, bbox, domain))
    return SyntheticDataset(samples, num_identities, num_cameras, height, width,
                            seed, attributes)


# ---------------------------------------------------------------------------
# train / query / gallery split
# ---------------------------------------------------------------------------

def split_dataset(dataset: SyntheticDataset, eval_identities: int):
    """Hold out the highest identity labels for evaluation.

    Within the held-out set the first image of each identity-camera pair
    becomes a query, remaining images go to the gallery (the cross-camera
    protocol; queries without a cross-camera match are skipped later by
    the evaluator).
    """
    if not 0 < eval_identities < dataset.num_identities:
        raise ConfigError(
            f"eval_identities must lie in (0, {dataset.num_identities}), got {eval_identities}")
    cut = dataset.num_identities - eval_identities
    train = [s for s in dataset.samples if s.identity < cut]
    query, gallery = [], []
    seen = set()
    for s in dataset.samples:
        if s.identity < cut:
            continue
        key = (s.identity, s.camera)
        if key not in seen:
            seen.add(key)
            query.append(s)
        else:
            gallery.append(s)
    return train, query, gallery


# ---------------------------------------------------------------------------
# PK batch sampling
# ---------------------------------------------------------------------------

def pk_batches(samples: Sequence[Sample], p: int, k: int,
               rng: np.random.Generator, batches: Optional[int] = None) -> List[PKBatch]:
    """Batches of P identities x K samples; identities without replacement
    inside a batch, each eligible identity covered at least once per epoch.

    ``batches=None`` returns one epoch; otherwise epochs repeat until the
    requested count is reached.
    """
    by_id: Dict[int, list] = {}
    for s in samples:
        by_id.setdefault(s.identity, []).append(s)
    eligible = sorted(i for i, group in by_id.items() if len(group) >= k)
    if len(eligible) < p:
        raise ConfigError(
            f"PK sampling needs {p} identities with >= {k} samples, "
            f"only {len(eligible)} qualify")

    out: List[PKBatch] = []
    while True:
        order = [eligible[i] for i in rng.permutation(len(eligible))]
        for start in range(0, len(order), p):
            chunk = order[start:start + p]
            if len(chunk) < p:
                pool = [i for i in eligible if i not in chunk]
                extra = rng.choice(len(pool), size=p - len(chunk), replace=False)
                chunk = chunk + [pool[i] for i in extra]
            batch_samples = []
            for identity in chunk:
                group = by_id[identity]
                picked = rng.choice(len(group), size=k, replace=False)
                batch_samples.extend(group[i] for i in picked)
            out.append(PKBatch(batch_samples, tuple(chunk)))
            if batches is not None and len(out) == batches:
                return out
        if batches is None:
            return out


# ---------------------------------------------------------------------------
# PPM + manifest directory format
# ---------------------------------------------------------------------------

def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 portable pixmap, maxval 255."""
    arr = np.asarray(image)
    h, w = arr.shape[:2]
    data = np.round(arr * 255.0).astype(np.uint8).tobytes()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data)


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise DataError(f"{path}: not a binary P6 pixmap")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":  # comment line
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def save_dataset(dataset: SyntheticDataset, directory) -> None:
    """One PPM per image plus a JSON manifest; bit-exact round trip."""
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(dataset.samples):
        name = f"images/{i:06d}.ppm"
        write_ppm(directory / name, s.image)
        entries.append({
            "file": name,
            "caption": s.caption,
            "identity": s.identity,
            "camera": s.camera,
            "bbox": list(s.bbox),
            "domain": s.domain,
        })
    manifest = {
        "format": 1,
        "num_identities": dataset.num_identities,
        "num_cameras": dataset.num_cameras,
        "height": dataset.height,
        "width": dataset.width,
        "seed": dataset.seed,
        "attributes": {str(i): asdict(r) for i, r in dataset.attributes.items()},
        "samples": entries,
    }
    (directory / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def load_dataset(directory) -> SyntheticDataset:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{directory}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    samples = []
    for entry in manifest["samples"]:
        image = read_ppm(directory / entry["file"])
        samples.append(Sample(image, entry["caption"], int(entry["identity"]),
                              int(entry["camera"]), tuple(entry["bbox"]),
                              int(entry["domain"])))
    attributes = {int(i): AttributeRecord(**r)
                  for i, r in manifest.get("attributes", {}).items()}
    return SyntheticDataset(samples, int(manifest["num_identities"]),
                            int(manifest["num_cameras"]), int(manifest["height"]),
                            int(manifest["width"]), int(manifest["seed"]), attributes)
