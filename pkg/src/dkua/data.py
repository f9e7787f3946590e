"""Deterministic synthetic domain sequences imitating the lifelong ReID
protocol: disjoint identities per domain, a per-domain pixel style, and
train/query/gallery splits. Also owns the on-disk index and raw-image
formats, and the PK batch sampler that feeds triplet mining.

Identities are procedural patterns (seeded rectangles over a background),
so everything is keyed solely by (spec, seed) and round-trips bit-exactly
through 8-bit storage.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError

IMG_MAGIC = b"DKUA IMG"
INDEX_HEADER = "#dkua-index v1"
SPLITS = ("train", "query", "gallery")


@dataclass
class DomainSpec:
    name: str = "domain"
    gains: tuple = (1.0, 1.0, 1.0)
    biases: tuple = (0.0, 0.0, 0.0)
    brightness: float = 0.0
    noise_sigma: float = 0.02
    pattern_id: int = 0
    num_identities: int = 16
    instances_per_identity: int = 8
    cameras: int = 2
    height: int = 32
    width: int = 16
    channels: int = 3

    def __post_init__(self):
        if any(g <= 0 for g in self.gains):
            raise ConfigError("style gains must be > 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be >= 0")
        if self.num_identities < 2:
            raise ConfigError("need at least 2 identities")
        if self.instances_per_identity < 2:
            raise ConfigError("need at least 2 instances per identity")
        if len(self.gains) != self.channels or len(self.biases) != self.channels:
            raise ConfigError("gains/biases must have one entry per channel")


@dataclass(frozen=True)
class IndexRecord:
    path: str
    identity: int
    camera: int
    domain: int
    split: str


@dataclass
class DomainData:
    """One domain fully loaded: index records plus image arrays by path."""
    domain_id: int
    name: str
    records: list
    images: dict

    @property
    def identities(self) -> list:
        return sorted({r.identity for r in self.records})

    @property
    def class_count(self) -> int:
        return len({r.identity for r in self.records if r.split == "train"})

    def label_map(self) -> dict:
        ids = sorted({r.identity for r in self.records if r.split == "train"})
        return {identity: i for i, identity in enumerate(ids)}

    def split(self, name: str) -> list:
        return [r for r in self.records if r.split == name]


@dataclass
class Batch:
    images: np.ndarray  # B x C x H x W in [0, 1]
    labels: np.ndarray  # B dense domain-local labels
    identities: np.ndarray
    domain: int


# ----------------------------------------------------------------- generation


def _background(spec: DomainSpec) -> np.ndarray:
    h, w = spec.height, spec.width
    yy = np.linspace(0.0, 1.0, h)[:, None] * np.ones((1, w))
    xx = np.ones((h, 1)) * np.linspace(0.0, 1.0, w)[None, :]
    variant = spec.pattern_id % 4
    if variant == 0:
        base = np.full((h, w), 0.25)
    elif variant == 1:
        base = 0.15 + 0.2 * xx
    elif variant == 2:
        base = 0.15 + 0.2 * yy
    else:
        base = 0.2 + 0.1 * np.sign(np.sin(yy * 12.0) * np.sin(xx * 12.0))
    return np.repeat(base[None, :, :], spec.channels, axis=0)


# shared block palette: identities differ mostly in geometry, so retrieval
# has to rely on learned spatial features rather than a raw color signature
_PALETTE = np.array([
    [0.85, 0.15, 0.15],
    [0.15, 0.75, 0.20],
    [0.15, 0.25, 0.85],
    [0.80, 0.75, 0.15],
    [0.70, 0.20, 0.75],
    [0.15, 0.70, 0.70],
])


def _identity_base(spec: DomainSpec, seed: int, domain_id: int,
                   identity_idx: int) -> np.ndarray:
    """Seeded geometry for one identity, pre-style."""
    rng = np.random.default_rng([seed, domain_id, identity_idx])
    img = _background(spec).copy()
    h, w, c = spec.height, spec.width, spec.channels
    for _ in range(4):
        rh = rng.integers(3, h // 2 + 1)
        rw = rng.integers(2, w // 2 + 1)
        top = rng.integers(0, h - rh + 1)
        left = rng.integers(0, w - rw + 1)
        color = _PALETTE[rng.integers(0, len(_PALETTE))][:c]
        img[:, top:top + rh, left:left + rw] = color[:, None, None]
    return np.clip(img, 0.0, 1.0)


def apply_style(image: np.ndarray, spec: DomainSpec,
                rng: np.random.Generator | None = None) -> np.ndarray:
    """Per-channel gain/bias + global brightness, clamped, then noise."""
    gains = np.asarray(spec.gains)[:, None, None]
    biases = np.asarray(spec.biases)[:, None, None]
    out = np.clip(gains * image + biases + spec.brightness, 0.0, 1.0)
    if spec.noise_sigma > 0 and rng is not None:
        out = np.clip(out + rng.normal(0.0, spec.noise_sigma, out.shape), 0.0, 1.0)
    return out


def _quantize(image: np.ndarray) -> np.ndarray:
    return np.round(image * 255.0) / 255.0


def generate_domain(spec: DomainSpec, seed: int, domain_id: int,
                    first_identity: int = 0) -> DomainData:
    """Generate one domain: records plus quantized image arrays.

    Split layout per identity: the last quarter of instances are gallery,
    the quarter before that query, the rest train. Cameras alternate by
    instance index.
    """
    ipi = spec.instances_per_identity
    n_gallery = max(1, ipi // 4)
    n_query = max(1, ipi // 4)
    records = []
    images = {}
    for idx in range(spec.num_identities):
        identity = first_identity + idx
        base = _identity_base(spec, seed, domain_id, idx)
        for inst in range(ipi):
            rng = np.random.default_rng([seed, domain_id, idx, inst])
            dx = int(rng.integers(-2, 3))
            dy = int(rng.integers(-2, 3))
            img = np.roll(base, (dy, dx), axis=(1, 2))
            img = apply_style(img, spec, rng)
            img = _quantize(img)
            if inst >= ipi - n_gallery:
                split = "gallery"
            elif inst >= ipi - n_gallery - n_query:
                split = "query"
            else:
                split = "train"
            path = f"images/id{identity:05d}_i{inst:02d}.img"
            records.append(IndexRecord(path, identity, inst % spec.cameras,
                                       domain_id, split))
            images[path] = img
    return DomainData(domain_id, spec.name, records, images)


# ------------------------------------------------------------------ image io


def write_image(path: Path, image: np.ndarray):
    c, h, w = image.shape
    payload = np.round(np.asarray(image) * 255.0).astype(np.uint8).tobytes()
    header = IMG_MAGIC + struct.pack("<HHH", c, h, w) + b"\x00\x00"
    Path(path).write_bytes(header + payload)


def load_image(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:8] != IMG_MAGIC:
        raise ParseError(f"{path}: not a dkua image file")
    c, h, w = struct.unpack("<HHH", raw[8:14])
    body = raw[16:]
    if len(body) != c * h * w:
        raise ParseError(f"{path}: payload length mismatch")
    img = np.frombuffer(body, dtype=np.uint8).reshape(c, h, w)
    return img.astype(np.float64) / 255.0


# ------------------------------------------------------------------ index io


def write_index(path: Path, records: list):
    lines = [INDEX_HEADER]
    for r in records:
        lines.append(f"{r.path}\t{r.identity}\t{r.camera}\t{r.domain}\t{r.split}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_index(path: Path) -> list:
    text = Path(path).read_text()
    records = []
    lines = text.splitlines()
    if lines and lines[0].strip() != INDEX_HEADER:
        raise ParseError(f"{path}:1: missing index header")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise ParseError(f"{path}:{lineno}: expected 5 tab-separated fields")
        p, identity, camera, domain, split = parts
        if split not in SPLITS:
            raise ParseError(f"{path}:{lineno}: unknown split {split!r}")
        try:
            records.append(IndexRecord(p, int(identity), int(camera),
                                       int(domain), split))
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_domain(directory: Path, domain: DomainData):
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    for path, img in domain.images.items():
        write_image(directory / path, img)
    write_index(directory / "index.tsv", domain.records)


def load_domain(directory: Path, domain_id: int | None = None) -> DomainData:
    directory = Path(directory)
    records = load_index(directory / "index.tsv")
    images = {r.path: load_image(directory / r.path) for r in records}
    did = domain_id if domain_id is not None else (
        records[0].domain if records else 0)
    return DomainData(did, directory.name, records, images)


# ---------------------------------------------------------------- pk sampling


def pk_batches(domain: DomainData, p: int, k: int,
               rng: np.random.Generator) -> list:
    """One epoch of P x K batches over the train split.

    Identities are permuted once per epoch and chunked into groups of P
    (the last short chunk is topped up from the front), so every identity
    appears at least once per epoch. Instances are drawn without
    replacement per identity.
    """
    by_identity: dict = {}
    for r in domain.split("train"):
        by_identity.setdefault(r.identity, []).append(r)
    ids = sorted(by_identity)
    if len(ids) < p:
        raise ConfigError(f"need >= {p} identities with train instances")
    if any(len(v) < k for v in by_identity.values()):
        raise ConfigError(f"every identity needs >= {k} train instances")
    label_map = domain.label_map()
    perm = [ids[i] for i in rng.permutation(len(ids))]
    batches = []
    for start in range(0, len(perm), p):
        chunk = perm[start:start + p]
        if len(chunk) < p:
            chunk = chunk + perm[: p - len(chunk)]
        imgs, labels, idents = [], [], []
        for identity in chunk:
            recs = by_identity[identity]
            pick = rng.choice(len(recs), size=k, replace=False)
            for j in pick:
                imgs.append(domain.images[recs[j].path])
                labels.append(label_map[identity])
                idents.append(identity)
        batches.append(Batch(np.stack(imgs), np.asarray(labels),
                             np.asarray(idents), domain.domain_id))
    return batches


# ------------------------------------------------------------- sequence specs


def default_sequence_spec() -> dict:
    """Desk-scale default: 3 seen domains + 1 unseen, distinct styles."""
    seen = [
        DomainSpec(name="domain_1", gains=(1.0, 1.0, 1.0),
                   biases=(0.0, 0.0, 0.0), brightness=0.0, pattern_id=0,
                   noise_sigma=0.05),
        DomainSpec(name="domain_2", gains=(2.04, 0.22, 0.22),
                   biases=(0.26, 0.0, 0.39), brightness=-0.13, pattern_id=1,
                   noise_sigma=0.05),
        DomainSpec(name="domain_3", gains=(0.15, 1.78, 0.48),
                   biases=(0.0, 0.325, 0.0), brightness=0.195, pattern_id=2,
                   noise_sigma=0.05),
    ]
    unseen = [
        DomainSpec(name="unseen_1", gains=(0.74, 0.74, 2.17),
                   biases=(0.13, 0.13, -0.13), brightness=0.0, pattern_id=3,
                   noise_sigma=0.05),
    ]
    return {"seen": seen, "unseen": unseen}


def load_sequence_spec(path: Path) -> dict:
    raw = json.loads(Path(path).read_text())
    known = {f.name for f in DomainSpec.__dataclass_fields__.values()}
    out = {"seen": [], "unseen": []}
    for group in ("seen", "unseen"):
        for entry in raw.get(group, []):
            unknown = set(entry) - known
            if unknown:
                raise ConfigError(f"unknown domain spec keys: {sorted(unknown)}")
            for key in ("gains", "biases"):
                if key in entry:
                    entry[key] = tuple(entry[key])
            out[group].append(DomainSpec(**entry))
    if not out["seen"]:
        raise ConfigError("sequence spec has no seen domains")
    return out


def synthesize_sequence(spec: dict, seed: int, out_dir: Path) -> dict:
    """Generate and write every domain; returns the sequence manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"seen": [], "unseen": []}
    next_identity = 0
    domain_id = 0
    for group in ("seen", "unseen"):
        for dspec in spec[group]:
            domain_id += 1
            domain = generate_domain(dspec, seed, domain_id, next_identity)
            next_identity += dspec.num_identities
            write_domain(out_dir / dspec.name, domain)
            manifest[group].append(dspec.name)
    (out_dir / "sequence.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_sequence(data_dir: Path) -> dict:
    path = Path(data_dir) / "sequence.json"
    if not path.exists():
        raise ConfigError(f"{path} not found; run synth first")
    return json.loads(path.read_text())
