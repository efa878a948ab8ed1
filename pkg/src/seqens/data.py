"""Synthetic shape datasets, image codecs and the checkpoint format.

Every sample is a pure function of (spec, index): each image gets its own
counter-based Philox stream keyed by (spec.seed, index), so generation order
and parallelism cannot change the data.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

SHAPE_KINDS = ("rectangle", "disk", "triangle")
CHECKPOINT_MAGIC = b"SQEN"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed file content; message carries the offending position."""


class SpecError(ValueError):
    pass


@dataclass
class DatasetSpec:
    count: int = 300
    height: int = 64
    width: int = 64
    num_classes: int = 4
    shapes_per_image: tuple[int, int] = (2, 4)
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    noise_std: float = 0.06
    texture: bool = True
    seed: int = 0

    def __post_init__(self):
        self.shape_kinds = tuple(self.shape_kinds)
        lo, hi = self.shapes_per_image
        if lo > hi or lo < 0:
            raise SpecError("shapes_per_image must satisfy 0 <= min <= max")
        if self.num_classes < 2:
            raise SpecError("num_classes must be >= 2")
        for k in self.shape_kinds:
            if k not in SHAPE_KINDS:
                raise SpecError(f"unknown shape kind {k!r}")
        if len(self.shape_kinds) > self.num_classes - 1:
            raise SpecError("need a foreground class per shape kind")
        if self.noise_std < 0:
            raise SpecError("noise_std must be >= 0")
        if self.count < 0 or self.height < 1 or self.width < 1:
            raise SpecError("invalid dataset dimensions")


@dataclass
class Sample:
    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    label: np.ndarray  # (H, W) int64 in {0..C-1}


# fixed class id and colour family per shape kind (class 0 is background)
_KIND_CLASS = {k: i + 1 for i, k in enumerate(SHAPE_KINDS)}
_KIND_BASE_COLOR = {
    "rectangle": np.array([0.85, 0.25, 0.25]),
    "disk": np.array([0.25, 0.8, 0.3]),
    "triangle": np.array([0.25, 0.35, 0.9]),
}


def _image_rng(seed: int, index: int) -> np.random.Generator:
    key = np.array([np.uint64(seed), np.uint64(index)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _rasterize(kind: str, rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Boolean mask for one randomly placed shape, evaluated at pixel centers."""
    if kind == "rectangle":
        rw = int(rng.integers(max(2, w // 8), max(3, w // 2)))
        rh = int(rng.integers(max(2, h // 8), max(3, h // 2)))
        x0 = int(rng.integers(0, w - rw + 1))
        y0 = int(rng.integers(0, h - rh + 1))
        mask = np.zeros((h, w), dtype=bool)
        mask[y0 : y0 + rh, x0 : x0 + rw] = True
        return mask
    ys, xs = np.mgrid[0:h, 0:w]
    if kind == "disk":
        r = float(rng.uniform(min(h, w) / 10, min(h, w) / 4))
        cy = float(rng.uniform(r, h - r))
        cx = float(rng.uniform(r, w - r))
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
    # triangle: three random vertices, inside test via signed areas
    vx = rng.uniform(0, w, size=3)
    vy = rng.uniform(0, h, size=3)

    def cross(ax, ay, bx, by, px, py):
        return (bx - ax) * (py - ay) - (by - ay) * (px - ax)

    d1 = cross(vx[0], vy[0], vx[1], vy[1], xs, ys)
    d2 = cross(vx[1], vy[1], vx[2], vy[2], xs, ys)
    d3 = cross(vx[2], vy[2], vx[0], vy[0], xs, ys)
    neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(neg & pos)


def generate_sample(spec: DatasetSpec, index: int) -> Sample:
    rng = _image_rng(spec.seed, index)
    h, w = spec.height, spec.width
    base = rng.uniform(0.25, 0.75, size=3)
    image = np.broadcast_to(base[:, None, None], (3, h, w)).astype(np.float64).copy()
    if spec.texture:
        fy, fx = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * np.pi, size=2)
        ys, xs = np.mgrid[0:h, 0:w]
        wave = 0.08 * np.sin(2 * np.pi * fy * ys / h + phase[0]) * np.sin(
            2 * np.pi * fx * xs / w + phase[1]
        )
        image += wave[None]
    label = np.zeros((h, w), dtype=np.int64)
    lo, hi = spec.shapes_per_image
    n_shapes = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    for _ in range(n_shapes):
        kind = spec.shape_kinds[int(rng.integers(0, len(spec.shape_kinds)))]
        mask = _rasterize(kind, rng, h, w)
        color = np.clip(_KIND_BASE_COLOR[kind] + rng.uniform(-0.12, 0.12, size=3), 0, 1)
        image[:, mask] = color[:, None]
        label[mask] = _KIND_CLASS[kind]  # later shapes occlude earlier ones
    if spec.noise_std > 0:
        image += rng.normal(0.0, spec.noise_std, size=image.shape)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return Sample(image=image, label=label)


def generate_dataset(spec: DatasetSpec) -> list[Sample]:
    return [generate_sample(spec, i) for i in range(spec.count)]


# ---------------------------------------------------------------------------
# PPM / PGM codecs (binary, maxval 255)


def _encode_netpbm(magic: bytes, arr: np.ndarray) -> bytes:
    h, w = arr.shape[-2:]
    header = magic + b"\n%d %d\n255\n" % (w, h)
    if magic == b"P6":
        payload = np.moveaxis(arr, 0, -1).astype(np.uint8).tobytes()
    else:
        payload = arr.astype(np.uint8).tobytes()
    return header + payload


def _parse_netpbm(blob: bytes, expect_magic: bytes):
    pos = 0

    def token():
        nonlocal pos
        while pos < len(blob):
            if blob[pos : pos + 1].isspace():
                pos += 1
            elif blob[pos : pos + 1] == b"#":
                while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                    pos += 1
            else:
                break
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"truncated header at byte {start}")
        return blob[start:pos]

    magic = token()
    if magic != expect_magic:
        raise FormatError(f"bad magic {magic!r} at byte 0, expected {expect_magic!r}")
    try:
        w = int(token())
        h = int(token())
        maxval = int(token())
    except ValueError as e:
        raise FormatError(f"non-numeric header field near byte {pos}") from e
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval} near byte {pos}")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if expect_magic == b"P6" else 1
    need = w * h * channels
    payload = blob[pos : pos + need]
    if len(payload) != need:
        raise FormatError(f"truncated payload at byte {pos + len(payload)}, need {need} bytes")
    data = np.frombuffer(payload, dtype=np.uint8)
    if channels == 3:
        return np.moveaxis(data.reshape(h, w, 3), -1, 0), (h, w)
    return data.reshape(h, w), (h, w)


def encode_ppm(image: np.ndarray) -> bytes:
    """image: (3, H, W) float in [0,1] -> binary P6 bytes."""
    q = np.clip(np.rint(image * 255.0), 0, 255)
    return _encode_netpbm(b"P6", q)


def decode_ppm(blob: bytes) -> np.ndarray:
    raw, _ = _parse_netpbm(blob, b"P6")
    return (raw.astype(np.float32) / 255.0).copy()


def encode_pgm(label: np.ndarray) -> bytes:
    """label: (H, W) class ids < 256 -> binary P5 bytes."""
    if label.max(initial=0) > 255 or label.min(initial=0) < 0:
        raise FormatError("labels must fit into 8 bits")
    return _encode_netpbm(b"P5", label)


def decode_pgm(blob: bytes) -> np.ndarray:
    raw, _ = _parse_netpbm(blob, b"P5")
    return raw.astype(np.int64).copy()


def write_sample(directory: str, index: int, sample: Sample) -> tuple[str, str]:
    image_path = os.path.join(directory, f"image_{index:05d}.ppm")
    label_path = os.path.join(directory, f"label_{index:05d}.pgm")
    with open(image_path, "wb") as f:
        f.write(encode_ppm(sample.image))
    with open(label_path, "wb") as f:
        f.write(encode_pgm(sample.label))
    return image_path, label_path


def read_sample(directory: str, index: int) -> Sample:
    with open(os.path.join(directory, f"image_{index:05d}.ppm"), "rb") as f:
        image = decode_ppm(f.read())
    with open(os.path.join(directory, f"label_{index:05d}.pgm"), "rb") as f:
        label = decode_pgm(f.read())
    return Sample(image=image, label=label)


# ---------------------------------------------------------------------------
# manifest


def write_manifest(directory: str, rows: list[tuple[int, str, str, str]]) -> str:
    """rows: (index, split, image_path, label_path)."""
    path = os.path.join(directory, "manifest.csv")
    with open(path, "w", encoding="utf-8") as f:
        f.write("index,split,image_path,label_path\n")
        for index, split, ip, lp in rows:
            f.write(f"{index},{split},{ip},{lp}\n")
    return path


def read_manifest(directory: str) -> list[tuple[int, str, str, str]]:
    path = os.path.join(directory, "manifest.csv")
    rows = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "index,split,image_path,label_path":
            raise FormatError(f"unexpected manifest header: {header!r}")
        for line in f:
            line = line.strip()
            if not line:
                continue
            index, split, ip, lp = line.split(",")
            rows.append((int(index), split, ip, lp))
    return rows


def load_split(directory: str, split: str) -> list[Sample]:
    samples = []
    for _, sp, ip, lp in read_manifest(directory):
        if sp != split:
            continue
        with open(os.path.join(directory, ip), "rb") as f:
            image = decode_ppm(f.read())
        with open(os.path.join(directory, lp), "rb") as f:
            label = decode_pgm(f.read())
        samples.append(Sample(image=image, label=label))
    return samples


# ---------------------------------------------------------------------------
# checkpoint format


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    metadata: dict[str, str] = field(default_factory=dict)


def save_checkpoint(path: str, ckpt: Checkpoint) -> None:
    names = list(ckpt.tensors)
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
        for name in names:
            arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())
    with open(path + ".meta", "w", encoding="utf-8") as f:
        for k in sorted(ckpt.metadata):
            f.write(f"{k}={ckpt.metadata[k]}\n")


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise FormatError(f"file too short ({len(blob)} bytes)")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r} at byte 0")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        if pos + 2 > len(blob):
            raise FormatError(f"truncated name length at byte {pos}")
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos : pos + nlen].decode("utf-8")
        pos += nlen
        if pos + 1 > len(blob):
            raise FormatError(f"truncated ndim at byte {pos}")
        ndim = blob[pos]
        pos += 1
        if pos + 4 * ndim > len(blob):
            raise FormatError(f"truncated shape at byte {pos}")
        shape = struct.unpack_from(f"<{ndim}I", blob, pos) if ndim else ()
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        nbytes = 4 * size
        if pos + nbytes > len(blob):
            raise FormatError(f"truncated payload for {name!r} at byte {pos}")
        arr = np.frombuffer(blob[pos : pos + nbytes], dtype="<f4").reshape(shape).copy()
        pos += nbytes
        if name in tensors:
            raise FormatError(f"duplicate tensor name {name!r}")
        tensors[name] = arr
    metadata: dict[str, str] = {}
    meta_path = path + ".meta"
    if os.path.exists(meta_path):
        with open(meta_path, encoding="utf-8") as f:
            for line in f:
                line = line.rstrip("\n")
                if not line:
                    continue
                k, _, v = line.partition("=")
                metadata[k] = v
    return Checkpoint(tensors=tensors, metadata=metadata)


# ---------------------------------------------------------------------------
# generation <-> checkpoint glue


def checkpoint_from_generation(g) -> Checkpoint:
    from .nets import BackboneConfig  # local import to avoid a cycle

    cfg = g.config
    meta = {
        "arch.in_channels": str(cfg.in_channels),
        "arch.num_classes": str(cfg.num_classes),
        "arch.layer_channels": ",".join(str(c) for c in cfg.layer_channels),
        "arch.adon_latent": str(cfg.adon_latent),
        "arch.adon_placements": ",".join(cfg.adon_placements),
        "arch.embed_hw": f"{cfg.embed_hw[0]},{cfg.embed_hw[1]}",
        "generation_index": str(g.generation_index),
        "conditioning": cfg.conditioning,
        "seed": str(getattr(g, "seed", 0)),
    }
    tensors = {name: t.data for name, t in sorted(g.parameters.items())}
    return Checkpoint(tensors=tensors, metadata=meta)


def generation_from_checkpoint(ckpt: Checkpoint):
    from .nets import BackboneConfig, build_generation

    m = ckpt.metadata
    placements = tuple(p for p in m.get("arch.adon_placements", "").split(",") if p)
    eh, ew = (int(v) for v in m.get("arch.embed_hw", "64,64").split(","))
    cfg = BackboneConfig(
        in_channels=int(m["arch.in_channels"]),
        num_classes=int(m["arch.num_classes"]),
        layer_channels=tuple(int(c) for c in m["arch.layer_channels"].split(",")),
        adon_latent=int(m["arch.adon_latent"]),
        adon_placements=placements,
        conditioning=m["conditioning"],
        embed_hw=(eh, ew),
    )
    g = build_generation(cfg, seed=int(m.get("seed", "0")), index=int(m["generation_index"]))
    if set(ckpt.tensors) != set(g.parameters):
        missing = set(g.parameters) ^ set(ckpt.tensors)
        raise FormatError(f"checkpoint does not match architecture: {sorted(missing)}")
    for name, arr in ckpt.tensors.items():
        if g.parameters[name].data.shape != arr.shape:
            raise FormatError(f"shape mismatch for {name!r}")
        g.parameters[name].data = arr.astype(np.float32).copy()
    if g.fixed_embedding is not None:
        g.fixed_embedding.data = g.parameters["fixed_embedding"].data
    return g
