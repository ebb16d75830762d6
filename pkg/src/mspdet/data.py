"""Image IO (binary PGM/PPM), CSV schemas, dataset index and the synthetic
multi-scale benchmark generator."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import boxes as bx
from .tensor import Tensor

log = logging.getLogger(__name__)

GT_HEADER = ["image_id", "class_id", "x_min", "y_min", "x_max", "y_max"]
DET_HEADER = ["image_id", "class_id", "score", "x_min", "y_min", "x_max", "y_max"]


class DataError(Exception):
    """Malformed input data (images, CSV, dataset layout)."""


# ---------------------------------------------------------------------------
# PGM / PPM


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DataError("unexpected end of PNM header")
    return buf[start:pos], pos


def decode_pnm(buf: bytes) -> np.ndarray:
    """Binary P5/P6 bytes -> uint8 array (C, H, W)."""
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported PNM magic {magic!r}")
    try:
        w_tok, pos = _read_token(buf, pos)
        h_tok, pos = _read_token(buf, pos)
        m_tok, pos = _read_token(buf, pos)
        width, height, maxval = int(w_tok), int(h_tok), int(m_tok)
    except ValueError as exc:
        raise DataError(f"malformed PNM header: {exc}") from exc
    if maxval != 255 or width <= 0 or height <= 0:
        raise DataError(f"unsupported PNM geometry {width}x{height} maxval {maxval}")
    pos += 1  # single whitespace after maxval
    channels = 1 if magic == b"P5" else 3
    count = width * height * channels
    payload = buf[pos:pos + count]
    if len(payload) != count:
        raise DataError(f"truncated PNM payload: {len(payload)} of {count} bytes")
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return arr.transpose(2, 0, 1).copy()


def encode_pnm(img: np.ndarray) -> bytes:
    """uint8 array (C, H, W) with C in {1, 3} -> binary PGM/PPM bytes."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c not in (1, 3):
        raise ValueError(f"PNM needs 1 or 3 channels, got {c}")
    magic = "P5" if c == 1 else "P6"
    body = np.ascontiguousarray(img.astype(np.uint8).transpose(1, 2, 0)).tobytes()
    return f"{magic}\n{w} {h}\n255\n".encode("ascii") + body


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_pnm(fh.read())


def write_pnm(path, img: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pnm(img))


def load_image(path, mean=None) -> Tensor:
    """Read a PGM/PPM as a (1, C, H, W) tensor scaled to [0, 1], minus ``mean``."""
    arr = read_pnm(path).astype(np.float64) / 255.0
    if mean is not None:
        arr = arr - np.asarray(mean, dtype=np.float64).reshape(-1, 1, 1)[: arr.shape[0]]
    return Tensor(arr[None])


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# CSV


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    box: bx.Box
    class_id: int

    @property
    def height(self) -> float:
        return self.box.y_max - self.box.y_min


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    class_id: int
    score: float
    box: bx.Box


def _f(v: float) -> str:
    return f"{v:.6f}"


def write_gt_csv(path, gts) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(GT_HEADER)
        for g in gts:
            wr.writerow([g.image_id, g.class_id, *map(_f, g.box)])


def write_det_csv(path, dets) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(DET_HEADER)
        for d in dets:
            wr.writerow([d.image_id, d.class_id, _f(d.score), *map(_f, d.box)])


def _read_rows(path, header):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows or [h.strip() for h in rows[0]] != header:
        raise DataError(f"{path}: expected header {','.join(header)}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        out.append((lineno, row))
    return out


def read_gt_csv(path) -> list[GroundTruth]:
    gts = []
    for lineno, row in _read_rows(path, GT_HEADER):
        try:
            box = bx.Box(*map(float, row[2:6])).validate()
            gts.append(GroundTruth(row[0], box, int(row[1])))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return gts


def read_det_csv(path) -> list[DetectionRecord]:
    dets = []
    for lineno, row in _read_rows(path, DET_HEADER):
        try:
            box = bx.Box(*map(float, row[3:7])).validate()
            dets.append(DetectionRecord(row[0], int(row[1]), float(row[2]), box))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
    return dets


# ---------------------------------------------------------------------------
# dataset index


@dataclass
class DatasetEntry:
    image_path: Path
    gts: list[GroundTruth]
    view: str | None = None

    @property
    def image_id(self) -> str:
        return self.image_path.stem


@dataclass
class DatasetIndex:
    entries: list[DatasetEntry]
    classes: dict[int, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def validate(self) -> None:
        for e in self.entries:
            if not e.image_path.is_file():
                raise DataError(f"missing image {e.image_path}")
            for g in e.gts:
                if self.classes and g.class_id not in self.classes:
                    raise DataError(f"{e.image_id}: class {g.class_id} not in taxonomy")

    @property
    def image_ids(self) -> list[str]:
        return [e.image_id for e in self.entries]

    def all_gts(self) -> list[GroundTruth]:
        return [g for e in self.entries for g in e.gts]

    def load(self, mean=None) -> "LoadedDataset":
        return LoadedDataset(self, mean)

    @classmethod
    def from_dir(cls, root, classes: dict[int, str] | None = None) -> "DatasetIndex":
        """Dataset laid out as ``root/gt.csv`` plus ``root/images/<image_id>.p[gp]m``.

        Images without ground truth are included; an optional ``views.csv``
        (image_id,view) attaches view tags.
        """
        root = Path(root)
        gts = read_gt_csv(root / "gt.csv")
        by_image: dict[str, list[GroundTruth]] = {}
        for g in gts:
            by_image.setdefault(g.image_id, []).append(g)
        views = {}
        if (root / "views.csv").is_file():
            with open(root / "views.csv", newline="") as fh:
                for row in list(csv.reader(fh))[1:]:
                    if row:
                        views[row[0]] = row[1]
        paths = sorted(list_images(root / "images"))
        known = {p.stem for p in paths}
        unknown = set(by_image) - known
        if unknown:
            raise DataError(f"gt.csv references missing images: {sorted(unknown)[:5]}")
        if classes is None:
            classes = {c: f"class{c}" for c in sorted({g.class_id for g in gts})}
        idx = cls([DatasetEntry(p, by_image.get(p.stem, []), views.get(p.stem)) for p in paths], classes)
        idx.validate()
        return idx


def list_images(folder) -> list[Path]:
    folder = Path(folder)
    if not folder.is_dir():
        return []
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in (".pgm", ".ppm"))


class LoadedDataset:
    """Sequence of (image (C,H,W) float in [0,1], boxes (M,4), classes (M,))."""

    def __init__(self, index: DatasetIndex, mean=None):
        self.index = index
        self.mean = mean
        self._images = [read_pnm(e.image_path) for e in index.entries]

    def __len__(self) -> int:
        return len(self._images)

    def __getitem__(self, i: int):
        e = self.index.entries[i]
        img = self._images[i].astype(np.float64) / 255.0
        if self.mean is not None:
            img = img - np.asarray(self.mean, dtype=np.float64).reshape(-1, 1, 1)
        boxes = np.array([list(g.box) for g in e.gts], dtype=np.float64).reshape(-1, 4)
        classes = np.array([g.class_id for g in e.gts], dtype=np.int64)
        return img, boxes, classes


# ---------------------------------------------------------------------------
# synthetic benchmark


CLASS_COLORS = {
    1: (0.90, 0.20, 0.20),  # filled rectangle
    2: (0.20, 0.85, 0.25),  # filled ellipse
    3: (0.25, 0.35, 0.95),  # elliptical ring
    4: (0.95, 0.85, 0.15),  # plus sign
}
CLASS_NAMES = {1: "block", 2: "disc", 3: "ring", 4: "cross"}


@dataclass
class SynthConfig:
    num_images: int = 100
    image_size: tuple[int, int] = (128, 128)  # (height, width)
    objects_per_image: tuple[int, int] = (1, 5)
    height_range: tuple[float, float] = (6.0, 48.0)
    num_classes: int = 4
    clutter_density: float = 4.0
    noise: float = 0.03
    max_pair_iou: float = 0.3
    max_tries: int = 50
    seed: int = 0
    prefix: str = "img"

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_COLORS):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_COLORS)}]")
        lo, hi = self.height_range
        if not 1 <= lo <= hi:
            raise ValueError(f"bad height range {self.height_range}")
        if hi > min(self.image_size):
            raise ValueError("objects taller than the image")


def _shape_mask(cls_id: int, h: int, w: int) -> np.ndarray:
    """Boolean (h, w) mask whose bounding box is the full h x w frame."""
    py = np.arange(h) + 0.5 - h / 2
    px = np.arange(w) + 0.5 - w / 2
    r2 = (py[:, None] / (h / 2)) ** 2 + (px[None, :] / (w / 2)) ** 2
    if cls_id == 1:
        m = np.ones((h, w), dtype=bool)
    elif cls_id == 2:
        m = r2 <= 1.0
    elif cls_id == 3:
        t = max(1.5, 0.25 * min(h, w))
        a, b = w / 2 - t, h / 2 - t
        m = r2 <= 1.0
        if a > 0.5 and b > 0.5:
            m &= (py[:, None] / b) ** 2 + (px[None, :] / a) ** 2 > 1.0
    else:
        ty = max(1, int(round(h / 3)))
        tx = max(1, int(round(w / 3)))
        m = np.zeros((h, w), dtype=bool)
        m[(h - ty) // 2:(h - ty) // 2 + ty, :] = True
        m[:, (w - tx) // 2:(w - tx) // 2 + tx] = True
    # every shape touches all four frame edges
    m[h // 2, :] = True
    m[:, w // 2] = True
    return m


def render_image(cfg: SynthConfig, rng: np.random.Generator):
    """One synthetic image (3, H, W) in [0, 1] and its (boxes, classes)."""
    H, W = cfg.image_size
    base = rng.uniform(0.25, 0.5)
    gy, gx = rng.normal(0, 0.08, 2)
    img = base + gy * np.linspace(-1, 1, H)[:, None] + gx * np.linspace(-1, 1, W)[None, :]
    img = np.repeat(img[None], 3, axis=0)
    img = img + rng.normal(0, 0.02, (3, 1, 1))

    for _ in range(rng.poisson(cfg.clutter_density)):
        ch = int(rng.integers(2, 30))
        cw = int(rng.integers(2, 30))
        if rng.random() < 0.5:
            ch = max(1, ch // 8)  # thin bar
        y0 = int(rng.integers(0, H - ch + 1))
        x0 = int(rng.integers(0, W - cw + 1))
        img[:, y0:y0 + ch, x0:x0 + cw] += rng.uniform(-0.2, 0.2)

    lo, hi = cfg.height_range
    boxes, classes = [], []
    count = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    for _ in range(count):
        cls_id = int(rng.integers(1, cfg.num_classes + 1))
        placed = False
        for _try in range(cfg.max_tries):
            h = int(min(np.floor(np.exp(rng.uniform(np.log(lo), np.log(hi + 1)))), hi))
            w = int(np.clip(np.rint(h * rng.uniform(0.75, 1.33)), 3, W))
            y0 = int(rng.integers(0, H - h + 1))
            x0 = int(rng.integers(0, W - w + 1))
            cand = np.array([[x0, y0, x0 + w, y0 + h]], dtype=np.float64)
            if boxes and bx.iou_matrix(cand, np.array(boxes)).max() >= cfg.max_pair_iou:
                continue
            if boxes and _intersects_any(cand[0], boxes):
                continue
            placed = True
            break
        if not placed:
            log.info("skipping object: no free placement after %d tries", cfg.max_tries)
            continue
        mask = _shape_mask(cls_id, h, w)
        color = np.asarray(CLASS_COLORS[cls_id]) + rng.uniform(-0.08, 0.08, 3)
        region = img[:, y0:y0 + h, x0:x0 + w]
        img[:, y0:y0 + h, x0:x0 + w] = np.where(mask[None], color[:, None, None], region)
        boxes.append([x0, y0, x0 + w, y0 + h])
        classes.append(cls_id)

    img = img + rng.normal(0, cfg.noise, img.shape)
    return np.clip(img, 0.0, 1.0), np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(classes, dtype=np.int64)


def _intersects_any(box, boxes) -> bool:
    # objects must not touch, so rendered masks re-measure to their own boxes
    b = np.asarray(boxes)
    return bool(np.any((b[:, 0] < box[2] + 1) & (box[0] < b[:, 2] + 1)
                       & (b[:, 1] < box[3] + 1) & (box[1] < b[:, 3] + 1)))


def generate_synthetic(cfg: SynthConfig, out_dir) -> DatasetIndex:
    """Write images/, gt.csv and manifest.txt under ``out_dir``; deterministic in ``cfg.seed``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    entries, gts_all = [], []
    for i in range(cfg.num_images):
        img, boxes, classes = render_image(cfg, rng)
        image_id = f"{cfg.prefix}_{i:05d}"
        path = out / "images" / f"{image_id}.ppm"
        write_pnm(path, to_uint8(img))
        gts = [GroundTruth(image_id, bx.Box(*map(float, b)), int(c)) for b, c in zip(boxes, classes)]
        gts_all.extend(gts)
        entries.append(DatasetEntry(path, gts))
    write_gt_csv(out / "gt.csv", gts_all)
    write_manifest(out / "manifest.txt", cfg, gts_all)
    return DatasetIndex(entries, {c: CLASS_NAMES[c] for c in range(1, cfg.num_classes + 1)})


SIZE_BINS = (0, 8, 16, 24, 32, 48, 64, 1 << 30)


def size_histogram(gts) -> dict[str, int]:
    heights = np.array([g.height for g in gts])
    hist = {}
    for lo, hi in zip(SIZE_BINS[:-1], SIZE_BINS[1:]):
        label = f"[{lo},{hi})" if hi < (1 << 30) else f"[{lo},inf)"
        hist[label] = int(((heights >= lo) & (heights < hi)).sum()) if len(heights) else 0
    return hist


def write_manifest(path, cfg: SynthConfig, gts) -> None:
    heights = np.array([g.height for g in gts])
    small = float((heights < 16).mean()) if len(heights) else 0.0
    lines = ["[synth]"]
    for key, value in vars(cfg).items():
        lines.append(f"{key} = {_fmt_value(value)}")
    lines += ["", "[sizes]", f"objects = {len(gts)}", f"small_fraction = {small:.6f}"]
    for label, n in size_histogram(gts).items():
        lines.append(f"height{label} = {n}")
    lines += ["", "[classes]"]
    for c in range(1, cfg.num_classes + 1):
        lines.append(f"class{c} = {sum(1 for g in gts if g.class_id == c)}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current = None
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("["):
            current = sections.setdefault(line.strip("[]"), {})
        else:
            key, value = (s.strip() for s in line.split("=", 1))
            current[key] = value
    return sections


def _fmt_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def worker_count() -> int:
    """Worker cap from MSP_THREADS (default: available cores)."""
    raw = os.environ.get("MSP_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise DataError(f"MSP_THREADS must be an integer, got {raw!r}")
    return os.cpu_count() or 1
