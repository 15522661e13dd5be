"""Deterministic synthetic RGB-D scenes with exact masks, plus the PPM/PGM
dataset interchange format and preprocessing.

Depth convention: larger = closer.  Objects are constructed at least
``depth_contrast`` closer than the background (before noise), so
thresholding depth at the construction midpoint recovers the mask whenever
noise_std < depth_contrast/6.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor

log = logging.getLogger(__name__)

MIN_FILL = 0.05
MAX_FILL = 0.40


class DataError(ValueError):
    """Bad dataset input or unsatisfiable generation constraint."""


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    shapes_min: int = 1
    shapes_max: int = 3
    kinds: tuple[str, ...] = ("circle", "rectangle", "triangle")
    color_contrast: float = 0.6
    depth_contrast: float = 0.6
    noise_std: float = 0.02
    background: str = "flat"

    def validate(self):
        if self.size < 4:
            raise DataError(f"scene size too small: {self.size}")
        if not (1 <= self.shapes_min <= self.shapes_max):
            raise DataError(f"bad shape count range {self.shapes_min}..{self.shapes_max}")
        bad = set(self.kinds) - {"circle", "rectangle", "triangle"}
        if not self.kinds or bad:
            raise DataError(f"unknown shape kinds {sorted(bad)}")
        for name in ("color_contrast", "depth_contrast"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise DataError(f"{name} must be in [0,1], got {v}")
        if self.noise_std < 0:
            raise DataError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.background not in ("flat", "gradient", "checker"):
            raise DataError(f"unknown background {self.background!r}")


@dataclass
class Sample:
    """One RGB-D item: rgb (1,3,H,W), depth (1,1,H,W), gt (1,1,H,W), all in [0,1]."""
    rgb: Tensor
    depth: Tensor
    gt: Tensor
    id: str


@dataclass
class DatasetSplit:
    train: list[Sample]
    test: list[Sample]


def rgb_ambiguous_scene(size: int = 64) -> SceneConfig:
    """The depth-benefit benchmark regime: objects nearly invisible in RGB
    on a cluttered background, but cleanly separated in depth."""
    return SceneConfig(size=size, color_contrast=0.08, depth_contrast=0.7,
                       noise_std=0.1, background="checker")


def clear_rgb_scene(size: int = 64) -> SceneConfig:
    """High-contrast RGB regime used to pretrain the prior."""
    return SceneConfig(size=size, color_contrast=0.7, depth_contrast=0.7,
                       noise_std=0.02, background="flat")


def _draw_shapes(cfg: SceneConfig, g: np.random.Generator, yy, xx):
    size = cfg.size
    count = int(g.integers(cfg.shapes_min, cfg.shapes_max + 1))
    masks = []
    for _ in range(count):
        kind = cfg.kinds[int(g.integers(len(cfg.kinds)))]
        if kind == "circle":
            r = size * g.uniform(0.10, 0.26)
            cy = g.uniform(r, size - r)
            cx = g.uniform(r, size - r)
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        elif kind == "rectangle":
            hh = size * g.uniform(0.08, 0.22)
            hw = size * g.uniform(0.08, 0.22)
            cy = g.uniform(hh, size - hh)
            cx = g.uniform(hw, size - hw)
            mask = (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
        else:  # triangle
            radius = size * g.uniform(0.14, 0.30)
            cy = g.uniform(radius, size - radius)
            cx = g.uniform(radius, size - radius)
            ang = np.sort(g.uniform(0, 2 * np.pi, 3))
            rad = radius * g.uniform(0.6, 1.0, 3)
            py = cy + rad * np.sin(ang)
            px = cx + rad * np.cos(ang)
            area2 = abs((px[1] - px[0]) * (py[2] - py[0]) - (px[2] - px[0]) * (py[1] - py[0]))
            if area2 < 0.01 * size * size:
                return None  # degenerate; redraw the whole scene
            mask = np.ones((size, size), bool)
            for a in range(3):
                b = (a + 1) % 3
                # inside = same side as the third vertex for every edge
                c = (a + 2) % 3
                cross = (px[b] - px[a]) * (yy - py[a]) - (py[b] - py[a]) * (xx - px[a])
                ref = (px[b] - px[a]) * (py[c] - py[a]) - (py[b] - py[a]) * (px[c] - px[a])
                mask &= (cross * ref) >= 0
        masks.append(mask)
    return masks


def _smooth_field(g: np.random.Generator, size: int, shape_prefix=()) -> np.ndarray:
    """Spatially smooth Gaussian field (bilinearly upsampled coarse iid grid).

    Per-pixel std is 1 at grid nodes and below 1 between them; correlation
    length ~ size/8, the scale of depth-sensor artifacts.
    """
    k = max(size // 8, 2)
    low = g.standard_normal(shape_prefix + (k, k))
    t = (np.arange(size) + 0.5) * (k / size) - 0.5
    i0 = np.clip(np.floor(t), 0, k - 1).astype(int)
    i1 = np.minimum(i0 + 1, k - 1)
    f = np.clip(t - i0, 0.0, 1.0)
    a = low[..., i0, :] * (1 - f)[:, None] + low[..., i1, :] * f[:, None]
    return a[..., :, i0] * (1 - f) + a[..., :, i1] * f


def _noise(cfg: SceneConfig, g: np.random.Generator, shape_prefix=()) -> np.ndarray:
    """Gaussian noise, half iid and half a smooth field (same model for rgb
    and depth); per-pixel std <= noise_std."""
    size = cfg.size
    iid = g.standard_normal(shape_prefix + (size, size))
    smooth = _smooth_field(g, size, shape_prefix)
    return cfg.noise_std * np.sqrt(0.5) * (iid + smooth)


def _inward_ramp(mask: np.ndarray, r: int = 3) -> np.ndarray:
    """0 outside the mask, k/r at erosion depth k, 1 in the interior.

    Models sensor-style boundary fattening: object depth rises to its
    plateau over ~r pixels inward, so the mask edge sits at the foot of a
    ramp instead of a full-height step.
    """
    dist = np.zeros(mask.shape, np.float64)
    cur = mask.copy()
    for _ in range(r):
        dist += cur
        p = np.pad(cur, 1, constant_values=False)
        cur = cur & p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return dist / r


def _background_rgb(cfg: SceneConfig, g: np.random.Generator, yy, xx):
    size = cfg.size
    if cfg.background == "flat":
        color = g.uniform(0.25, 0.75, 3)
        return np.broadcast_to(color[:, None, None], (3, size, size)).copy()
    if cfg.background == "gradient":
        c0 = g.uniform(0.25, 0.75, 3)
        c1 = g.uniform(0.25, 0.75, 3)
        theta = g.uniform(0, 2 * np.pi)
        t = (np.cos(theta) * xx + np.sin(theta) * yy)
        t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
        return c0[:, None, None] + t[None] * (c1 - c0)[:, None, None]
    # checker
    c0 = g.uniform(0.25, 0.75, 3)
    c1 = g.uniform(0.25, 0.75, 3)
    cell = int(g.choice([4, 8, 16]))
    oy, ox = int(g.integers(cell)), int(g.integers(cell))
    tiles = (((yy + oy) // cell).astype(int) + ((xx + ox) // cell).astype(int)) % 2
    return np.where(tiles[None] == 0, c0[:, None, None], c1[:, None, None])


def gen_sample(config: SceneConfig, seed: int) -> Sample:
    """Renders one scene; a pure function of (config, seed)."""
    config.validate()
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    size = config.size
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5

    masks = None
    for _ in range(100):
        cand = _draw_shapes(config, g, yy, xx)
        if cand is None:
            continue
        frac = np.logical_or.reduce(cand).mean()
        if MIN_FILL <= frac <= MAX_FILL:
            masks = cand
            break
    if masks is None:
        raise DataError(
            f"gen_sample(seed={seed}): could not satisfy the "
            f"{MIN_FILL:.0%}..{MAX_FILL:.0%} foreground fraction in 100 attempts")

    rgb = _background_rgb(config, g, yy, xx)

    # depth: tilted background plane; every object at least depth_contrast
    # closer than the plane's nearest point, with per-object variation above
    c = config.depth_contrast
    b0 = g.uniform(0.0, 0.1 * (1.0 - c))
    tilt = 0.55 * (1.0 - c) * g.uniform(0.5, 1.0)
    theta = g.uniform(0.0, 2.0 * np.pi)
    ramp = np.cos(theta) * xx + np.sin(theta) * yy
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-9)
    depth = b0 + tilt * ramp
    bg_max = b0 + tilt
    headroom = min(0.2, 1.0 - (bg_max + c))
    # object elevation over the plane top: 0.75c at the very boundary, the
    # full c + per-object headroom on the interior plateau (inward ramp)
    obj_levels = [c + headroom * g.uniform() for _ in masks]
    color_dirs = [g.choice([-1.0, 1.0], 3) for _ in masks]

    order = np.argsort(obj_levels)  # far to near; nearer shapes paint on top
    for idx in order:
        m = masks[idx]
        lift = 0.75 * c + (obj_levels[idx] - 0.75 * c) * _inward_ramp(m)
        depth[m] = bg_max + lift[m]
        delta = config.color_contrast * color_dirs[idx]
        rgb[:, m] = np.clip(rgb[:, m] + delta[:, None], 0.0, 1.0)

    gt = np.logical_or.reduce(masks).astype(np.float32)
    if config.noise_std > 0:
        rgb = rgb + _noise(config, g, (3,))
        depth = depth + _noise(config, g)
    rgb = np.clip(rgb, 0.0, 1.0).astype(np.float32)
    depth = np.clip(depth, 0.0, 1.0).astype(np.float32)

    return Sample(
        rgb=Tensor(rgb[None]),
        depth=Tensor(depth[None, None]),
        gt=Tensor(gt[None, None]),
        id=f"{int(seed):010d}",
    )


def gen_dataset(config: SceneConfig, n: int, seed: int) -> DatasetSplit:
    """n samples with per-sample seeds seed+i, shuffled into a 75/25 split."""
    if n < 2:
        raise DataError(f"need at least 2 samples, got {n}")
    samples = [gen_sample(config, seed + i) for i in range(n)]
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed), spawn_key=(1,))))
    order = g.permutation(n)
    n_train = (3 * n) // 4
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    return DatasetSplit(train=train, test=test)


# ---------------------------------------------------------------------------
# Binary PPM (P6) / PGM (P5), 8-bit only


def _write_netpbm(path, magic: bytes, img: np.ndarray):
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def write_pgm(path, img: np.ndarray):
    if img.ndim != 2:
        raise DataError(f"PGM wants a 2-D array, got shape {img.shape}")
    _write_netpbm(path, b"P5", img)


def write_ppm(path, img: np.ndarray):
    if img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"PPM wants an (H,W,3) array, got shape {img.shape}")
    _write_netpbm(path, b"P6", img)


def _read_netpbm(path, want_magic: bytes) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            ch = data[pos:pos + 1]
            if ch == b"#":
                nl = data.find(b"\n", pos)
                pos = len(data) if nl < 0 else nl + 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated header")
        return data[start:pos]

    magic = token()
    if magic != want_magic:
        raise DataError(f"{path}: expected {want_magic.decode()} file, got {magic!r}")
    try:
        w, h, maxval = int(token()), int(token()), int(token())
    except ValueError as e:
        raise DataError(f"{path}: bad header: {e}") from e
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit (maxval 255) supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    channels = 3 if want_magic == b"P6" else 1
    need = w * h * channels
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise DataError(f"{path}: raster truncated ({len(raster)} of {need} bytes)")
    arr = np.frombuffer(raster, dtype=np.uint8)
    return arr.reshape(h, w, 3) if channels == 3 else arr.reshape(h, w)


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5")


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6")


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)  # round half up


def export_dataset(samples: list[Sample], dirpath):
    """Writes <id>_rgb.ppm / <id>_depth.pgm / <id>_gt.pgm triples."""
    import os
    os.makedirs(dirpath, exist_ok=True)
    for s in samples:
        rgb = _to_u8(s.rgb.data[0].transpose(1, 2, 0))
        write_ppm(os.path.join(dirpath, f"{s.id}_rgb.ppm"), rgb)
        write_pgm(os.path.join(dirpath, f"{s.id}_depth.pgm"), _to_u8(s.depth.data[0, 0]))
        write_pgm(os.path.join(dirpath, f"{s.id}_gt.pgm"), _to_u8(s.gt.data[0, 0]))


_TRIPLE_RE = re.compile(r"^(?P<id>.+)_(?P<part>rgb\.ppm|depth\.pgm|gt\.pgm)$")


def load_dataset_dir(path) -> list[Sample]:
    """Loads <id>_rgb.ppm / <id>_depth.pgm / <id>_gt.pgm triples from a directory.

    8-bit values are scaled to [0,1]; gt binarizes at >= 128.  Files not
    matching the naming scheme are ignored with a warning; an id with a
    missing member is an error.
    """
    import os
    members: dict[str, set[str]] = {}
    for fname in sorted(os.listdir(path)):
        m = _TRIPLE_RE.match(fname)
        if m is None:
            log.warning("ignoring unrecognized file %s", fname)
            continue
        members.setdefault(m.group("id"), set()).add(m.group("part"))
    samples = []
    for sid in sorted(members):
        have = members[sid]
        missing = {"rgb.ppm", "depth.pgm", "gt.pgm"} - have
        if missing:
            raise DataError(f"dataset triple {sid!r} is missing {sorted(missing)}")
        rgb = read_ppm(os.path.join(path, f"{sid}_rgb.ppm"))
        depth = read_pgm(os.path.join(path, f"{sid}_depth.pgm"))
        gt = read_pgm(os.path.join(path, f"{sid}_gt.pgm"))
        if rgb.shape[:2] != depth.shape or rgb.shape[:2] != gt.shape:
            raise DataError(
                f"dataset triple {sid!r} has mismatched sizes: rgb {rgb.shape[:2]}, "
                f"depth {depth.shape}, gt {gt.shape}")
        samples.append(Sample(
            rgb=Tensor((rgb.astype(np.float32) / 255.0).transpose(2, 0, 1)[None]),
            depth=Tensor(depth.astype(np.float32)[None, None] / 255.0),
            gt=Tensor((gt >= 128).astype(np.float32)[None, None]),
            id=sid,
        ))
    return samples


# ---------------------------------------------------------------------------
# Preprocessing


def _resize_bilinear(img: np.ndarray, th: int, tw: int) -> np.ndarray:
    c, h, w = img.shape
    ys = (np.arange(th) + 0.5) * (h / th) - 0.5
    xs = (np.arange(tw) + 0.5) * (w / tw) - 0.5
    y0 = np.clip(np.floor(ys), 0, h - 1).astype(int)
    x0 = np.clip(np.floor(xs), 0, w - 1).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = np.clip(ys - y0, 0.0, 1.0)[None, :, None]
    fx = np.clip(xs - x0, 0.0, 1.0)[None, None, :]
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(img.dtype)


def _resize_nearest(img: np.ndarray, th: int, tw: int) -> np.ndarray:
    c, h, w = img.shape
    ys = np.minimum((np.arange(th) + 0.5) * (h / th), h - 1).astype(int)
    xs = np.minimum((np.arange(tw) + 0.5) * (w / tw), w - 1).astype(int)
    return img[:, ys][:, :, xs]


def preprocess(sample: Sample, target_size: int) -> Sample:
    """Rescales to target_size x target_size: bilinear for rgb/depth,
    nearest for gt (stays binary)."""
    if target_size < 1 or (target_size & (target_size - 1)):
        raise DataError(f"target_size must be a positive power of two, got {target_size}")
    _, _, h, w = sample.rgb.shape
    if h == 0 or w == 0:
        raise DataError("cannot resize a zero-size image")
    return Sample(
        rgb=Tensor(_resize_bilinear(sample.rgb.data[0], target_size, target_size)[None]),
        depth=Tensor(_resize_bilinear(sample.depth.data[0], target_size, target_size)[None]),
        gt=Tensor(_resize_nearest(sample.gt.data[0], target_size, target_size)[None]),
        id=sample.id,
    )
