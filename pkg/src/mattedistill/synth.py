"""Synthetic matting data: foreground/alpha generators, compositing,
trimap synthesis, and the region/scaling masks the losses consume.

Each generator is a pure function of its RNG and emits a foreground
color field plus an alpha matte in the same 1x1xHxW / 1x3xHxW layout
used everywhere else.  Four families cover the qualitatively distinct
matting cases:

  disk     mostly solid object with a thin Gaussian rim (non-transparent)
  blob     translucent wavy-edged body, interior alpha in [0.2, 0.8]
  web      sparse 1-2 px strands with Gaussian cross-section (transparent)
  polygon  hard straight-edged shape with a 2 px soft rim (non-transparent)

Samples are deterministic in (seed, kind, size); the RNG is keyed on the
full tuple so no two configurations share a stream.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import tenfile

__all__ = [
    "CompositeSample",
    "composite",
    "make_sample",
    "make_trimap",
    "region_mask",
    "scaling_mask",
    "disk_structure",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "GENERATOR_KINDS",
    "EVAL_TRIMAP_RADIUS",
    "TRAIN_TRIMAP_RADII",
]

GENERATOR_KINDS = ("disk", "blob", "web", "polygon")
_KIND_CODES = {k: i + 1 for i, k in enumerate(GENERATOR_KINDS)}
_TRANSPARENT = {"blob": True, "web": True, "disk": False, "polygon": False}

EVAL_TRIMAP_RADIUS = 4
TRAIN_TRIMAP_RADII = (1, 8)  # inclusive bounds for the per-sample draw

FG_LABEL = 1.0
BG_LABEL = 0.0
TR_LABEL = 0.5


@dataclass
class CompositeSample:
    """One composited training/eval sample; arrays are float64 NCHW."""

    fg: np.ndarray       # 1x3xHxW in [0,1]
    bg: np.ndarray       # 1x3xHxW in [0,1]
    alpha: np.ndarray    # 1x1xHxW in [0,1]
    image: np.ndarray    # 1x3xHxW, alpha*fg + (1-alpha)*bg
    trimap: np.ndarray   # 1x1xHxW in {0, 0.5, 1}, radius EVAL_TRIMAP_RADIUS
    attribute: str       # "transparent" | "non-transparent"
    kind: str
    seed: int


def composite(fg, bg, alpha):
    """Blend: image = alpha*fg + (1-alpha)*bg, alpha broadcast over color."""
    fg = np.asarray(fg, dtype=np.float64)
    bg = np.asarray(bg, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if fg.shape != bg.shape:
        raise ValueError(f"fg shape {fg.shape} != bg shape {bg.shape}")
    if alpha.shape[-2:] != fg.shape[-2:]:
        raise ValueError(f"alpha spatial shape {alpha.shape} does not match {fg.shape}")
    if alpha.min() < 0.0 or alpha.max() > 1.0:
        raise ValueError("alpha values outside [0, 1]")
    return alpha * fg + (1.0 - alpha) * bg


# -- coordinate helpers -------------------------------------------------------


def _grid(h, w):
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    return yy, xx


def _color_field(rng, h, w):
    """Flat random color with a gentle linear gradient per channel."""
    base = rng.uniform(0.15, 0.9, size=3)
    grad = rng.uniform(-0.2, 0.2, size=3)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = _grid(h, w)
    t = (np.cos(theta) * xx / max(w - 1, 1) + np.sin(theta) * yy / max(h - 1, 1))
    field = base[:, None, None] + grad[:, None, None] * t[None]
    return np.clip(field, 0.02, 0.98)[None]


def _cut_rescale(field, cut=0.05):
    """Shift a (0,1] falloff so it reaches exactly 0 at the cut level."""
    return np.clip((field - cut) / (1.0 - cut), 0.0, 1.0)


# -- alpha generators ---------------------------------------------------------


def _gen_disk(rng, h, w):
    m = min(h, w)
    cy = h / 2.0 + rng.uniform(-0.1, 0.1) * h
    cx = w / 2.0 + rng.uniform(-0.1, 0.1) * w
    r = rng.uniform(0.2, 0.35) * m
    sigma = 0.35  # thin rim keeps the fractional share well under 25%
    yy, xx = _grid(h, w)
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    rim = _cut_rescale(np.exp(-((d - r) ** 2) / (2.0 * sigma * sigma)))
    alpha = np.where(d <= r, 1.0, rim)
    return alpha[None, None]


def _gen_blob(rng, h, w):
    m = min(h, w)
    cy = h / 2.0 + rng.uniform(-0.08, 0.08) * h
    cx = w / 2.0 + rng.uniform(-0.08, 0.08) * w
    r0 = rng.uniform(0.2, 0.32) * m
    amps = rng.uniform(0.0, 0.12, size=3)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=3)
    yy, xx = _grid(h, w)
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    theta = np.arctan2(yy - cy, xx - cx)
    rb = r0 * (1.0 + sum(a * np.cos((k + 2) * theta + p)
                         for k, (a, p) in enumerate(zip(amps, phases))))
    s = np.clip((rb - d) / 1.2, 0.0, 1.0)
    rim = s * s * (3.0 - 2.0 * s)
    base = rng.uniform(0.25, 0.75)
    wobble = ndimage.gaussian_filter(rng.standard_normal((h, w)), 3.0)
    peak = np.abs(wobble).max()
    if peak > 0:
        wobble *= 0.05 / peak
    # interior opacity stays inside [0.2, 0.8]; the rim only scales it down
    alpha = (base + wobble) * rim
    return alpha[None, None]


def _seg_dist(yy, xx, p0, p1):
    vy, vx = p1[0] - p0[0], p1[1] - p0[1]
    wy, wx = yy - p0[0], xx - p0[1]
    denom = vy * vy + vx * vx
    t = np.clip((wy * vy + wx * vx) / denom, 0.0, 1.0) if denom > 0 else 0.0
    return np.sqrt((wy - t * vy) ** 2 + (wx - t * vx) ** 2)


def _gen_web(rng, h, w):
    nseg = int(rng.integers(5, 10))
    yy, xx = _grid(h, w)
    tau = 0.55  # alpha drops below the cut within ~1 px of the centerline
    field = np.zeros((h, w))
    for _ in range(nseg):
        p0 = (rng.uniform(0, h - 1), rng.uniform(0, w - 1))
        p1 = (rng.uniform(0, h - 1), rng.uniform(0, w - 1))
        d = _seg_dist(yy, xx, p0, p1)
        field = np.maximum(field, np.exp(-((d / tau) ** 2)))
    return _cut_rescale(field)[None, None]


def _gen_polygon(rng, h, w):
    m = min(h, w)
    nv = int(rng.integers(5, 10))
    cy = h / 2.0 + rng.uniform(-0.08, 0.08) * h
    cx = w / 2.0 + rng.uniform(-0.08, 0.08) * w
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, size=nv))
    radii = rng.uniform(0.2, 0.35, size=nv) * m
    vy = cy + radii * np.sin(angles)
    vx = cx + radii * np.cos(angles)
    yy, xx = _grid(h, w)
    dist = np.full((h, w), np.inf)
    inside = np.zeros((h, w), dtype=bool)
    for i in range(nv):
        j = (i + 1) % nv
        dist = np.minimum(dist, _seg_dist(yy, xx, (vy[i], vx[i]), (vy[j], vx[j])))
        # even-odd ray casting, one edge at a time
        crosses = (vy[i] > yy) != (vy[j] > yy)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (vx[j] - vx[i]) * (yy - vy[i]) / (vy[j] - vy[i]) + vx[i]
        inside ^= crosses & (xx < xint)
    sd = np.where(inside, -dist, dist)
    alpha = np.clip(0.5 - sd / 2.0, 0.0, 1.0)  # 2 px linear rim
    return alpha[None, None]


_GENERATORS = {
    "disk": _gen_disk,
    "blob": _gen_blob,
    "web": _gen_web,
    "polygon": _gen_polygon,
}


def _background(rng, h, w):
    c0 = rng.uniform(0.05, 0.95, size=3)
    c1 = rng.uniform(0.05, 0.95, size=3)
    theta = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = _grid(h, w)
    t = np.cos(theta) * xx / max(w - 1, 1) + np.sin(theta) * yy / max(h - 1, 1)
    t = (t - t.min()) / max(t.max() - t.min(), 1e-12)
    bg = c0[:, None, None] + (c1 - c0)[:, None, None] * t[None]
    noise = ndimage.gaussian_filter(rng.standard_normal((h, w)),
                                    rng.uniform(2.0, 5.0))
    peak = np.abs(noise).max()
    if peak > 0:
        noise *= 0.06 / peak
    return np.clip(bg + noise[None], 0.0, 1.0)[None]


def make_sample(seed: int, kind: str, size) -> CompositeSample:
    """Deterministically build one composited sample.

    The trimap carried by the sample uses the fixed evaluation radius;
    training regenerates trimaps with freshly drawn radii.
    """
    if kind not in _GENERATORS:
        raise ValueError(f"unknown generator kind {kind!r}; "
                         f"expected one of {GENERATOR_KINDS}")
    h, w = int(size[0]), int(size[1])
    if h < 32 or w < 32 or h % 16 or w % 16:
        raise ValueError(f"size must be >= 32 and divisible by 16, got {h}x{w}")
    rng = np.random.default_rng([int(seed), _KIND_CODES[kind], h, w])
    alpha = _GENERATORS[kind](rng, h, w)
    fg = _color_field(rng, h, w)
    bg = _background(rng, h, w)
    image = composite(fg, bg, alpha)
    trimap = make_trimap(alpha, EVAL_TRIMAP_RADIUS)
    attribute = "transparent" if _TRANSPARENT[kind] else "non-transparent"
    return CompositeSample(fg=fg, bg=bg, alpha=alpha, image=image,
                           trimap=trimap, attribute=attribute,
                           kind=kind, seed=int(seed))


# -- trimaps and masks --------------------------------------------------------


def disk_structure(radius: int) -> np.ndarray:
    """Discrete disk {(di,dj) : di^2 + dj^2 <= r^2} as a boolean array."""
    r = int(radius)
    ij = np.arange(-r, r + 1)
    return (ij[:, None] ** 2 + ij[None, :] ** 2) <= r * r


def make_trimap(alpha, dilate_radius: int) -> np.ndarray:
    """Label FG=1 / BG=0 / TR=0.5 from ground-truth alpha.

    The transition region is the fractional-alpha set dilated by a disk
    of the given radius; dilation only ever grows it, so fractional
    pixels are always labeled TR.
    """
    if dilate_radius < 0:
        raise ValueError("dilate_radius must be >= 0")
    alpha = np.asarray(alpha, dtype=np.float64)
    a = alpha.reshape(alpha.shape[-2:])
    base = (a > 0.0) & (a < 1.0)
    if dilate_radius > 0 and base.any():
        tr = ndimage.binary_dilation(base, structure=disk_structure(dilate_radius))
    else:
        tr = base
    out = np.full(a.shape, TR_LABEL)
    out[(a == 1.0) & ~tr] = FG_LABEL
    out[(a == 0.0) & ~tr] = BG_LABEL
    return out[None, None]


def region_mask(trimap, level: int) -> np.ndarray:
    """Binary transition indicator at feature resolution H/2^level.

    A feature cell is marked 1 if any pixel it covers is TR, so
    downsampling never drops a transition pixel.
    """
    if level < 0:
        raise ValueError("level must be >= 0")
    trimap = np.asarray(trimap, dtype=np.float64)
    t = trimap.reshape(trimap.shape[-2:])
    f = 1 << level
    h, w = t.shape
    if h % f or w % f:
        raise ValueError(f"trimap {h}x{w} not divisible by 2^{level}")
    ind = (t == TR_LABEL).astype(np.float64)
    if f > 1:
        ind = ind.reshape(h // f, f, w // f, f).max(axis=(1, 3))
    return ind[None, None]


def scaling_mask(trimap) -> np.ndarray:
    """Per-pixel weight 1/N_region; empty regions leave their pixels absent.

    Each nonempty region must be an exact partition of unity.  N copies of
    the double closest to 1/N can sum one ulp away from 1, so when the
    correctly rounded sum misses, the region's last pixel (row-major)
    absorbs the residual; every other pixel stays exactly 1/N.
    """
    trimap = np.asarray(trimap, dtype=np.float64)
    t = trimap.reshape(trimap.shape[-2:])
    s = np.zeros_like(t)
    for label in (FG_LABEL, BG_LABEL, TR_LABEL):
        m = t == label
        n = int(m.sum())
        if n:
            w = 1.0 / n
            s[m] = w
            total = math.fsum([w] * n)
            if total != 1.0:
                i, j = np.argwhere(m)[-1]
                s[i, j] = w + (1.0 - total)
    return s[None, None]


# -- dataset directory IO -----------------------------------------------------

_SAMPLE_FIELDS = ("fg", "bg", "alpha", "image", "trimap")


def save_dataset(out_dir, samples) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, s in enumerate(samples):
        sid = f"{i:05d}"
        files = {}
        for field in _SAMPLE_FIELDS:
            fname = f"{sid}_{field}.ten"
            tenfile.save_tensor(out / fname, getattr(s, field))
            files[field] = fname
        manifest.append({"id": sid, "seed": s.seed, "kind": s.kind,
                         "attribute": s.attribute, "files": files})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_dataset(in_dir) -> list[CompositeSample]:
    root = Path(in_dir)
    mf = root / "manifest.json"
    if not mf.exists():
        raise FileNotFoundError(f"no manifest.json under {root}")
    manifest = json.loads(mf.read_text())
    samples = []
    for entry in manifest:
        arrays = {f: tenfile.load_tensor(root / entry["files"][f])
                  for f in _SAMPLE_FIELDS}
        samples.append(CompositeSample(attribute=entry["attribute"],
                                       kind=entry["kind"],
                                       seed=int(entry["seed"]),
                                       **arrays))
    return samples


def generate_dataset(out_dir, count: int, size, seed: int) -> list[CompositeSample]:
    """Write ``count`` samples cycling through the generator families."""
    if count < 1:
        raise ValueError("count must be >= 1")
    samples = []
    for i in range(count):
        kind = GENERATOR_KINDS[i % len(GENERATOR_KINDS)]
        samples.append(make_sample(seed * 1_000_000 + i, kind, size))
    save_dataset(out_dir, samples)
    return samples
