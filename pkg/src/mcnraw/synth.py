"""Synthetic paired data: ground-truth scenes, mosaics and short exposures.

Also reads and writes dataset manifests (``input;meta;target;ratio`` lines)
and 8-bit P6 previews.
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import mcnt
from .raw import CFA, RawFrame, load_frame, normalize_black_level, save_frame

RATIOS = (100.0, 250.0, 300.0)
BLACK_LEVEL = 512.0
WHITE_LEVEL = 16383.0
READ_SIGMA = 2e-4
SHOT_GAIN = 2e-5
OPTICS_SIGMA = 1.0


class ManifestError(Exception):
    pass


class MissingFileError(ManifestError, FileNotFoundError):
    pass


class ManifestFormatError(ManifestError, ValueError):
    pass


class RatioError(ManifestError, ValueError):
    pass


def scene_rng(seed: int, *stream) -> np.random.Generator:
    return np.random.default_rng([int(seed), *stream])


def generate_scene(seed: int, size, blur: float = OPTICS_SIGMA) -> np.ndarray:
    """Deterministic (3, H, W) scene in [0, 1].

    A smooth colour gradient, random rectangles and disks, and at least one
    near-saturated highlight spot.
    """
    h, w = (size, size) if np.isscalar(size) else size
    if h % 4 or w % 4:
        raise ValueError(f"scene size must be divisible by 4, got {h}x{w}")
    rng = scene_rng(seed, 0)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    corners = rng.uniform(0.05, 0.6, size=(4, 3))
    img = (corners[0][:, None, None] * (1 - yy) * (1 - xx) + corners[1][:, None, None] * (1 - yy) * xx
           + corners[2][:, None, None] * yy * (1 - xx) + corners[3][:, None, None] * yy * xx)
    for _ in range(rng.integers(2, 6)):
        y0, x0 = rng.integers(0, h), rng.integers(0, w)
        rh, rw = rng.integers(h // 8 + 1, h // 2 + 1), rng.integers(w // 8 + 1, w // 2 + 1)
        img[:, y0:y0 + rh, x0:x0 + rw] = rng.uniform(0.0, 0.8, size=3)[:, None, None]
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        rad = rng.uniform(min(h, w) / 12, min(h, w) / 4)
        mask = (yy * (h - 1) - cy) ** 2 + (xx * (w - 1) - cx) ** 2 <= rad ** 2
        img[:, mask] = rng.uniform(0.0, 0.8, size=3)[:, None]
    for _ in range(rng.integers(1, 3)):
        cy, cx = rng.uniform(h * 0.15, h * 0.85), rng.uniform(w * 0.15, w * 0.85)
        rad = rng.uniform(min(h, w) / 16, min(h, w) / 8) + 1.5
        mask = (yy * (h - 1) - cy) ** 2 + (xx * (w - 1) - cx) ** 2 <= rad ** 2
        img[:, mask] = rng.uniform(0.97, 1.0)
    if blur > 0:
        img = gaussian_filter(img, sigma=(0, blur, blur), mode="nearest")
    return np.clip(img, 0.0, 1.0)


def mosaic(rgb, cfa: CFA | None = None, black_level=BLACK_LEVEL, white_level=WHITE_LEVEL) -> RawFrame:
    """Sample each CFA site's colour; stored in (unquantised) sensor units."""
    cfa = cfa or CFA.bayer()
    rgb = np.asarray(rgb, dtype=np.float64)
    _, h, w = rgb.shape
    if h % cfa.period or w % cfa.period:
        raise ValueError(f"image {h}x{w} not divisible by CFA period {cfa.period}")
    idx = cfa.color_map(h, w)
    x = np.take_along_axis(rgb, idx[None], axis=0)[0]
    return RawFrame(black_level + x * (white_level - black_level), cfa, black_level, white_level, 1.0)


def _expose(signal, frame: RawFrame, ratio, read_sigma, shot_gain, rng) -> RawFrame:
    var = shot_gain * np.clip(signal, 0, None) + read_sigma ** 2
    noisy = signal
    if read_sigma > 0 or shot_gain > 0:
        noisy = signal + np.sqrt(var) * rng.standard_normal(signal.shape)
    span = frame.white_level - frame.black_level
    v = np.rint(frame.black_level + noisy * span)
    v = np.clip(v, frame.black_level, frame.white_level).astype(np.uint16)
    return RawFrame(v, frame.cfa, frame.black_level, frame.white_level, float(ratio))


def simulate_short_exposure(raw: RawFrame, ratio: float, noise_sigma_read: float = READ_SIGMA,
                            rng: np.random.Generator | None = None, shot_gain: float = SHOT_GAIN) -> RawFrame:
    """Divide the signal by ``ratio`` and add shot plus read noise.

    Noise is Gaussian with variance ``shot_gain * s + noise_sigma_read**2`` in
    normalised units, then values are rounded to sensor integers and clamped.
    """
    if ratio < 1:
        raise ValueError(f"ratio must be >= 1, got {ratio}")
    rng = rng or np.random.default_rng(0)
    signal = normalize_black_level(raw).data / ratio
    return _expose(signal, raw, ratio, noise_sigma_read, shot_gain, rng)


def hdr_scene(seed: int, size, ratio: float = 300.0, cfa: CFA | None = None,
              highlight_level: float = 0.9, noise_sigma_read: float = READ_SIGMA,
              shot_gain: float = SHOT_GAIN):
    """Short exposure of a scene whose highlights are far brighter than white.

    Highlight disks land at ``highlight_level`` in the short exposure itself
    (street lamps, the moon), the rest of the scene at scene/ratio. Returns
    (frame, highlight mask at mosaic resolution).
    """
    cfa = cfa or CFA.bayer()
    rgb = generate_scene(seed, size)
    base = mosaic(rgb, cfa)
    signal = normalize_black_level(base).data / ratio
    # disks are drawn on the packed-cell grid so every cell is wholly in or out
    f = cfa.factor
    h, w = signal.shape[0] // f, signal.shape[1] // f
    cells = np.zeros((h, w), dtype=bool)
    rng = scene_rng(seed, 7)
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    for _ in range(2):
        cy, cx = rng.uniform(h * 0.2, h * 0.8), rng.uniform(w * 0.2, w * 0.8)
        rad = min(h, w) / 10
        cells |= (yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2
    mask = np.repeat(np.repeat(cells, f, axis=0), f, axis=1)
    signal = np.where(mask, highlight_level, signal)
    frame = _expose(signal, base, ratio, noise_sigma_read, shot_gain, scene_rng(seed, 8))
    return frame, mask


@dataclass
class ScenePair:
    ground_truth: np.ndarray
    raw_short: RawFrame
    scene_id: str
    seed: int


def make_pair(seed: int, size: int, ratio: float | None = None, cfa: CFA | None = None,
              noise_sigma_read: float = READ_SIGMA, shot_gain: float = SHOT_GAIN) -> ScenePair:
    cfa = cfa or CFA.bayer()
    rng = scene_rng(seed, 1)
    if ratio is None:
        ratio = float(rng.choice(RATIOS))
    gt = generate_scene(seed, size)
    short = simulate_short_exposure(mosaic(gt, cfa), ratio, noise_sigma_read, scene_rng(seed, 2), shot_gain)
    return ScenePair(gt.astype(np.float32), short, f"scene{seed:05d}", seed)


# -- manifests -----------------------------------------------------------------

@dataclass
class ManifestEntry:
    input_path: str
    meta_path: str
    target_path: str
    ratio: float

    @property
    def image_id(self) -> str:
        return Path(self.input_path).stem


def load_dataset(manifest_path) -> list:
    """Parse and validate a manifest; relative paths resolve against its directory."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise MissingFileError(f"missing file: {manifest_path}")
    base = manifest_path.parent
    entries = []
    with open(manifest_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = [f.strip() for f in line.split(";")]
            if len(fields) != 4 or not all(fields):
                raise ManifestFormatError(f"{manifest_path}:{lineno}: expected 'input;meta;target;ratio'")
            try:
                ratio = float(fields[3])
            except ValueError:
                raise ManifestFormatError(f"{manifest_path}:{lineno}: bad ratio {fields[3]!r}") from None
            if not ratio >= 1:
                raise RatioError(f"{manifest_path}:{lineno}: ratio {ratio} < 1")
            paths = [str(base / f) if not os.path.isabs(f) else f for f in fields[:3]]
            for p in paths:
                if not os.path.isfile(p):
                    raise MissingFileError(f"missing file: {p}")
            entries.append(ManifestEntry(*paths, ratio))
    return entries


def load_entry(entry: ManifestEntry):
    """(RawFrame, target (3, H, W) float32) with the manifest ratio applied."""
    frame = load_frame(entry.input_path, entry.meta_path)
    frame.exposure_ratio = entry.ratio
    target = mcnt.load(entry.target_path).astype(np.float32)
    if target.ndim == 4:
        target = target[0]
    if target.shape[1:] != frame.shape:
        raise ManifestFormatError(
            f"{entry.target_path}: target {target.shape} does not match raw {frame.shape}")
    return frame, target


def generate_dataset(out_dir, count: int, size: int, seed: int = 0, cfa: CFA | None = None,
                     noise_sigma_read: float = READ_SIGMA, shot_gain: float = SHOT_GAIN,
                     previews: bool = False) -> Path:
    """Write ``count`` pairs plus ``manifest.txt``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i in range(count):
        pair = make_pair(int(np.random.SeedSequence([seed, i]).generate_state(1)[0]), size, None, cfa,
                         noise_sigma_read, shot_gain)
        stem = f"pair{i:04d}"
        save_frame(out / f"{stem}_short.mcnt", out / f"{stem}_short.meta", pair.raw_short)
        mcnt.save(out / f"{stem}_gt.mcnt", pair.ground_truth)
        if previews:
            write_ppm(out / f"{stem}_gt.ppm", pair.ground_truth)
        lines.append(f"{stem}_short.mcnt;{stem}_short.meta;{stem}_gt.mcnt;{pair.raw_short.exposure_ratio:g}")
    manifest = out / "manifest.txt"
    manifest.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return manifest


def write_ppm(path, rgb, gamma: float = 1 / 2.2):
    """8-bit binary P6 preview of a (3, H, W) linear image."""
    a = np.asarray(rgb, dtype=np.float64)
    if a.ndim == 4:
        a = a[0]
    a = np.clip(a, 0, 1) ** gamma
    px = np.rint(a * 255).astype(np.uint8).transpose(1, 2, 0)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii"))
        fh.write(px.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise mcnt.FormatError(f"{path}: not a P6 file")
    w, h = int(parts[1]), int(parts[2])
    px = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return px.transpose(2, 0, 1)
