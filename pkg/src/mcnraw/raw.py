"""Sensor mosaics: black-level normalisation, nonlinear gain and CFA packing.

The order applied by :func:`prepare_input` is normalise, amplify on the
full-resolution mosaic, then pack.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import mcnt
from .tensor import DimensionError, Tensor

BAYER_PATTERNS = {"RGGB", "BGGR", "GRBG", "GBRG"}

# Fujifilm X-Trans layout (X-T2 family), row-major.
XTRANS_DEFAULT = (
    "GBGGRG",
    "RGRBGB",
    "GBGGRG",
    "GRGGBG",
    "BGBRGR",
    "GRGGBG",
)

_COLOR_RANK = {"R": 0, "G": 1, "B": 2}


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class CFA:
    """Colour filter array: a ``period x period`` grid of 'R'/'G'/'B'."""

    pattern: tuple

    @classmethod
    def bayer(cls, layout: str = "RGGB") -> "CFA":
        layout = layout.upper()
        if layout not in BAYER_PATTERNS:
            raise ParameterError(f"unknown Bayer layout {layout!r}")
        return cls((layout[:2], layout[2:]))

    @classmethod
    def xtrans(cls, rows=XTRANS_DEFAULT) -> "CFA":
        rows = tuple(r.upper() for r in rows)
        if len(rows) != 6 or any(len(r) != 6 for r in rows):
            raise ParameterError("X-Trans pattern must be 6x6")
        return cls(rows)

    @property
    def period(self) -> int:
        return len(self.pattern)

    @property
    def kind(self) -> str:
        return "bayer" if self.period == 2 else "xtrans"

    @property
    def channels(self) -> int:
        return 4 if self.kind == "bayer" else 9

    @property
    def factor(self) -> int:
        """Spatial downscale produced by packing."""
        return 2 if self.kind == "bayer" else 3

    def color_at(self, y: int, x: int) -> str:
        return self.pattern[y % self.period][x % self.period]

    def color_map(self, h: int, w: int) -> np.ndarray:
        """(h, w) array of colour indices 0=R, 1=G, 2=B."""
        tile = np.array([[_COLOR_RANK[c] for c in row] for row in self.pattern])
        return np.tile(tile, (h // self.period, w // self.period))

    def describe(self) -> str:
        return "".join(self.pattern) if self.kind == "bayer" else "XTRANS"

    def __post_init__(self):
        p = len(self.pattern)
        if p not in (2, 6) or any(len(r) != p for r in self.pattern):
            raise ParameterError(f"CFA must be 2x2 or 6x6, got {self.pattern}")
        if any(c not in _COLOR_RANK for r in self.pattern for c in r):
            raise ParameterError(f"CFA entries must be R, G or B: {self.pattern}")


@dataclass
class RawFrame:
    data: np.ndarray
    cfa: CFA = field(default_factory=CFA.bayer)
    black_level: float = 512.0
    white_level: float = 16383.0
    exposure_ratio: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 2:
            raise DimensionError(f"RawFrame data must be 2-D, got shape {self.data.shape}")
        if not self.black_level < self.white_level:
            raise ParameterError("black_level must be below white_level")
        p = self.cfa.period
        h, w = self.data.shape
        if h % p or w % p:
            raise DimensionError(f"RawFrame {h}x{w} not divisible by CFA period {p}")
        if self.exposure_ratio < 1:
            raise ParameterError(f"exposure_ratio must be >= 1, got {self.exposure_ratio}")

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class IlluminationParams:
    """Parameters of the nonlinear raw gain.

    ``r`` and ``alpha`` shape the illumination curve, ``beta`` is its lower
    bound and ``ratio`` the exposure amplification.
    """

    r: float = 1.0
    alpha: float = 1e-6
    beta: float = 1.0
    ratio: float = 300.0

    def __post_init__(self):
        if not self.r > 0:
            raise ParameterError(f"r must be > 0, got {self.r}")
        if not 0 < self.alpha < 1:
            raise ParameterError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.ratio >= 1:
            raise ParameterError(f"ratio must be >= 1, got {self.ratio}")
        # allow one ulp of slack for beta given as a rounded 1/ratio
        lo = 1.0 / self.ratio
        if not (lo * (1 - 1e-12) <= self.beta <= 1.0):
            raise ParameterError(f"beta must lie in [1/ratio, 1] = [{lo:.6g}, 1], got {self.beta}")

    @classmethod
    def for_inference(cls, ratio: float, r: float = 1.0, alpha: float = 1e-6):
        return cls(r=r, alpha=alpha, beta=1.0 / ratio, ratio=ratio)


def _values(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def normalize_black_level(frame: RawFrame) -> Tensor:
    """(v - black) / (white - black), clamped to [0, 1]."""
    v = frame.data.astype(np.float64)
    out = (v - frame.black_level) / (frame.white_level - frame.black_level)
    return Tensor(np.clip(out, 0.0, 1.0))


def illumination_map(x, r: float = 1.0, alpha: float = 1e-6) -> np.ndarray:
    """exp(-r x) * log(x + alpha) / log(alpha); equals 1 at x = 0."""
    x = np.asarray(_values(x), dtype=np.float64)
    return np.exp(-r * x) * np.log(x + alpha) / np.log(alpha)


def rimef_gain(x, params: IlluminationParams) -> Tensor:
    """Per-pixel gain max(m_f(x), beta) * ratio."""
    xs = np.asarray(_values(x), dtype=np.float64)
    if xs.size and (xs.min() < 0 or xs.max() > 1):
        raise ParameterError("rimef_gain expects inputs in [0, 1]")
    mf = illumination_map(xs, params.r, params.alpha)
    return Tensor(np.maximum(mf, params.beta) * params.ratio)


def amplify(x, gain) -> Tensor:
    xv, gv = _values(x), _values(gain)
    if xv.shape != gv.shape:
        raise DimensionError(f"amplify: shape mismatch {xv.shape} vs {gv.shape}")
    return Tensor(np.clip(xv * gv, 0.0, 1.0))


# -- packing -----------------------------------------------------------------

def _bayer_sites(cfa: CFA):
    """(dy, dx) per output channel in (R, G1, G2, B) order."""
    sites = [(y, x) for y in range(2) for x in range(2)]
    greens = [s for s in sites if cfa.color_at(*s) == "G"]
    red = [s for s in sites if cfa.color_at(*s) == "R"]
    blue = [s for s in sites if cfa.color_at(*s) == "B"]
    if len(greens) != 2 or len(red) != 1 or len(blue) != 1:
        raise ParameterError(f"not a Bayer layout: {cfa.pattern}")
    return [red[0], greens[0], greens[1], blue[0]]


def pack_bayer(x, cfa: CFA | None = None) -> Tensor:
    """(H, W) mosaic -> (1, 4, H/2, W/2), channels (R, G1, G2, B)."""
    cfa = cfa or CFA.bayer()
    a = _values(x)
    if a.ndim != 2:
        raise DimensionError(f"pack_bayer expects a 2-D mosaic, got {a.shape}")
    h, w = a.shape
    if h % 2 or w % 2:
        raise DimensionError(f"pack_bayer needs even dimensions, got {h}x{w}")
    planes = [a[dy::2, dx::2] for dy, dx in _bayer_sites(cfa)]
    return Tensor(np.stack(planes)[None])


def unpack_bayer(packed, cfa: CFA | None = None) -> Tensor:
    cfa = cfa or CFA.bayer()
    a = _values(packed)
    if a.ndim != 4 or a.shape[:2] != (1, 4):
        raise DimensionError(f"unpack_bayer expects shape (1, 4, h, w), got {a.shape}")
    _, _, h, w = a.shape
    out = np.empty((2 * h, 2 * w), dtype=a.dtype)
    for ch, (dy, dx) in enumerate(_bayer_sites(cfa)):
        out[dy::2, dx::2] = a[0, ch]
    return Tensor(out)


def xtrans_table(cfa: CFA | None = None) -> np.ndarray:
    """Site table for X-Trans packing.

    Each 6x6 period splits into four 3x3 half-tiles; each half-tile becomes
    one output pixel. ``table[ty, tx, ch] = (dy, dx)`` is the site inside
    half-tile (ty, tx) that feeds channel ``ch``. Sites are ordered by colour
    (R, G, B) and then row-major, so every channel carries one colour.
    """
    cfa = cfa or CFA.xtrans()
    if cfa.kind != "xtrans":
        raise ParameterError("xtrans_table needs a 6x6 pattern")
    table = np.zeros((2, 2, 9, 2), dtype=np.int64)
    signature = None
    for ty in range(2):
        for tx in range(2):
            sites = [(dy, dx) for dy in range(3) for dx in range(3)]
            sites.sort(key=lambda s: (_COLOR_RANK[cfa.color_at(3 * ty + s[0], 3 * tx + s[1])], s))
            colors = [cfa.color_at(3 * ty + dy, 3 * tx + dx) for dy, dx in sites]
            if signature is None:
                signature = colors
            elif colors != signature:
                raise ParameterError("X-Trans half-tiles must share the same colour counts")
            table[ty, tx] = sites
    return table


def xtrans_channel_colors(cfa: CFA | None = None) -> list:
    cfa = cfa or CFA.xtrans()
    return [cfa.color_at(dy, dx) for dy, dx in xtrans_table(cfa)[0, 0]]


def pack_xtrans(x, cfa: CFA | None = None) -> Tensor:
    """(H, W) mosaic -> (1, 9, H/3, W/3) via :func:`xtrans_table`."""
    cfa = cfa or CFA.xtrans()
    a = _values(x)
    if a.ndim != 2:
        raise DimensionError(f"pack_xtrans expects a 2-D mosaic, got {a.shape}")
    h, w = a.shape
    if h % 6 or w % 6:
        raise DimensionError(f"pack_xtrans needs dimensions divisible by 6, got {h}x{w}")
    table = xtrans_table(cfa)
    out = np.empty((1, 9, h // 3, w // 3), dtype=a.dtype)
    for ty in range(2):
        for tx in range(2):
            for ch, (dy, dx) in enumerate(table[ty, tx]):
                out[0, ch, ty::2, tx::2] = a[3 * ty + dy::6, 3 * tx + dx::6]
    return Tensor(out)


def unpack_xtrans(packed, cfa: CFA | None = None) -> Tensor:
    cfa = cfa or CFA.xtrans()
    a = _values(packed)
    if a.ndim != 4 or a.shape[:2] != (1, 9):
        raise DimensionError(f"unpack_xtrans expects shape (1, 9, h, w), got {a.shape}")
    _, _, h, w = a.shape
    if h % 2 or w % 2:
        raise DimensionError("unpack_xtrans needs even packed dimensions")
    table = xtrans_table(cfa)
    out = np.empty((3 * h, 3 * w), dtype=a.dtype)
    for ty in range(2):
        for tx in range(2):
            for ch, (dy, dx) in enumerate(table[ty, tx]):
                out[3 * ty + dy::6, 3 * tx + dx::6] = a[0, ch, ty::2, tx::2]
    return Tensor(out)


def pack(x, cfa: CFA) -> Tensor:
    return pack_bayer(x, cfa) if cfa.kind == "bayer" else pack_xtrans(x, cfa)


def unpack(packed, cfa: CFA) -> Tensor:
    return unpack_bayer(packed, cfa) if cfa.kind == "bayer" else unpack_xtrans(packed, cfa)


def channel_colors(cfa: CFA) -> list:
    if cfa.kind == "bayer":
        return [cfa.color_at(*s) for s in _bayer_sites(cfa)]
    return xtrans_channel_colors(cfa)


def prepare_input(frame: RawFrame, params: IlluminationParams | None = None) -> Tensor:
    """Normalise, amplify and pack a frame into a network input."""
    if params is None:
        params = IlluminationParams(beta=1.0, ratio=frame.exposure_ratio)
    x = normalize_black_level(frame)
    amplified = amplify(x, rimef_gain(x, params))
    return pack(amplified, frame.cfa)


def naive_render(packed, cfa: CFA) -> np.ndarray:
    """Packed raw -> (3, H, W) by averaging same-colour channels, nearest upsampling."""
    a = _values(packed)[0]
    colors = channel_colors(cfa)
    f = cfa.factor
    planes = []
    for c in "RGB":
        sel = [i for i, col in enumerate(colors) if col == c]
        planes.append(a[sel].mean(axis=0))
    rgb = np.stack(planes)
    return np.repeat(np.repeat(rgb, f, axis=1), f, axis=2)


# -- on-disk frames ------------------------------------------------------------

def write_meta(path, frame: RawFrame):
    lines = [
        f"cfa = {frame.cfa.describe()}",
        f"black_level = {frame.black_level!r}",
        f"white_level = {frame.white_level!r}",
        f"exposure_ratio = {frame.exposure_ratio!r}",
    ]
    if frame.cfa.kind == "xtrans":
        lines.append(f"pattern = {'/'.join(frame.cfa.pattern)}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_meta(path) -> dict:
    meta = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise mcnt.FormatError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            meta[key] = value
    return meta


def save_frame(data_path, meta_path, frame: RawFrame):
    mcnt.save(data_path, frame.data.astype(np.uint16))
    write_meta(meta_path, frame)


def load_frame(data_path, meta_path) -> RawFrame:
    data = mcnt.load(data_path)
    meta = read_meta(meta_path)
    try:
        cfa_name = meta.get("cfa", "RGGB").upper()
        if cfa_name == "XTRANS":
            rows = meta.get("pattern")
            cfa = CFA.xtrans(rows.split("/")) if rows else CFA.xtrans()
        else:
            cfa = CFA.bayer(cfa_name)
        return RawFrame(
            data=data,
            cfa=cfa,
            black_level=float(meta.get("black_level", 512)),
            white_level=float(meta.get("white_level", 16383)),
            exposure_ratio=float(meta.get("exposure_ratio", 1)),
        )
    except (KeyError, ValueError) as exc:
        if isinstance(exc, (ParameterError, DimensionError)):
            raise
        raise mcnt.FormatError(f"{meta_path}: {exc}") from exc
