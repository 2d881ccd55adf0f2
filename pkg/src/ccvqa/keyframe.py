"""Key-frame selection by colour-histogram clustering.

Each frame is summarised by a normalised 8x8x8 RGB histogram. Frames are
clustered with seeded k-means++ under the L1 metric and the member nearest
each centroid is kept as that cluster's key frame.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ContractError, IngestionError

HIST_SIZE = _kernels.HIST_BINS**3
IMAGE_SUFFIXES = (".ppm", ".png")


@dataclass
class Frame:
    rgb: np.ndarray  # (H, W, 3) float64 in [0, 1]
    index: int = 0

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]


@dataclass
class FrameHistogram:
    bins: np.ndarray
    frame_index: int = 0


@dataclass
class KeyframeSelection:
    indices: list[int] = field(default_factory=list)
    # L1 distance from each key frame's histogram to its cluster centroid
    scores: list[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# image I/O
# ---------------------------------------------------------------------------


def _ppm_tokens(raw: bytes, count: int):
    tokens = []
    pos = 2
    while len(tokens) < count:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while raw[pos : pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(int(raw[start:pos]))
    return tokens, pos


def read_ppm(path) -> np.ndarray:
    """Read a P3 or P6 PPM file as (H, W, 3) floats in [0, 1]."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic == b"P6":
        (w, h, maxval), pos = _ppm_tokens(raw, 3)
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        body = raw[pos + 1 :]
        pixels = np.frombuffer(body, dtype=dtype, count=w * h * 3)
    elif magic == b"P3":
        (w, h, maxval), pos = _ppm_tokens(raw, 3)
        pixels = np.array(raw[pos:].split()[: w * h * 3], dtype=np.int64)
    else:
        raise ValueError(f"not a PPM file: {path}")
    if pixels.size != w * h * 3:
        raise ValueError(f"truncated PPM payload: {path}")
    return pixels.reshape(h, w, 3).astype(np.float64) / maxval


def write_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    h, w, _ = rgb.shape
    data = np.clip(np.rint(rgb * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    from PIL import Image  # optional dependency, PNG only

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_image(path, rgb: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, rgb)
        return
    from PIL import Image

    data = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data, "RGB").save(path)


_NUMERIC = re.compile(r"^\d+$")


def load_frames(directory) -> list[Frame]:
    """Load numerically named PPM/PNG files from ``directory`` in numeric order."""
    directory = Path(directory)
    if not directory.is_dir():
        raise IngestionError(f"frame directory not found: {directory}")
    files = [
        f
        for f in directory.iterdir()
        if f.suffix.lower() in IMAGE_SUFFIXES and _NUMERIC.match(f.stem)
    ]
    files.sort(key=lambda f: int(f.stem))
    frames = []
    shape = None
    for f in files:
        try:
            rgb = read_image(f)
        except Exception as exc:
            raise IngestionError(f"cannot read frame {f}: {exc}") from exc
        if shape is None:
            shape = rgb.shape
        elif rgb.shape != shape:
            raise IngestionError(f"frame {f} has size {rgb.shape[:2]}, expected {shape[:2]}")
        frames.append(Frame(rgb=rgb, index=int(f.stem)))
    return frames


def resize_rgb(rgb: np.ndarray, size: int) -> np.ndarray:
    """Resize to ``size``x``size``: block averaging when the factor is integral, else nearest."""
    h, w, _ = rgb.shape
    if h == size and w == size:
        return rgb
    if h % size == 0 and w % size == 0:
        fh, fw = h // size, w // size
        return rgb.reshape(size, fh, size, fw, 3).mean(axis=(1, 3))
    rows = np.minimum((np.arange(size) + 0.5) * h / size, h - 1).astype(np.int64)
    cols = np.minimum((np.arange(size) + 0.5) * w / size, w - 1).astype(np.int64)
    return rgb[rows][:, cols]


# ---------------------------------------------------------------------------
# histograms
# ---------------------------------------------------------------------------


def rgb_histogram(frame: Frame) -> FrameHistogram:
    pixels = np.asarray(frame.rgb, dtype=np.float64).reshape(-1, 3)
    if pixels.shape[0] == 0:
        raise ContractError("cannot histogram a frame with no pixels")
    return FrameHistogram(bins=_kernels.rgb_histogram(pixels), frame_index=frame.index)


def histogram_distance(a: FrameHistogram, b: FrameHistogram) -> float:
    return float(np.abs(a.bins - b.bins).sum())


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------


def _kmeanspp(hists, dist, k, rng):
    n = hists.shape[0]
    centers = [int(rng.integers(n))]
    for _ in range(1, k):
        dmin = dist[:, centers].min(axis=1)
        weights = dmin * dmin
        total = weights.sum()
        if total <= 0.0:
            free = [i for i in range(n) if i not in centers]
            centers.append(free[0])
        else:
            centers.append(int(rng.choice(n, p=weights / total)))
    return hists[centers].copy()


def select_keyframes(frames: list[Frame], k: int, seed: int = 0, max_iter: int = 100) -> KeyframeSelection:
    """Pick ``k`` key frames; returns every frame when ``k`` >= the frame count."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    frames = sorted(frames, key=lambda f: f.index)
    n = len(frames)
    if n == 0:
        return KeyframeSelection()
    if k >= n:
        return KeyframeSelection([f.index for f in frames], [0.0] * n)

    hists = np.stack([rgb_histogram(f).bins for f in frames])
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(hists, _kernels.l1_cdist(hists, hists), k, rng)

    assign = None
    for _ in range(max_iter):
        d = _kernels.l1_cdist(hists, centroids)
        new_assign = d.argmin(axis=1)
        updated = centroids.copy()
        for c in range(k):
            members = new_assign == c
            if members.any():
                updated[c] = hists[members].mean(axis=0)
        converged = assign is not None and np.array_equal(new_assign, assign) and np.array_equal(updated, centroids)
        assign, centroids = new_assign, updated
        if converged:
            break

    d = _kernels.l1_cdist(hists, centroids)
    chosen: dict[int, tuple[int, float]] = {}
    for c in range(k):
        members = np.flatnonzero(assign == c)
        if members.size:
            best = members[np.argmin(d[members, c])]
            chosen[c] = (int(best), float(d[best, c]))
    taken = {pos for pos, _ in chosen.values()}
    for c in range(k):
        if c in chosen:
            continue
        # empty cluster: take the free frame worst served by its own centroid
        own = d[np.arange(n), assign]
        order = sorted((i for i in range(n) if i not in taken), key=lambda i: (-own[i], i))
        chosen[c] = (order[0], float(d[order[0], c]))
        taken.add(order[0])

    picked = sorted(chosen.values())
    return KeyframeSelection(
        indices=[frames[pos].index for pos, _ in picked],
        scores=[score for _, score in picked],
    )
