"""Dynamic mask tiling and the convolutional mask tokenizer.

A mask is cut into ``tile x tile`` sub-masks (plus one downsampled global
view). Each sub-mask goes through four 3x3 stride-2 convolutions with ReLU
(1->16->32->64->128 channels), is average-pooled onto ``token_len`` spatial
cells, and each cell is projected by a two-layer MLP to width ``dim``. Token
blocks are concatenated in tile order, giving ``n_tiles * token_len`` rows.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, MalformedInputError, WeightsFormatError
from .masks import BinaryMask, resize_nearest

CONV_WIDTHS = (1, 16, 32, 64, 128)
TOKEN_LENGTHS = (4, 8, 16)
WEIGHTS_FORMAT = "ureca-mask-encoder"
TOKENS_FORMAT = "ureca-mask-tokens"


@dataclass(frozen=True)
class SplitConfig:
    tile: int = 448
    max_tiles: int = 12
    pad_value: int = 0
    global_tile: bool = True

    def __post_init__(self):
        if self.tile < 16:
            raise ConfigError(f"split.tile must be >= 16, got {self.tile}")
        if self.max_tiles < 1:
            raise ConfigError(f"split.max_tiles must be >= 1, got {self.max_tiles}")
        if self.pad_value not in (0, 1):
            raise ConfigError(f"split.pad_value must be 0 or 1, got {self.pad_value}")


@dataclass(frozen=True)
class SubMaskGrid:
    tiles: tuple[BinaryMask, ...]
    rows: int
    cols: int
    orig_w: int
    orig_h: int
    work_w: int  # size after any pre-resize
    work_h: int
    tile: int
    has_global: bool

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)

    @property
    def resized(self) -> bool:
        return (self.work_w, self.work_h) != (self.orig_w, self.orig_h)

    @property
    def grid_tiles(self) -> tuple[BinaryMask, ...]:
        return self.tiles[: self.rows * self.cols]


def fit_size(w: int, h: int, tile: int, max_tiles: int) -> tuple[int, int]:
    """Largest aspect-preserving size whose tile grid has at most ``max_tiles`` cells."""
    best = 0.0
    for r in range(1, max_tiles + 1):
        c = max_tiles // r
        best = max(best, min(r * tile / h, c * tile / w))
    scale = min(best, 1.0)
    return max(1, math.floor(w * scale)), max(1, math.floor(h * scale))


def split_mask(mask: BinaryMask, cfg: SplitConfig | None = None) -> SubMaskGrid:
    cfg = cfg or SplitConfig()
    t = cfg.tile
    work = mask
    rows, cols = math.ceil(mask.height / t), math.ceil(mask.width / t)
    if rows * cols > cfg.max_tiles:
        w, h = fit_size(mask.width, mask.height, t, cfg.max_tiles)
        work = resize_nearest(mask, w, h)
        rows, cols = math.ceil(h / t), math.ceil(w / t)
        assert rows * cols <= cfg.max_tiles
    canvas = np.full((rows * t, cols * t), bool(cfg.pad_value))
    canvas[: work.height, : work.width] = work.bits
    tiles = [
        BinaryMask(canvas[r * t : (r + 1) * t, c * t : (c + 1) * t])
        for r in range(rows)
        for c in range(cols)
    ]
    if cfg.global_tile:
        tiles.append(resize_nearest(mask, t, t))
    return SubMaskGrid(tuple(tiles), rows, cols, mask.width, mask.height, work.width, work.height, t, cfg.global_tile)


def reassemble(grid: SubMaskGrid, crop: bool = True) -> BinaryMask:
    """Stitch the grid tiles back together (global tile ignored)."""
    t = grid.tile
    canvas = np.zeros((grid.rows * t, grid.cols * t), dtype=bool)
    for k, tile in enumerate(grid.grid_tiles):
        r, c = divmod(k, grid.cols)
        canvas[r * t : (r + 1) * t, c * t : (c + 1) * t] = tile.bits
    if crop:
        canvas = canvas[: grid.work_h, : grid.work_w]
    return BinaryMask(canvas)


def pool_grid(token_len: int) -> tuple[int, int]:
    """(rows, cols) of pooling cells, as square as the factorisation allows."""
    gh = max(d for d in range(1, math.isqrt(token_len) + 1) if token_len % d == 0)
    return gh, token_len // gh


def tensor_shapes(dim: int, token_len: int) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    for i in range(len(CONV_WIDTHS) - 1):
        cin, cout = CONV_WIDTHS[i], CONV_WIDTHS[i + 1]
        shapes.append((f"conv{i}.weight", (cout, cin, 3, 3)))
        shapes.append((f"conv{i}.bias", (cout,)))
    c = CONV_WIDTHS[-1]
    shapes += [
        ("proj1.weight", (dim, c)),
        ("proj1.bias", (dim,)),
        ("proj2.weight", (dim, dim)),
        ("proj2.bias", (dim,)),
    ]
    return shapes


@dataclass
class EncoderWeights:
    tensors: dict[str, np.ndarray]
    dim: int
    token_len: int = 8

    def __post_init__(self):
        self.tensors = {k: np.asarray(v, dtype=np.float32) for k, v in self.tensors.items()}
        self.validate()

    def validate(self) -> None:
        if self.dim < 1:
            raise WeightsFormatError(f"embedding width must be >= 1, got {self.dim}")
        if self.token_len < 1:
            raise WeightsFormatError(f"token length must be >= 1, got {self.token_len}")
        expected = tensor_shapes(self.dim, self.token_len)
        names = {n for n, _ in expected}
        extra = set(self.tensors) - names
        if extra:
            raise WeightsFormatError(f"unexpected tensors: {sorted(extra)}")
        for name, shape in expected:
            if name not in self.tensors:
                raise WeightsFormatError(f"missing tensor {name}")
            got = self.tensors[name].shape
            if got != shape:
                raise WeightsFormatError(f"{name} has shape {got}, expected {shape}")
            if not np.isfinite(self.tensors[name]).all():
                raise WeightsFormatError(f"{name} contains non-finite values")

    def ordered(self) -> list[tuple[str, np.ndarray]]:
        return [(n, self.tensors[n]) for n, _ in tensor_shapes(self.dim, self.token_len)]


@dataclass(frozen=True)
class MaskTokens:
    tokens: np.ndarray  # (n_tiles * token_len, dim), float32
    n_tiles: int
    token_len: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.tokens.shape

    def block(self, k: int) -> np.ndarray:
        return self.tokens[k * self.token_len : (k + 1) * self.token_len]


def _conv3x3_s2(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x: (C, H, W) -> (O, ceil(H/2), ceil(W/2)), zero padding 1."""
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    patches = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(1, 2))[:, ::2, ::2]
    out = np.tensordot(patches, w, axes=([0, 3, 4], [1, 2, 3]))  # (Ho, Wo, O)
    return out.transpose(2, 0, 1) + b[:, None, None]


def adaptive_avg_pool(x: np.ndarray, gh: int, gw: int) -> np.ndarray:
    """x: (C, H, W) -> (gh * gw, C), cells in row-major order."""
    _, H, W = x.shape
    cells = []
    for i in range(gh):
        r0, r1 = (i * H) // gh, -((-(i + 1) * H) // gh)
        for j in range(gw):
            c0, c1 = (j * W) // gw, -((-(j + 1) * W) // gw)
            cells.append(x[:, r0:r1, c0:c1].mean(axis=(1, 2)))
    return np.stack(cells)


def encode_tile(tile: BinaryMask, w: EncoderWeights) -> np.ndarray:
    x = tile.bits.astype(np.float64)[None]
    for i in range(len(CONV_WIDTHS) - 1):
        x = _conv3x3_s2(x, w.tensors[f"conv{i}.weight"].astype(np.float64), w.tensors[f"conv{i}.bias"].astype(np.float64))
        np.maximum(x, 0.0, out=x)
    cells = adaptive_avg_pool(x, *pool_grid(w.token_len))
    t = w.tensors
    h = cells @ t["proj1.weight"].astype(np.float64).T + t["proj1.bias"]
    np.maximum(h, 0.0, out=h)
    return h @ t["proj2.weight"].astype(np.float64).T + t["proj2.bias"]


def encode(grid: SubMaskGrid, w: EncoderWeights) -> MaskTokens:
    w.validate()
    size = grid.tile
    if size % 16:
        raise MalformedInputError(f"tile size {size} is not divisible by 16")
    for k, tile in enumerate(grid.tiles):
        if tile.shape != (size, size):
            raise MalformedInputError(f"tile {k} is {tile.width}x{tile.height}, expected {size}x{size}")
    blocks = [encode_tile(tile, w) for tile in grid.tiles]
    tokens = np.concatenate(blocks).astype(np.float32)
    return MaskTokens(tokens, len(grid.tiles), w.token_len)


def encode_mask(mask: BinaryMask, w: EncoderWeights, cfg: SplitConfig | None = None) -> MaskTokens:
    return encode(split_mask(mask, cfg), w)


# --- deterministic initialisation -------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of splitmix64 started from state ``seed``."""
    k = np.arange(1, n + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed % 2**64) + k * _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def uniform_from_bits(z: np.ndarray, low: float = -0.05, high: float = 0.05) -> np.ndarray:
    u = (z >> np.uint64(11)).astype(np.float64) * 2.0**-53
    return (low + (high - low) * u).astype(np.float32)


def seeded_weights(seed: int, dim: int, token_len: int = 8) -> EncoderWeights:
    """Weights drawn uniformly from [-0.05, 0.05] by one splitmix64 stream.

    Values fill tensors in file order, each tensor row-major.
    """
    shapes = tensor_shapes(dim, token_len)
    total = sum(math.prod(s) for _, s in shapes)
    values = uniform_from_bits(splitmix64(seed, total))
    tensors, pos = {}, 0
    for name, shape in shapes:
        n = math.prod(shape)
        tensors[name] = values[pos : pos + n].reshape(shape)
        pos += n
    return EncoderWeights(tensors, dim, token_len)


# --- file I/O -----------------------------------------------------------------------
# one JSON header line, then little-endian float32 tensors in header order


def _write_tensor_file(path: Path, header: dict, arrays: list[np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        for a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def _read_tensor_file(path: Path, fmt: str) -> tuple[dict, list[np.ndarray]]:
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise WeightsFormatError(f"{path}: missing header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightsFormatError(f"{path}: bad header ({exc})") from None
    if header.get("format") != fmt:
        raise WeightsFormatError(f"{path}: expected format {fmt!r}, got {header.get('format')!r}")
    entries = header.get("tensors")
    if not isinstance(entries, list) or not all(isinstance(e, list) and len(e) == 2 for e in entries):
        raise WeightsFormatError(f"{path}: header needs a 'tensors' list of [name, shape] pairs")
    body = data[nl + 1 :]
    arrays, pos = [], 0
    for name, shape in entries:
        n = math.prod(shape) * 4
        if pos + n > len(body):
            raise WeightsFormatError(f"{path}: truncated while reading {name}")
        arr = np.frombuffer(body[pos : pos + n], dtype="<f4").reshape(shape).astype(np.float32)
        if not np.isfinite(arr).all():
            raise WeightsFormatError(f"{path}: {name} contains non-finite values")
        arrays.append(arr)
        pos += n
    if pos != len(body):
        raise WeightsFormatError(f"{path}: {len(body) - pos} trailing bytes after last tensor")
    return header, arrays


def save_weights(w: EncoderWeights, path: str | Path) -> None:
    ordered = w.ordered()
    header = {
        "format": WEIGHTS_FORMAT,
        "dim": w.dim,
        "token_len": w.token_len,
        "tensors": [[n, list(a.shape)] for n, a in ordered],
    }
    _write_tensor_file(Path(path), header, [a for _, a in ordered])


def load_weights(path: str | Path) -> EncoderWeights:
    header, arrays = _read_tensor_file(Path(path), WEIGHTS_FORMAT)
    try:
        dim, token_len = int(header["dim"]), int(header["token_len"])
    except (KeyError, TypeError, ValueError):
        raise WeightsFormatError(f"{path}: header lacks dim/token_len") from None
    names = [n for n, _ in header["tensors"]]
    expected = [n for n, _ in tensor_shapes(dim, token_len)]
    if names != expected:
        raise WeightsFormatError(f"{path}: tensor order {names} does not match {expected}")
    return EncoderWeights(dict(zip(names, arrays)), dim, token_len)


def save_tokens(tokens: MaskTokens, path: str | Path) -> None:
    n, d = tokens.tokens.shape
    header = {
        "format": TOKENS_FORMAT,
        "dim": d,
        "token_len": tokens.token_len,
        "n_tiles": tokens.n_tiles,
        "tensors": [["tokens", [n, d]]],
    }
    _write_tensor_file(Path(path), header, [tokens.tokens])


def load_tokens(path: str | Path) -> MaskTokens:
    header, arrays = _read_tensor_file(Path(path), TOKENS_FORMAT)
    return MaskTokens(arrays[0], int(header["n_tiles"]), int(header["token_len"]))
