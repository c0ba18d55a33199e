"""Exact shared-vocabulary patch tokenizer.

The synthetic world draws frames and flow images from a finite patch
palette, so instead of a learned quantizer the codebook is literally every
distinct patch_size x patch_size patch seen in the corpus, in first-occurrence
order. Tokenization is an exact byte lookup and therefore lossless on any
image whose patches are corpus-covered; unseen patches fall back to the
nearest entry by summed squared byte distance. Frames and flow images index
the same id space.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, ConfigError, DataError, DecodeError

_MAGIC = b"FVCB"
_FILE_VERSION = 1


@dataclass
class Codebook:
    patch_size: int
    entries: list[bytes]                 # patch_size^2 * 3 bytes each
    max_entries: int = 512
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._index:
            self._index = {e: i for i, e in enumerate(self.entries)}
        # Cached array view of the entries, for detokenize and fallback.
        ps = self.patch_size
        if self.entries:
            self._array = np.frombuffer(
                b"".join(self.entries), dtype=np.uint8
            ).reshape(len(self.entries), ps, ps, 3).copy()
        else:
            self._array = np.zeros((0, ps, ps, 3), dtype=np.uint8)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def content_hash(self) -> str:
        h = hashlib.blake2b(digest_size=8)
        h.update(struct.pack("<II", self.patch_size, len(self.entries)))
        for e in self.entries:
            h.update(e)
        return h.hexdigest()


def _patches(img: np.ndarray, ps: int) -> np.ndarray:
    h, w = img.shape[:2]
    if h % ps or w % ps:
        raise ConfigError(f"image dims {h}x{w} not divisible by patch {ps}")
    gh, gw = h // ps, w // ps
    return (np.asarray(img, dtype=np.uint8)
            .reshape(gh, ps, gw, ps, 3)
            .transpose(0, 2, 1, 3, 4))  # [gh, gw, ps, ps, 3]


def build_codebook(corpus, patch_size: int = 4,
                   max_entries: int = 512) -> Codebook:
    """All distinct patches over the corpus, in first-occurrence order."""
    entries: list[bytes] = []
    index: dict[bytes, int] = {}
    for img in corpus:
        pat = _patches(img, patch_size)
        for row in pat.reshape(-1, patch_size * patch_size * 3):
            key = row.tobytes()
            if key not in index:
                if len(entries) >= max_entries:
                    raise CapacityError(
                        f"corpus needs more than {max_entries} patch entries")
                index[key] = len(entries)
                entries.append(key)
    return Codebook(patch_size=patch_size, entries=entries,
                    max_entries=max_entries, _index=index)


def tokenize(img: np.ndarray, cb: Codebook) -> np.ndarray:
    """Row-major patch scan to an [gh, gw] int32 id grid.

    Exact byte match first; unseen patches map to the entry with minimum
    summed squared byte distance (ties to the lowest index).
    """
    pat = _patches(img, cb.patch_size)
    gh, gw = pat.shape[:2]
    flat = pat.reshape(gh * gw, -1)
    ids = np.empty(gh * gw, dtype=np.int32)
    misses = []
    for i, row in enumerate(flat):
        hit = cb._index.get(row.tobytes())
        if hit is None:
            misses.append(i)
        else:
            ids[i] = hit
    if misses:
        ref = cb._array.reshape(len(cb), -1).astype(np.int64)
        for i in misses:
            d = ((ref - flat[i].astype(np.int64)) ** 2).sum(axis=1)
            ids[i] = int(np.argmin(d))
    return ids.reshape(gh, gw)


def detokenize(grid: np.ndarray, cb: Codebook) -> np.ndarray:
    """Paste entries row-major; exact inverse of tokenize on covered images."""
    grid = np.asarray(grid)
    if grid.size and (grid.min() < 0 or grid.max() >= len(cb)):
        raise DecodeError(
            f"token id out of range [0, {len(cb)}): {int(grid.max())}")
    gh, gw = grid.shape
    ps = cb.patch_size
    out = cb._array[grid.reshape(-1)]            # [gh*gw, ps, ps, 3]
    return (out.reshape(gh, gw, ps, ps, 3)
            .transpose(0, 2, 1, 3, 4)
            .reshape(gh * ps, gw * ps, 3).copy())


def save_codebook(cb: Codebook, path) -> None:
    """codebook.bin: magic, version, patch_size, count, then raw entries."""
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<III", _FILE_VERSION, cb.patch_size, len(cb)))
        for e in cb.entries:
            f.write(e)
    summary = {
        "patch_size": cb.patch_size,
        "entries": len(cb),
        "max_entries": cb.max_entries,
        "content_hash": cb.content_hash,
    }
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")


def load_codebook(path) -> Codebook:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise DataError(f"{path}: not a codebook file")
    version, ps, count = struct.unpack("<III", data[4:16])
    if version != _FILE_VERSION:
        raise DataError(f"{path}: unsupported codebook version {version}")
    entry_len = ps * ps * 3
    body = data[16:]
    if len(body) != count * entry_len:
        raise DataError(f"{path}: truncated codebook")
    entries = [bytes(body[i * entry_len:(i + 1) * entry_len])
               for i in range(count)]
    return Codebook(patch_size=ps, entries=entries)
