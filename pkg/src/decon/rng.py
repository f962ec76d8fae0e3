"""Named, independent random substreams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("init", "augment", "dropout", "order")


def _key(stream: str, name: str = "") -> list[int]:
    return [STREAMS.index(stream), zlib.crc32(name.encode())]


def substream(seed: int, stream: str, name: str = "") -> np.random.Generator:
    return np.random.default_rng([int(seed), *_key(stream, name)])


def torch_seed(seed: int, stream: str, name: str = "") -> int:
    ss = np.random.SeedSequence([int(seed), *_key(stream, name)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
