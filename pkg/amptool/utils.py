from __future__ import annotations

import hashlib
import json
import random
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np
import torch


def compute_content_hash(text: str) -> str:
    """Return a stable SHA256 hex digest for the given text.

    Minimal normalization: strip leading/trailing whitespace to avoid trivial
    differences generating distinct hashes.
    """
    normalized = text.strip().encode("utf-8")
    return hashlib.sha256(normalized).hexdigest()


def compute_tensor_hash(tensor: torch.Tensor) -> str:
    """Digest of the exact float32 contents and shape of a tensor."""
    arr = tensor.detach().to("cpu", torch.float32).contiguous().numpy()
    h = hashlib.sha256()
    h.update(repr(tuple(arr.shape)).encode("ascii"))
    h.update(arr.tobytes())
    return h.hexdigest()


def compute_file_hash(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2**32))
    torch.manual_seed(seed)


def read_jsonl(path: str | Path) -> Iterator[dict[str, Any]]:
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                yield json.loads(line)


def write_jsonl(path: str | Path, rows: Iterable[dict[str, Any]]) -> int:
    n = 0
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False) + "\n")
            n += 1
    return n


def slug(text: str) -> str:
    """Filesystem-safe name for ids such as model names."""
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in text)
