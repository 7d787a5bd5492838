"""Order-preserving worker pool for batch surfaces.

Items are processed independently with per-item derived seeds and merged back
in submission order, so results are identical for any worker count — the
determinism contract of the CLI's --threads flag.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

__all__ = ["parallel_map", "derive_seed"]


def parallel_map(fn, items, threads: int = 1) -> list:
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def derive_seed(seed: int, item_id: int) -> int:
    """Per-item RNG seed: base seed XOR item id (spec's derivation rule)."""
    return (int(seed) ^ int(item_id)) & ((1 << 63) - 1)
