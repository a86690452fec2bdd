"""Bounded per-frame backbone feature cache for sliding-window inference."""
from __future__ import annotations

import threading
from collections import OrderedDict
from typing import Callable

from tfd.backbone import BackboneFeatures


class CacheConfigError(ValueError):
    pass


class FeatureCache:
    """Map frame index -> backbone features, evicting the oldest-inserted frame first.

    With ``capacity >= 2n+1`` and windows visited in frame order, each frame
    is extracted exactly once per pass over a sequence. Entries are only
    published after ``compute`` returns, so readers never see partial results.
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise CacheConfigError(f"cache capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self._entries: OrderedDict[int, BackboneFeatures] = OrderedDict()
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    @classmethod
    def for_radius(cls, n: int, capacity: int | None = None) -> "FeatureCache":
        capacity = 2 * n + 1 if capacity is None else capacity
        if capacity < 2 * n + 1:
            raise CacheConfigError(f"cache capacity {capacity} is smaller than the window size 2n+1 = {2 * n + 1}")
        return cls(capacity)

    @property
    def lookups(self) -> int:
        return self.hits + self.misses

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, index: int) -> bool:
        return index in self._entries

    def get(self, index: int, compute: Callable[[], BackboneFeatures]) -> BackboneFeatures:
        with self._lock:
            found = self._entries.get(index)
            if found is not None:
                self.hits += 1
                return found
            self.misses += 1
        value = compute()
        with self._lock:
            if index not in self._entries:
                while len(self._entries) >= self.capacity:
                    self._entries.popitem(last=False)
                    self.evictions += 1
                self._entries[index] = value
            return self._entries[index]

    def clear(self) -> None:
        with self._lock:
            self._entries.clear()

    def stats(self) -> dict[str, int]:
        return {"lookups": self.lookups, "hits": self.hits, "misses": self.misses, "evictions": self.evictions}
