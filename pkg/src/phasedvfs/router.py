"""Prompt-length routing of requests onto per-class prefill queues."""

from __future__ import annotations

from bisect import bisect_left
from collections import deque
from dataclasses import dataclass, field

from .errors import DoubleDispatch

CLASS_NAMES = ("SM", "L")
SHORT_MEDIUM, LONG = 0, 1


@dataclass(frozen=True)
class RoutingConfig:
    thresholds: tuple[int, ...] = (1024,)
    enabled: bool = True
    # class id -> prefill worker ids serving it
    worker_map: tuple[tuple[int, ...], ...] = ((0,), (1,))

    def __post_init__(self):
        th = tuple(int(t) for t in self.thresholds)
        object.__setattr__(self, "thresholds", th)
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError("thresholds must be strictly ascending")
        wm = tuple(tuple(int(w) for w in ws) for ws in self.worker_map)
        object.__setattr__(self, "worker_map", wm)
        if self.enabled and len(wm) != self.n_classes:
            raise ValueError(f"worker_map needs {self.n_classes} entries, got {len(wm)}")
        if any(not ws for ws in wm):
            raise ValueError("every class needs at least one worker")

    @property
    def n_classes(self) -> int:
        return len(self.thresholds) + 1


def classify(cfg: RoutingConfig, prompt_tokens: int) -> int:
    """Class id = number of thresholds strictly below ``prompt_tokens`` (boundary is inclusive)."""
    if prompt_tokens < 1:
        raise ValueError("prompt_tokens must be >= 1")
    return bisect_left(cfg.thresholds, prompt_tokens)


@dataclass
class ClassQueue:
    class_id: int
    items: deque = field(default_factory=deque)  # (request_id, enqueue_ms)

    def __len__(self):
        return len(self.items)

    def push(self, request_id: int, now: float) -> None:
        self.items.append((request_id, now))

    def pop(self) -> tuple[int, float]:
        return self.items.popleft()

    def ids(self) -> list[int]:
        return [rid for rid, _ in self.items]


class Router:
    """Owns the prefill queues.

    With routing enabled there is one FIFO per class; with routing disabled
    every request lands in a single shared FIFO (queue id 0) served by all
    prefill workers.
    """

    def __init__(self, cfg: RoutingConfig, n_workers: int = 2):
        self.cfg = cfg
        n_queues = cfg.n_classes if cfg.enabled else 1
        self.queues = [ClassQueue(i) for i in range(n_queues)]
        self._seen: set[int] = set()
        if cfg.enabled:
            self.worker_queue = {}
            for cls_id, workers in enumerate(cfg.worker_map):
                for w in workers:
                    if w in self.worker_queue:
                        raise ValueError(f"prefill worker {w} mapped to two classes")
                    if not 0 <= w < n_workers:
                        raise ValueError(f"prefill worker {w} does not exist")
                    self.worker_queue[w] = cls_id
        else:
            self.worker_queue = {w: 0 for w in range(n_workers)}

    def queue_of(self, prompt_tokens: int) -> int:
        return classify(self.cfg, prompt_tokens) if self.cfg.enabled else 0

    def dispatch(self, request_id: int, prompt_tokens: int, now: float) -> int:
        if request_id in self._seen:
            raise DoubleDispatch(f"request {request_id} already dispatched")
        self._seen.add(request_id)
        q = self.queue_of(prompt_tokens)
        self.queues[q].push(request_id, now)
        return q

    def workers_for(self, queue_id: int) -> list[int]:
        return sorted(w for w, q in self.worker_queue.items() if q == queue_id)


def dispatch(router: Router, request, now: float | None = None) -> int:
    """Enqueue ``request`` on its class queue; returns the queue id."""
    return router.dispatch(request.id, request.prompt_tokens, request.arrival_ms if now is None else now)
