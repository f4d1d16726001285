"""Checkpoint ledger and the bounded-parallel item runner shared by every stage.

Each stage plans a list of item ids up front. Finished items persist their
result as one JSON file (written atomically) and are marked ``Done`` in the
ledger; items whose backend calls ran out of retries are ``Pending``; items
that raised anything else are ``Failed``. Resuming re-executes only the items
that are not ``Done``.
"""
from __future__ import annotations

import json
import logging
import re
import shutil
import time
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Callable, Sequence

from ..backends.base import Exhausted
from ..jsonio import dumps, read_json, write_json

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class ItemStatus(str, Enum):
    DONE = "Done"
    PENDING = "Pending"
    FAILED = "Failed"


class RefusedResume(RuntimeError):
    pass


@dataclass
class Checkpoint:
    path: Path
    config_hash: str
    stages: dict[str, dict[str, ItemStatus]] = field(default_factory=dict)
    errors: dict[str, dict[str, str]] = field(default_factory=dict)
    manifests: dict[str, str] = field(default_factory=dict)
    save_interval: float = 0.2
    _last_save: float = field(default=0.0, repr=False)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        data = read_json(path)
        if data.get("version") != CHECKPOINT_VERSION:
            raise RefusedResume(f"{path}: unsupported checkpoint version {data.get('version')!r}")
        return cls(
            path=path,
            config_hash=data["config_hash"],
            stages={s: {k: ItemStatus(v) for k, v in items.items()} for s, items in data["stages"].items()},
            errors={s: dict(e) for s, e in data.get("errors", {}).items()},
            manifests=dict(data.get("manifests", {})),
        )

    @classmethod
    def open(cls, path: str | Path, config_hash: str, resume: bool) -> "Checkpoint":
        path = Path(path)
        if resume:
            if not path.exists():
                raise RefusedResume(f"no checkpoint at {path}")
            ckpt = cls.load(path)
            if ckpt.config_hash != config_hash:
                raise RefusedResume(
                    f"configuration changed since the checkpoint was written "
                    f"({ckpt.config_hash[:12]} != {config_hash[:12]})"
                )
            return ckpt
        if path.exists():
            try:
                ckpt = cls.load(path)
            except (RefusedResume, ValueError, KeyError):
                return cls(path, config_hash)
            if ckpt.config_hash != config_hash:
                # ledgers written under another configuration must not leak into this run
                return cls(path, config_hash)
            return ckpt
        return cls(path, config_hash)

    def to_dict(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "config_hash": self.config_hash,
            "stages": {s: {k: v.value for k, v in items.items()} for s, items in sorted(self.stages.items())},
            "errors": {s: dict(sorted(e.items())) for s, e in sorted(self.errors.items()) if e},
            "manifests": dict(sorted(self.manifests.items())),
        }

    def save(self, force: bool = True) -> None:
        now = time.monotonic()
        if not force and now - self._last_save < self.save_interval:
            return
        write_json(self.path, self.to_dict(), indent=1)
        self._last_save = now

    def stage_complete(self, stage: str) -> bool:
        items = self.stages.get(stage)
        return items is not None and all(v == ItemStatus.DONE for v in items.values())

    def reset_stage(self, stage: str) -> None:
        self.stages.pop(stage, None)
        self.errors.pop(stage, None)
        self.manifests.pop(stage, None)


def _safe_name(item_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", item_id)


@dataclass
class StageResult:
    stage: str
    order: list[str]
    results: dict[str, Any]
    statuses: dict[str, ItemStatus]
    errors: dict[str, str]

    @property
    def complete(self) -> bool:
        return all(s == ItemStatus.DONE for s in self.statuses.values())

    def done_in_order(self) -> list[tuple[str, Any]]:
        return [(i, self.results[i]) for i in self.order if i in self.results]

    @property
    def unfinished(self) -> list[str]:
        return [i for i in self.order if self.statuses[i] != ItemStatus.DONE]


def run_stage_items(
    checkpoint: Checkpoint,
    stage: str,
    items: Sequence[tuple[str, Any]],
    worker: Callable[[str, Any], Any],
    work_dir: Path,
    workers: int = 8,
    fresh: bool = False,
) -> StageResult:
    """Run ``worker(item_id, payload)`` over the items not yet ``Done``.

    Results must be JSON-serialisable. They are written under
    ``work_dir/items`` and reloaded for ``Done`` items on resume, so the stage's
    final output never depends on which run produced an item.
    """
    item_dir = Path(work_dir) / "items"
    order = [i for i, _ in items]
    position = {i: n for n, i in enumerate(order)}
    if len(position) != len(order):
        raise ValueError(f"stage {stage}: duplicate item ids in plan")
    if fresh:
        checkpoint.reset_stage(stage)
        shutil.rmtree(item_dir, ignore_errors=True)
    item_dir.mkdir(parents=True, exist_ok=True)

    previous = checkpoint.stages.get(stage, {})
    ledger = {i: previous.get(i, ItemStatus.PENDING) for i in order}
    checkpoint.stages[stage] = ledger
    errors = checkpoint.errors.setdefault(stage, {})
    for stale in set(errors) - set(order):
        errors.pop(stale)

    results: dict[str, Any] = {}
    todo = []
    for item_id, payload in items:
        path = item_dir / f"{_safe_name(item_id)}.json"
        if ledger[item_id] == ItemStatus.DONE and path.exists():
            results[item_id] = read_json(path)
        else:
            ledger[item_id] = ItemStatus.PENDING
            todo.append((item_id, payload, path))
    checkpoint.save()
    if todo:
        log.info("stage %s: %d of %d items to run", stage, len(todo), len(order))

    def _run(item_id: str, payload: Any, path: Path) -> Any:
        # normalise through JSON so fresh and resumed results are indistinguishable
        result = json.loads(dumps(worker(item_id, payload)))
        write_json(path, result)
        return result

    pool = ThreadPoolExecutor(max_workers=max(1, workers))
    futures: dict[Future, str] = {}
    try:
        for item_id, payload, path in todo:
            futures[pool.submit(_run, item_id, payload, path)] = item_id
        remaining = set(futures)
        while remaining:
            done, remaining = wait(remaining, return_when=FIRST_COMPLETED)
            for fut in sorted(done, key=lambda f: position[futures[f]]):
                item_id = futures[fut]
                exc = fut.exception()
                if exc is None:
                    results[item_id] = fut.result()
                    ledger[item_id] = ItemStatus.DONE
                    errors.pop(item_id, None)
                elif isinstance(exc, Exhausted):
                    ledger[item_id] = ItemStatus.PENDING
                    errors[item_id] = str(exc)
                    log.warning("stage %s item %s pending: %s", stage, item_id, exc)
                elif isinstance(exc, Exception):
                    ledger[item_id] = ItemStatus.FAILED
                    errors[item_id] = f"{type(exc).__name__}: {exc}"
                    log.warning("stage %s item %s failed: %s", stage, item_id, errors[item_id])
                else:
                    raise exc
            checkpoint.save(force=False)
    finally:
        pool.shutdown(wait=True, cancel_futures=True)
        checkpoint.save()
    return StageResult(stage, order, results, dict(ledger), dict(errors))
