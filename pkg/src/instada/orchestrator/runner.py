"""Stage dispatch, resume and run reporting."""
from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .. import augment, iagent, tagent
from ..annotations import Dataset, load_dataset
from ..backends.base import Backends
from ..backends.client import HttpBackends
from ..backends.mock import MockBackends, world_from_config
from ..jsonio import read_json, read_jsonl, write_json
from ..seeding import derive_seed
from .checkpoint import Checkpoint, StageResult
from .config import ConfigError, PipelineConfig

log = logging.getLogger(__name__)

STAGES = ("tagent", "iagent", "augment")
COMMAND_STAGES: dict[str, tuple[str, ...]] = {
    "tagent": ("tagent",),
    "iagent": ("iagent",),
    "augment": ("augment",),
    "all": STAGES,
}
MANIFESTS = {
    "tagent": "tagent/manifest.jsonl",
    "iagent": "iagent/manifest.jsonl",
    "augment": "augment/log.jsonl",
}
CHECKPOINT_NAME = "checkpoint.json"

EXIT_OK = 0
EXIT_ITEMS = 1
EXIT_CONFIG = 2


@dataclass
class RunReport:
    exit_code: int = EXIT_OK
    stages: dict[str, StageResult] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)
    messages: list[str] = field(default_factory=list)
    stats: dict | None = None


def make_backends(cfg: PipelineConfig, dataset: Dataset) -> Backends:
    if cfg.mock:
        vocab = [c.name for c in sorted(dataset.categories, key=lambda c: c.id)]
        return MockBackends(world_from_config(vocab, {"seed": cfg.seed, **cfg.mock_world.model_dump()}))
    return HttpBackends({role: cfg.endpoint(role) for role in cfg.endpoints})


def stage_seed(cfg: PipelineConfig, stage: str) -> int:
    return derive_seed(cfg.stage_seed(stage), stage)


def _run_stage(stage: str, cfg: PipelineConfig, dataset: Dataset, backends: Backends, ckpt: Checkpoint, fresh: bool):
    out = cfg.output_path()
    seed = stage_seed(cfg, stage)
    if stage == "tagent":
        return tagent.run_tagent(dataset, backends, cfg.tagent, seed, ckpt, out / "tagent", fresh, cfg.embed_seed), None
    if stage == "iagent":
        return iagent.run_iagent(dataset, backends, cfg.iagent, seed, ckpt, out / "iagent", fresh, cfg.embed_seed), None
    t_rows = read_jsonl(out / MANIFESTS["tagent"])
    i_rows = read_jsonl(out / MANIFESTS["iagent"])
    if not (out / MANIFESTS["tagent"]).exists() and not (out / MANIFESTS["iagent"]).exists():
        log.warning("no generated pools found under %s; pasting original instances only", out)
    return augment.run_augment(dataset, t_rows, out / "tagent", i_rows, out / "iagent", cfg.augment, seed, ckpt, out / "augment", fresh)


def run(
    cfg: PipelineConfig,
    command: str,
    resume: str | Path | None = None,
    allow_partial: bool = False,
    backends: Backends | None = None,
) -> RunReport:
    """Run the stages for ``command``; a stage with unfinished items stops the pipeline unless ``allow_partial``."""
    if command not in COMMAND_STAGES:
        raise ValueError(f"unknown command {command!r}")
    stages = COMMAND_STAGES[command]
    missing = cfg.missing_roles(stages)
    if missing:
        raise ConfigError([f"endpoints.{r}: no endpoint configured (required by {', '.join(stages)})" for r in missing])
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = Path(resume) if resume is not None else out / CHECKPOINT_NAME
    ckpt = Checkpoint.open(ckpt_path, cfg.config_hash(), resume=resume is not None)
    dataset = load_dataset(cfg.dataset)
    backends = backends or make_backends(cfg, dataset)
    report = RunReport()
    for stage in stages:
        manifest = out / MANIFESTS[stage]
        if resume is not None and ckpt.stage_complete(stage) and manifest.exists():
            report.skipped.append(stage)
            continue
        result, extra = _run_stage(stage, cfg, dataset, backends, ckpt, fresh=resume is None)
        report.stages[stage] = result
        if extra is not None:
            write_json(out / stage / "summary.json", extra, indent=1)
        ckpt.manifests[stage] = MANIFESTS[stage]
        ckpt.save()
        if not result.complete:
            failed = result.unfinished
            report.messages.append(
                f"{stage}: {len(failed)} of {len(result.order)} items unfinished ({', '.join(failed[:5])}"
                + (", ..." if len(failed) > 5 else "")
                + ")"
            )
            if not allow_partial:
                report.exit_code = EXIT_ITEMS
                break
    report.stats = compute_stats(out, cfg.iagent.k)
    write_json(out / "stats.json", report.stats, indent=1)
    return report


# --- stats ------------------------------------------------------------------------


def compute_stats(out_dir: str | Path, configured_k: float | None = None) -> dict:
    """Summarise whatever manifests exist under ``out_dir``; missing ones contribute nothing."""
    out = Path(out_dir)
    report: dict[str, Any] = {}

    by_provenance: dict[str, Counter] = defaultdict(Counter)
    for row in read_jsonl(out / MANIFESTS["tagent"]):
        by_provenance[str(row["category_id"])]["tagent"] += 1
    iagent_rows = read_jsonl(out / MANIFESTS["iagent"])
    for row in iagent_rows:
        if row.get("kept"):
            for m in row["masks"]:
                by_provenance[str(m["category_id"])]["iagent"] += 1
    aug_path = out / "augment" / "dataset.json"
    if aug_path.exists():
        for a in read_json(aug_path).get("annotations", []):
            by_provenance[str(a["category_id"])]["augmented:" + a.get("provenance", "original")] += 1
    if by_provenance:
        report["category_counts"] = {c: dict(sorted(v.items())) for c, v in sorted(by_provenance.items(), key=lambda kv: int(kv[0]))}

    lineage = read_jsonl(out / "tagent" / "lineage.jsonl")
    if lineage:
        hist: Counter = Counter()
        for rec in lineage:
            if rec["state"] == "Accepted":
                hist[rec["trace"][-2]] += 1
            else:
                hist[rec["state"]] += 1
        total = sum(hist.values())
        report["rethink_histogram"] = {
            s: {"count": n, "percent": 100.0 * n / total} for s, n in sorted(hist.items())
        }

    if iagent_rows:
        scored = [r for r in iagent_rows if r.get("p_bar") is not None]
        kept = sum(1 for r in iagent_rows if r.get("kept"))
        report["iagent_retention"] = {
            "images": len(iagent_rows),
            "scored_images": len(scored),
            "kept_images": kept,
            "observed_percent": (100.0 * kept / len(scored)) if scored else None,
            "configured_k": configured_k,
        }

    dropped = {}
    scores = read_jsonl(out / "iagent" / "scores.jsonl")
    if scores:
        dropped["iagent_empty_box"] = sum(len(r.get("dropped", [])) for r in scores)
    summary = out / "augment" / "summary.json"
    if summary.exists():
        dropped["augment_occluded"] = read_json(summary).get("dropped_annotations", 0)
    if dropped:
        report["dropped_annotations"] = dropped
    return report
