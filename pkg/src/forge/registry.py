"""Content-addressed local registry for collaborative model development.

Branch contributors commit plugin modules and distilled datasets; merges
fold the oldest pending contribution into the main branch, guided by the
union of distilled sets seen in prior merge rounds plus the incoming one.

Storage model: artifacts and commits live under ``objects/`` keyed by the
SHA-256 of their bytes, so concurrent writes are idempotent and raw task
data never enters the repository. Timestamps live in queue entries and the
merge log, never inside hashed objects, which keeps replay stable. Merges
serialize on an advisory lock; commits do not.
"""

from __future__ import annotations

import fcntl
import hashlib
import json
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from . import merge as mrg
from .datasets import TaskSpec
from .distill import DistilledDataset
from .errors import (
    ConflictError,
    InputError,
    IntegrityError,
    LockHeldError,
    NothingToMergeError,
    ValidationError,
)
from .evaluation import evaluate_deltas
from .merge import CoeffOptimConfig, ForgeItem, GuidanceSet
from .model import BaseEncoder, LabelEmbeddingTable, PluginModule

REPO_FORMAT_VERSION = 1


def _canonical_json(payload: dict) -> bytes:
    return json.dumps(payload, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class Commit:
    """Hash-chained record; the id never covers timestamps."""

    id: str
    parent: str | None
    author: str
    kind: str  # "genesis" | "contribution" | "merge"
    payload: dict
    timestamp: float | None = None

    @staticmethod
    def compute_id(parent: str | None, author: str, kind: str, payload: dict) -> str:
        body = _canonical_json({"parent": parent, "author": author,
                                "kind": kind, "payload": payload})
        return hashlib.sha256(body).hexdigest()

    def to_bytes(self) -> bytes:
        return _canonical_json({"parent": self.parent, "author": self.author,
                                "kind": self.kind, "payload": self.payload})

    @classmethod
    def from_bytes(cls, buf: bytes, timestamp: float | None = None) -> "Commit":
        doc = json.loads(buf.decode("utf-8"))
        commit_id = cls.compute_id(doc["parent"], doc["author"], doc["kind"], doc["payload"])
        return cls(commit_id, doc["parent"], doc["author"], doc["kind"],
                   doc["payload"], timestamp)


@dataclass
class BranchContribution:
    """What one contributor pushes: task spec, plugin, distilled data."""

    task: TaskSpec
    plugin: PluginModule
    distilled: DistilledDataset
    author: str = "anon"
    training_meta: dict = field(default_factory=dict)


class Repository:
    """On-disk registry rooted at ``root``; open an existing one directly."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        config_path = self.root / "forge.json"
        if not config_path.is_file():
            raise InputError(f"no repository at {self.root}")
        self.config = json.loads(config_path.read_text())
        if self.config.get("format") != REPO_FORMAT_VERSION:
            raise InputError("unsupported repository format")
        self._base: BaseEncoder | None = None

    # -- creation ----------------------------------------------------------

    @classmethod
    def init(cls, path: str | Path, base_seed: int, strategy: str,
             rank: int = 16, alpha: float = 16.0, temperature: float = 0.07,
             coeff: CoeffOptimConfig | None = None,
             extra_config: dict | None = None) -> "Repository":
        path = Path(path)
        if path.exists() and not path.is_dir():
            raise ConflictError(f"{path} exists and is not a directory")
        if path.is_dir() and any(path.iterdir()):
            raise ConflictError(f"{path} already exists and is not empty")
        if strategy not in ("fusion", "mixture"):
            raise InputError(f"unknown strategy {strategy!r}")
        coeff = coeff or CoeffOptimConfig()
        for sub in ("objects", "refs", "log", "queue", "locks"):
            (path / sub).mkdir(parents=True, exist_ok=True)
        config = {
            "format": REPO_FORMAT_VERSION,
            "base_seed": int(base_seed),
            "strategy": strategy,
            "rank": int(rank),
            "alpha": float(alpha),
            "temperature": float(temperature),
            "coeff": {
                "max_iterations": coeff.max_iterations,
                "init_value": coeff.init_value,
                "l1_lambda": coeff.l1_lambda,
                "box_min": coeff.box_min,
                "box_max": coeff.box_max,
                "allow_negative": coeff.allow_negative,
            },
        }
        if extra_config:
            config["run_config"] = extra_config
        (path / "forge.json").write_text(json.dumps(config, indent=2, sort_keys=True))
        repo = cls(path)
        base = repo.base
        genesis_item = ForgeItem.genesis(strategy, base, rank, alpha)
        item_id = repo.store_object(genesis_item.to_bytes())
        genesis_commit = repo._append_commit(None, "registry", "genesis", {
            "base_seed": int(base_seed), "strategy": strategy,
            "base_hash": base.param_hash(), "item_id": item_id,
        })
        repo._write_ref({"item_id": item_id, "round": 0,
                         "genesis": genesis_commit.id, "head": genesis_commit.id})
        return repo

    # -- basics ------------------------------------------------------------

    @property
    def base(self) -> BaseEncoder:
        if self._base is None:
            self._base = BaseEncoder.from_seed(self.config["base_seed"])
        return self._base

    @property
    def strategy(self) -> str:
        return self.config["strategy"]

    def coeff_config(self) -> CoeffOptimConfig:
        c = self.config["coeff"]
        return CoeffOptimConfig(max_iterations=c["max_iterations"],
                                init_value=c["init_value"], l1_lambda=c["l1_lambda"],
                                box_min=c["box_min"], box_max=c["box_max"],
                                allow_negative=c["allow_negative"])

    # -- object store ------------------------------------------------------

    def _object_path(self, object_id: str) -> Path:
        return self.root / "objects" / object_id[:2] / object_id[2:]

    def store_object(self, data: bytes) -> str:
        object_id = hashlib.sha256(data).hexdigest()
        target = self._object_path(object_id)
        if target.exists():
            return object_id
        target.parent.mkdir(parents=True, exist_ok=True)
        tmp = target.parent / f".tmp-{os.getpid()}-{object_id[:12]}"
        tmp.write_bytes(data)
        os.replace(tmp, target)  # atomic; concurrent writers race benignly
        return object_id

    def read_object(self, object_id: str) -> bytes:
        target = self._object_path(object_id)
        if not target.is_file():
            raise IntegrityError(f"missing object {object_id}")
        data = target.read_bytes()
        if hashlib.sha256(data).hexdigest() != object_id:
            raise IntegrityError(f"object {object_id} fails its hash check")
        return data

    def has_object(self, object_id: str) -> bool:
        return self._object_path(object_id).is_file()

    def all_object_ids(self) -> list[str]:
        out = []
        objects = self.root / "objects"
        for shard in sorted(objects.iterdir()) if objects.is_dir() else []:
            if shard.is_dir():
                out.extend(shard.name + p.name for p in sorted(shard.iterdir())
                           if not p.name.startswith(".tmp-"))
        return out

    def load_plugin(self, object_id: str) -> PluginModule:
        return PluginModule.from_bytes(self.read_object(object_id))

    def load_distilled(self, object_id: str) -> DistilledDataset:
        return DistilledDataset.from_bytes(self.read_object(object_id))

    # -- commit chain ------------------------------------------------------

    def _read_ref(self) -> dict:
        ref = self.root / "refs" / "main"
        if not ref.is_file():
            raise IntegrityError("missing main ref")
        return json.loads(ref.read_text())

    def _write_ref(self, doc: dict) -> None:
        ref = self.root / "refs" / "main"
        tmp = ref.parent / ".tmp-main"
        tmp.write_text(json.dumps(doc, sort_keys=True))
        os.replace(tmp, ref)

    def _append_commit(self, parent: str | None, author: str, kind: str,
                       payload: dict) -> Commit:
        commit_id = Commit.compute_id(parent, author, kind, payload)
        commit = Commit(commit_id, parent, author, kind, payload, time.time())
        self.store_object(commit.to_bytes())
        return commit

    def read_commit(self, commit_id: str) -> Commit:
        return Commit.from_bytes(self.read_object(commit_id))

    # -- contributions -----------------------------------------------------

    def _validate_contribution(self, contribution: BranchContribution) -> None:
        task = contribution.task
        if task.num_classes < 2:
            raise ValidationError("task needs at least two classes")
        if len(set(task.labels)) != len(task.labels):
            raise ValidationError("task labels must be distinct")
        base = self.base
        for lid, ad in contribution.plugin.adapters.items():
            if lid < 0 or lid >= len(base.layers):
                raise ValidationError(f"plugin targets missing layer {lid}")
            d, k = base.layer_dims(lid)
            if ad.b.shape != (d, ad.rank) or ad.a.shape != (ad.rank, k):
                raise ValidationError(f"plugin shape mismatch on layer {lid}")
            if self.strategy == "fusion" and ad.rank != self.config["rank"]:
                # parameter fusion needs rank-aligned factors; reject now
                # rather than poisoning the head of the merge queue
                raise ValidationError(
                    f"fusion repository expects rank {self.config['rank']}, "
                    f"got {ad.rank} on layer {lid}")
        distilled = contribution.distilled
        if distilled.task_name != task.name:
            raise ValidationError("distilled set was built for a different task")
        if distilled.num_classes != task.num_classes:
            raise ValidationError("distilled class count does not match the task")
        if distilled.inputs.shape[1] != task.flat_dim:
            raise ValidationError("distilled inputs do not match the task shape")
        if distilled.labels.max(initial=0) >= task.num_classes:
            raise ValidationError("distilled labels out of range")

    def _next_queue_path(self) -> Path:
        queue = self.root / "queue"
        while True:
            existing = [int(p.stem) for p in queue.glob("*.json")]
            seq = max(existing, default=0) + 1
            candidate = queue / f"{seq:06d}.json"
            try:
                fd = os.open(candidate, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                continue
            os.close(fd)
            return candidate

    def commit_contribution(self, contribution: BranchContribution) -> Commit:
        """Store artifacts content-addressed and queue the commit (FIFO).

        Contributions are developed against the repo genesis, not against
        each other, so their parent is the genesis commit; this keeps commit
        ids (and the object store) independent of commit interleaving.
        """
        self._validate_contribution(contribution)
        plugin_id = self.store_object(contribution.plugin.to_bytes())
        distilled_id = self.store_object(contribution.distilled.to_bytes())
        payload = {
            "task": contribution.task.to_dict(),
            "plugin_id": plugin_id,
            "distilled_id": distilled_id,
            "training_meta": contribution.training_meta,
        }
        genesis = self._read_ref()["genesis"]
        commit = self._append_commit(genesis, contribution.author, "contribution", payload)
        entry = self._next_queue_path()
        entry.write_text(json.dumps({"commit_id": commit.id,
                                     "timestamp": commit.timestamp}))
        return commit

    def pending(self) -> list[dict]:
        queue = self.root / "queue"
        out = []
        for path in sorted(queue.glob("*.json")):
            doc = json.loads(path.read_text())
            doc["seq"] = int(path.stem)
            out.append(doc)
        return out

    # -- merging -----------------------------------------------------------

    @contextmanager
    def _main_lock(self):
        lock_path = self.root / "locks" / "main.lock"
        fd = os.open(lock_path, os.O_CREAT | os.O_RDWR)
        try:
            try:
                fcntl.flock(fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError as exc:
                raise LockHeldError(
                    "main branch is locked by another merge; retry shortly") from exc
            yield
        finally:
            fcntl.flock(fd, fcntl.LOCK_UN)
            os.close(fd)

    def merge_records(self) -> list[dict]:
        log = self.root / "log" / "merges.jsonl"
        if not log.is_file():
            return []
        return [json.loads(line) for line in log.read_text().splitlines() if line]

    def _append_merge_record(self, record: dict) -> None:
        log = self.root / "log" / "merges.jsonl"
        with open(log, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def _guidance_from(self, records: list[dict], extra: list[dict]) -> list[GuidanceSet]:
        """Distilled sets of previously merged tasks plus the incoming ones."""
        seen: dict[str, GuidanceSet] = {}
        for doc in [*records, *extra]:
            distilled_id = doc["distilled_id"]
            if distilled_id in seen:
                continue
            distilled = self.load_distilled(distilled_id)
            task = TaskSpec.from_dict(doc["task"])
            table = LabelEmbeddingTable(task.name, task.labels, self.base.embed_dim)
            seen[distilled_id] = (distilled, table)
        return list(seen.values())

    def current_item(self) -> ForgeItem:
        ref = self._read_ref()
        return ForgeItem.from_bytes(self.read_object(ref["item_id"]), self.load_plugin)

    def current_round(self) -> int:
        return int(self._read_ref()["round"])

    def merge_next(self) -> dict:
        """Merge the oldest queued contribution into the main branch."""
        with self._main_lock():
            entries = self.pending()
            if not entries:
                raise NothingToMergeError("contribution queue is empty")
            entry = entries[0]
            commit = self.read_commit(entry["commit_id"])
            payload = commit.payload
            branch = self.load_plugin(payload["plugin_id"])
            records = self.merge_records()
            guidance = self._guidance_from(records, [payload])
            item = self.current_item()
            config = self.coeff_config()
            metrics_pre = self._guidance_metrics(item, guidance)
            if self.strategy == "fusion":
                new_item, outcome = mrg.merge_round_fusion(
                    self.base, item, branch, guidance, config)
            else:
                new_item, outcome = mrg.merge_round_mixture(
                    self.base, item, branch, guidance, config)
            metrics_post = self._guidance_metrics(new_item, guidance)
            item_id = self.store_object(new_item.to_bytes())
            ref = self._read_ref()
            merge_commit = self._append_commit(ref["head"], "registry", "merge", {
                "round": new_item.round,
                "strategy": self.strategy,
                "task": payload["task"],
                "contribution_commit": commit.id,
                "plugin_id": payload["plugin_id"],
                "distilled_id": payload["distilled_id"],
                "w_main": outcome.coefficients.w_main,
                "w_branch": outcome.coefficients.w_branch,
                "objective": outcome.objective_value,
                "item_id": item_id,
            })
            record = {**merge_commit.payload,
                      "commit_id": merge_commit.id,
                      "trace": outcome.trace,
                      "guidance_ids": [g[0].content_id() for g in guidance],
                      "metrics_pre": metrics_pre,
                      "metrics_post": metrics_post,
                      "timestamp": time.time()}
            self._append_merge_record(record)
            self._write_ref({**ref, "item_id": item_id, "round": new_item.round,
                             "head": merge_commit.id})
            (self.root / "queue" / f"{entry['seq']:06d}.json").unlink()
            return record

    def merge_all(self) -> list[dict]:
        out = []
        while self.pending():
            out.append(self.merge_next())
        return out

    def _guidance_metrics(self, item: ForgeItem, guidance: list[GuidanceSet]) -> dict:
        out = {}
        for distilled, table in guidance:
            data_view = _distilled_as_dataset(distilled)
            acc, _ = evaluate_deltas(self.base, item.deltas(), table, data_view,
                                     self.config["temperature"])
            out[distilled.task_name] = round(acc, 6)
        return out

    # -- history -----------------------------------------------------------

    def checkout(self, round_no: int) -> ForgeItem:
        """Rebuild the forge item as of ``round_no`` by replaying the log."""
        records = self.merge_records()
        if round_no < 0 or round_no > len(records):
            raise InputError(f"round {round_no} outside [0, {len(records)}]")
        item = ForgeItem.genesis(self.strategy, self.base,
                                 self.config["rank"], self.config["alpha"])
        for record in records[:round_no]:
            branch = self.load_plugin(record["plugin_id"])
            coeffs = mrg.MergeCoefficients(record["w_main"], record["w_branch"])
            if self.strategy == "fusion":
                fused = mrg.fuse(item.plugin, branch, coeffs)
                item = ForgeItem("fused", item.round + 1, plugin=fused)
            else:
                entries = [(p, c * coeffs.w_main) for p, c in item.entries]
                entries.append((branch, coeffs.w_branch))
                item = ForgeItem("mixture", item.round + 1, entries=entries)
            expect = record["item_id"]
            got = hashlib.sha256(item.to_bytes()).hexdigest()
            if got != expect:
                raise IntegrityError(
                    f"replay of round {item.round} produced {got}, log says {expect}")
        return item

    def replay(self) -> ForgeItem:
        """Replay the full log and check it matches the live main ref."""
        item = self.checkout(self.current_round())
        ref = self._read_ref()
        got = hashlib.sha256(item.to_bytes()).hexdigest()
        if got != ref["item_id"]:
            raise IntegrityError("replayed item does not match the main ref")
        return item

    def verify_objects(self) -> int:
        """Re-hash every stored object; returns the count checked."""
        ids = self.all_object_ids()
        for object_id in ids:
            self.read_object(object_id)
        return len(ids)


def _distilled_as_dataset(distilled: DistilledDataset):
    from .datasets import LabeledDataset

    return LabeledDataset(distilled.inputs, distilled.labels, None, split="guidance")


def init_repo(path: str | Path, base_seed: int, strategy: str, **kwargs) -> Repository:
    return Repository.init(path, base_seed, strategy, **kwargs)
