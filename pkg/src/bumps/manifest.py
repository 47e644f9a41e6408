"""Run identity and artifact ledger.

A run is identified by a short hash of its configuration, so repeating the
same configuration lands in the same directory and finished stages can be
skipped. Every artifact a stage writes is registered with a content hash;
``verify`` catches missing or silently modified files before a later stage
consumes them.
"""

import hashlib
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone

from .config import RunConfig, canonical_json
from .errors import DataIntegrityError

MANIFEST_NAME = "manifest.json"


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def run_id_for(cfg: RunConfig) -> str:
    full = hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()
    return full[:12]


@dataclass
class RunManifest:
    run_id: str
    config_hash: str
    root: str
    artifacts: dict = field(default_factory=dict)
    created: str = ""
    updated: str = ""

    @staticmethod
    def create(root, cfg: RunConfig) -> "RunManifest":
        now = datetime.now(timezone.utc).isoformat()
        return RunManifest(run_id=run_id_for(cfg),
                           config_hash=canonical_json(cfg),
                           root=str(root), created=now, updated=now)

    def path_of(self, name: str) -> str:
        if name not in self.artifacts:
            raise DataIntegrityError(f"artifact {name!r} not in manifest")
        return os.path.join(self.root, self.artifacts[name]["path"])

    def register(self, name: str, path) -> None:
        """Record ``path`` under ``name``.

        Accepts a path relative to the run root, relative to the working
        directory, or absolute; stored form is always run-relative.
        """
        path = str(path)
        if not os.path.isabs(path) and \
                os.path.exists(os.path.join(self.root, path)):
            rel = path
        elif os.path.exists(path):
            rel = os.path.relpath(os.path.abspath(path),
                                  os.path.abspath(self.root))
        else:
            raise DataIntegrityError(f"cannot register missing file {path}")
        full = os.path.join(self.root, rel)
        self.artifacts[name] = {"path": rel, "sha256": file_sha256(full)}
        self.updated = datetime.now(timezone.utc).isoformat()

    def has(self, name: str) -> bool:
        """True when the artifact is registered and its bytes still match."""
        if name not in self.artifacts:
            return False
        entry = self.artifacts[name]
        full = os.path.join(self.root, entry["path"])
        return os.path.exists(full) and file_sha256(full) == entry["sha256"]

    def verify(self, names=None) -> None:
        """Raise unless every named artifact exists with its recorded hash."""
        for name in (self.artifacts if names is None else names):
            if name not in self.artifacts:
                raise DataIntegrityError(f"artifact {name!r} not in manifest")
            entry = self.artifacts[name]
            full = os.path.join(self.root, entry["path"])
            if not os.path.exists(full):
                raise DataIntegrityError(f"artifact {name!r} missing: {full}")
            actual = file_sha256(full)
            if actual != entry["sha256"]:
                raise DataIntegrityError(
                    f"artifact {name!r} modified: {full} has sha256 {actual}, "
                    f"manifest records {entry['sha256']}")

    def save(self) -> None:
        payload = {"run_id": self.run_id, "config_hash": self.config_hash,
                   "artifacts": self.artifacts, "created": self.created,
                   "updated": self.updated}
        path = os.path.join(self.root, MANIFEST_NAME)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(root) -> "RunManifest":
        path = os.path.join(str(root), MANIFEST_NAME)
        try:
            with open(path) as fh:
                payload = json.load(fh)
        except FileNotFoundError:
            raise DataIntegrityError(f"no manifest at {path}")
        except json.JSONDecodeError as exc:
            raise DataIntegrityError(f"corrupt manifest {path}: {exc}")
        missing = {"run_id", "config_hash", "artifacts"} - set(payload)
        if missing:
            raise DataIntegrityError(
                f"manifest {path} lacks fields {sorted(missing)}")
        return RunManifest(run_id=payload["run_id"],
                           config_hash=payload["config_hash"],
                           root=str(root), artifacts=payload["artifacts"],
                           created=payload.get("created", ""),
                           updated=payload.get("updated", ""))


def open_run(output_dir, cfg: RunConfig) -> RunManifest:
    """Create or resume the run directory for this configuration.

    Raises when an existing manifest under the same run id was produced by
    a different configuration string (a hash prefix collision or a manual
    edit); silently resuming would mix artifacts from two experiments.
    """
    run_id = run_id_for(cfg)
    root = os.path.join(str(output_dir), run_id)
    os.makedirs(root, exist_ok=True)
    if os.path.exists(os.path.join(root, MANIFEST_NAME)):
        manifest = RunManifest.load(root)
        if manifest.config_hash != canonical_json(cfg):
            raise DataIntegrityError(
                f"run directory {root} belongs to a different configuration")
        return manifest
    manifest = RunManifest.create(root, cfg)
    manifest.save()
    return manifest
