"""Experiment manifest: stage outputs with content hashes and lineage."""

from __future__ import annotations

from pathlib import Path

from .. import __version__
from .io import ArtifactError, read_json, sha256_file, write_json

MANIFEST_NAME = "manifest.json"


class Manifest:
    def __init__(self, root, data: dict):
        self.root = Path(root)
        self.data = data

    @classmethod
    def open(cls, root, config_path: str, config_sha: str, seed: int) -> "Manifest":
        root = Path(root)
        path = root / MANIFEST_NAME
        if path.exists():
            data = read_json(path)
            if data.get("config", {}).get("sha256") != config_sha or data.get("seed") != seed:
                # a different experiment: previous stage records no longer apply
                data = None
        else:
            data = None
        if data is None:
            data = {"tool": "racegp", "version": __version__, "seed": seed,
                    "config": {"path": config_path, "sha256": config_sha},
                    "track_seeds": {}, "stages": {}}
        return cls(root, data)

    @property
    def path(self) -> Path:
        return self.root / MANIFEST_NAME

    def save(self):
        write_json(self.path, self.data)

    def record(self, stage: str, outputs: dict, parents: list | None = None, extra: dict | None = None):
        entry = {"outputs": {}, "parents": sorted(parents or [])}
        for name, p in outputs.items():
            p = Path(p)
            entry["outputs"][name] = {"path": p.relative_to(self.root).as_posix(), "sha256": sha256_file(p)}
        if extra:
            entry.update(extra)
        self.data["stages"][stage] = entry
        self.save()

    def artifact(self, stage: str, name: str) -> Path:
        """Path of a recorded output after checking that it exists and is unmodified."""
        entry = self.data["stages"].get(stage)
        if entry is None or name not in entry["outputs"]:
            raise ArtifactError(f"missing artifact {stage}:{name}; run the '{stage.split(':')[0]}' stage first")
        rec = entry["outputs"][name]
        p = self.root / rec["path"]
        if not p.is_file():
            raise ArtifactError(f"missing artifact {stage}:{name} ({p})")
        if sha256_file(p) != rec["sha256"]:
            raise ArtifactError(f"artifact {stage}:{name} ({p}) was modified after it was recorded")
        return p

    def verify(self) -> list[str]:
        """Names of every recorded output whose file is missing or modified."""
        bad = []
        for stage, entry in self.data["stages"].items():
            for name in entry["outputs"]:
                try:
                    self.artifact(stage, name)
                except ArtifactError:
                    bad.append(f"{stage}:{name}")
        return bad
