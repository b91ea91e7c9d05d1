"""Run manifests: config snapshot, input/output digests, versions, seed.

A manifest is written next to each command's primary output.  It carries no
timestamps, so reruns with identical inputs and seeds produce byte-equal
manifests as well as byte-equal artifacts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import __version__
from ._util import atomic_write_bytes, sha256_file

__all__ = ["RunManifest", "write_manifest"]


@dataclass
class RunManifest:
    command: str
    master_seed: int | None
    config: dict = field(default_factory=dict)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__

    def add_input(self, name: str, path: str) -> None:
        self.inputs[name] = {"path": path, "sha256": sha256_file(path)}

    def add_output(self, name: str, path: str) -> None:
        self.outputs[name] = {"path": path, "sha256": sha256_file(path)}

    def to_json(self) -> str:
        payload = {
            "command": self.command,
            "version": self.version,
            "master_seed": self.master_seed,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": self.outputs,
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def write_manifest(path: str, manifest: RunManifest) -> None:
    atomic_write_bytes(path, manifest.to_json().encode("utf-8"))
