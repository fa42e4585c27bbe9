"""JSON checkpoints for fitted absorption models."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .absorption import model_from_payload

FORMAT_VERSION = 1


@dataclass
class ModelCheckpoint:
    family: str
    payload: dict
    setting: str = "exact-exact"
    training: dict = field(default_factory=dict)
    dataset_fingerprint: str = ""
    format_version: int = FORMAT_VERSION

    @classmethod
    def from_model(cls, model, setting="exact-exact", training=None, dataset_fingerprint=""):
        return cls(model.family, model.to_payload(), setting, dict(training or {}), dataset_fingerprint)

    def model(self):
        return model_from_payload(self.family, self.payload)

    def dumps(self):
        doc = {
            "format_version": self.format_version,
            "family": self.family,
            "setting": self.setting,
            "dataset_fingerprint": self.dataset_fingerprint,
            "training": self.training,
            "parameters": self.payload,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text):
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format_version {doc.get('format_version')}")
        return cls(
            family=doc["family"],
            payload=doc["parameters"],
            setting=doc.get("setting", "exact-exact"),
            training=doc.get("training", {}),
            dataset_fingerprint=doc.get("dataset_fingerprint", ""),
        )

    def save(self, path):
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path):
        return cls.loads(Path(path).read_text())
