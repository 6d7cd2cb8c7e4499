"""Per-step episode records and the adversary's restricted view of them."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .cipher import Ciphertext, QPInstance, TransformKey


@dataclass
class StepRecord:
    k: int
    qp: QPInstance
    key: TransformKey
    ciphertext: Ciphertext
    y_star: np.ndarray
    z_star: np.ndarray
    x: np.ndarray
    u: np.ndarray
    y_ref: np.ndarray

    def to_dict(self) -> dict[str, Any]:
        return {
            "k": self.k,
            "qp": self.qp.to_dict(),
            "key": self.key.to_dict(),
            "ciphertext": self.ciphertext.to_dict(),
            "y_star": self.y_star.tolist(),
            "z_star": self.z_star.tolist(),
            "x": self.x.tolist(),
            "u": self.u.tolist(),
            "y_ref": self.y_ref.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> StepRecord:
        return cls(
            k=int(d["k"]),
            qp=QPInstance.from_dict(d["qp"]),
            key=TransformKey.from_dict(d["key"]),
            ciphertext=Ciphertext.from_dict(d["ciphertext"]),
            y_star=np.array(d["y_star"], dtype=float),
            z_star=np.array(d["z_star"], dtype=float),
            x=np.array(d["x"], dtype=float),
            u=np.array(d["u"], dtype=float),
            y_ref=np.array(d["y_ref"], dtype=float),
        )


@dataclass
class AdversaryView:
    """Everything the cloud is allowed to see: ciphertexts and its own answers.

    ``known_permutation`` optionally carries one absolute constraint
    permutation as ``(step, P)``.
    """

    ciphertexts: list[Ciphertext]
    y_stars: list[np.ndarray]
    known_permutation: tuple[int, np.ndarray] | None = None

    @property
    def steps(self) -> list[int]:
        return [c.step for c in self.ciphertexts]


@dataclass
class EpisodeLog:
    records: list[StepRecord]
    config: dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def adversary_view(self, known_permutation_step: int | None = None) -> AdversaryView:
        known = None
        if known_permutation_step is not None:
            P = self.records[known_permutation_step].key.P
            if P is not None:
                known = (known_permutation_step, P.copy())
        return AdversaryView(
            ciphertexts=[rec.ciphertext for rec in self.records],
            y_stars=[rec.y_star for rec in self.records],
            known_permutation=known,
        )

    def to_dict(self) -> dict[str, Any]:
        return {"config": self.config, "records": [r.to_dict() for r in self.records]}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> EpisodeLog:
        return cls([StepRecord.from_dict(r) for r in d["records"]], dict(d.get("config", {})))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> EpisodeLog:
        return cls.from_dict(json.loads(Path(path).read_text()))
