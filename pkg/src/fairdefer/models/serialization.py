"""Trained-model bundle: parameters plus everything needed to re-run its
deferral rule, serialized as one JSON document.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fairdefer.models.bnn import BnnPosterior, bnn_predict
from fairdefer.models.losses import LossSpec
from fairdefer.models.ordinal import ordinal_decisions, ordinal_outputs
from fairdefer.models.posthoc import ThresholdSet, apply_thresholds
from fairdefer.nn_core import ModelParams, forward, sigmoid

FORMAT = "fairdefer-model"
FORMAT_VERSION = 1
FAMILIES = ("binary", "fair_binary", "reject", "defer", "posthoc", "punt", "fair_punt", "bnn")


@dataclass
class TrainedModel:
    family: str
    seed: int
    params: ModelParams | None = None
    loss: LossSpec | None = None
    thresholds: ThresholdSet | None = None
    bnn: BnnPosterior | None = None
    rho_threshold: float = 0.5
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown model family {self.family!r}")
        if self.family == "bnn":
            if self.bnn is None:
                raise ValueError("bnn family needs a posterior")
        elif self.params is None:
            raise ValueError(f"{self.family} family needs network parameters")
        if self.family == "posthoc" and self.thresholds is None:
            raise ValueError("posthoc family needs a ThresholdSet")

    def outputs(self, features, sensitive=None):
        """``(y_model, gate, s)``: model probability, gate value and binary deferral.

        The gate is pi for gated heads, the IDK mass I for ordinal heads, the
        uncertainty rho for the BNN, and the 0/1 band indicator for post-hoc
        thresholds.
        """
        features = np.atleast_2d(np.asarray(features, dtype=float))
        n = features.shape[0]
        if self.family == "bnn":
            mu, rho = bnn_predict(self.bnn, features, seed=self.seed)
            return mu, rho, (rho > self.rho_threshold).astype(int)
        raw = np.asarray(forward(self.params, features)).reshape(n, -1)
        if self.family in ("reject", "defer"):
            pi = sigmoid(raw[:, 1])
            return sigmoid(raw[:, 0]), pi, (pi > 0.5).astype(int)
        if self.family in ("punt", "fair_punt"):
            t0, t1 = self.params.thresholds
            out = ordinal_outputs(raw[:, 0], t0, t1)
            passed, _ = ordinal_decisions(raw[:, 0], t0, t1)
            return out.p, np.clip(out.I, 0.0, 1.0), passed
        p = sigmoid(raw[:, 0])
        if self.family == "posthoc":
            if sensitive is None:
                raise ValueError("post-hoc thresholds need the sensitive attribute")
            _, sp = apply_thresholds(p, self.thresholds, sensitive)
            return p, sp.gate, sp.gate_sample
        return p, np.zeros(n), np.zeros(n, dtype=int)

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "format_version": FORMAT_VERSION,
            "family": self.family,
            "seed": self.seed,
            "params": None if self.params is None else self.params.to_dict(),
            "loss": None if self.loss is None else self.loss.to_dict(),
            "thresholds": None if self.thresholds is None else self.thresholds.to_dict(),
            "bnn": None if self.bnn is None else self.bnn.to_dict(),
            "rho_threshold": self.rho_threshold,
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainedModel":
        if d.get("format") != FORMAT:
            raise ValueError("not a serialized model document")
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {d.get('format_version')}")
        return cls(
            family=d["family"],
            seed=d["seed"],
            params=None if d["params"] is None else ModelParams.from_dict(d["params"]),
            loss=None if d["loss"] is None else LossSpec.from_dict(d["loss"]),
            thresholds=None if d["thresholds"] is None else ThresholdSet.from_dict(d["thresholds"]),
            bnn=None if d["bnn"] is None else BnnPosterior.from_dict(d["bnn"]),
            rho_threshold=d.get("rho_threshold", 0.5),
            extra=d.get("extra", {}),
        )


def save_model(model: TrainedModel, path, provenance: dict | None = None) -> None:
    doc = model.to_dict()
    if provenance is not None:
        doc["provenance"] = provenance
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_model(path) -> TrainedModel:
    return TrainedModel.from_dict(json.loads(Path(path).read_text()))
