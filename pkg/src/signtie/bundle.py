"""Versioned JSON persistence for everything a recognizer needs.

Floats go through ``json``'s shortest round-trip repr, so a save/load cycle
reproduces every parameter bit for bit.  Infinite log-probabilities are
written as ``-Infinity``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .epenthesis import TransitionModel
from .frames import LAYOUT, NormalizationStats, StreamLayout
from .hmm import SignHMM
from .isolated import StartCodebook, build_subsets
from .lm import BigramLM
from .tying import TiedCodebook, TiedModelSet, untied_model_set

FORMAT = "signtie-model"
VERSION = 1


class BundleError(ValueError):
    """Unreadable, incompatible or incomplete model bundle."""


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ModelBundle:
    """Sign models plus the optional tying, gating, transition and LM stages.

    ``mapping`` holds one ``(n_states, 6)`` pattern-index array per model and
    is present exactly when ``codebook`` is.  ``transitions`` are the shared
    transition models; ``transition_map`` sends a ``(u, v)`` pair to an index
    into them.
    """

    models: tuple[SignHMM, ...]
    layout: StreamLayout = LAYOUT
    norm: NormalizationStats = field(default_factory=NormalizationStats.identity)
    codebook: TiedCodebook | None = None
    mapping: tuple[np.ndarray, ...] | None = None
    start_codebook: StartCodebook | None = None
    transitions: tuple[TransitionModel, ...] = ()
    transition_map: dict = field(default_factory=dict)
    lm: BigramLM | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "models", tuple(self.models))
        if not self.models:
            raise BundleError("a bundle needs at least one sign model")
        if (self.codebook is None) != (self.mapping is None):
            raise BundleError("codebook and mapping must be given together")
        object.__setattr__(self, "transitions", tuple(self.transitions))
        for p, i in self.transition_map.items():
            if not 0 <= i < len(self.transitions):
                raise BundleError(f"transition pair {p} points past the shared models")

    @property
    def signs(self) -> tuple[str, ...]:
        return tuple(m.sign for m in self.models)

    @property
    def is_tied(self) -> bool:
        return self.codebook is not None

    def model_set(self) -> TiedModelSet:
        """Tied model set, or the lossless untied one before tying."""
        if self.codebook is None:
            return untied_model_set(self.models, self.layout)
        return TiedModelSet(self.models, self.codebook, self.mapping)

    def gate_codebook(self) -> StartCodebook:
        return self.start_codebook if self.start_codebook is not None else build_subsets(self.model_set())

    def transition_spec(self):
        """Transition argument for the decoder: ``None`` when no stage is stored."""
        if not self.transitions:
            return None
        return list(self.transitions), dict(self.transition_map)

    def with_tying(self, tms: TiedModelSet) -> "ModelBundle":
        mapping = tuple(np.array(tms.mapping[u, : n]) for u, n in enumerate(tms.n_states))
        return replace(self, codebook=tms.codebook, mapping=mapping, start_codebook=build_subsets(tms))

    # -- serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "layout": self.layout.to_dict(),
            "normalization": self.norm.to_dict(),
            "models": [m.to_dict() for m in self.models],
            "codebook": None if self.codebook is None else self.codebook.to_dict(),
            "mapping": None if self.mapping is None else [m.tolist() for m in self.mapping],
            "start_codebook": None if self.start_codebook is None else self.start_codebook.to_dict(),
            "transitions": [t.to_dict() for t in self.transitions],
            "transition_map": [[a, b, i] for (a, b), i in sorted(self.transition_map.items())],
            "lm": None if self.lm is None else self.lm.to_dict(),
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelBundle":
        if not isinstance(d, dict) or d.get("format") != FORMAT:
            raise BundleError("not a model bundle")
        if d.get("version") != VERSION:
            raise BundleError(f"bundle format version {d.get('version')!r} is not supported "
                              f"(expected {VERSION})")
        try:
            layout = StreamLayout.from_dict(d["layout"])
            return cls(
                models=tuple(SignHMM.from_dict(m) for m in d["models"]),
                layout=layout,
                norm=NormalizationStats.from_dict(d["normalization"]),
                codebook=None if d["codebook"] is None else TiedCodebook.from_dict(d["codebook"], layout),
                mapping=None if d["mapping"] is None else tuple(np.array(m, dtype=np.int64).reshape(-1, len(layout.dims))
                                                               for m in d["mapping"]),
                start_codebook=None if d["start_codebook"] is None else StartCodebook.from_dict(d["start_codebook"]),
                transitions=tuple(TransitionModel.from_dict(t) for t in d["transitions"]),
                transition_map={(a, b): int(i) for a, b, i in d["transition_map"]},
                lm=None if d["lm"] is None else BigramLM.from_dict(d["lm"]),
                provenance=d.get("provenance", {}),
            )
        except (KeyError, TypeError) as exc:
            raise BundleError(f"malformed bundle: {exc}") from exc

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "ModelBundle":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise BundleError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)
