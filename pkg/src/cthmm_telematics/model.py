"""The CTHMM parameter container and its JSON representation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .ctmc import validate_rate_matrix
from .distributions import Emission, from_dict

DEFAULT_DIMS = ("speed", "a_long", "a_lat")


@dataclass
class CTHMM:
    """Initial distribution ``pi``, generator ``Q`` and per-state emissions.

    ``emissions[u][d]`` is the family of dimension ``d`` in state ``u``;
    dimensions are conditionally independent given the state.
    """

    pi: np.ndarray
    Q: np.ndarray
    emissions: list[list[Emission]]
    dims: tuple[str, ...] = DEFAULT_DIMS
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.Q = validate_rate_matrix(self.Q)
        S = len(self.pi)
        if self.Q.shape != (S, S) or len(self.emissions) != S:
            raise ValueError("pi, Q and emissions disagree on the number of states")
        if np.any(self.pi < 0) or abs(self.pi.sum() - 1) > 1e-9:
            raise ValueError("pi must be a probability vector")
        D = len(self.emissions[0])
        if any(len(row) != D for row in self.emissions):
            raise ValueError("every state needs one family per dimension")
        if len(self.dims) != D:
            self.dims = tuple(f"y{d}" for d in range(D))
        self.dims = tuple(self.dims)

    @property
    def n_states(self) -> int:
        return len(self.pi)

    @property
    def n_dims(self) -> int:
        return len(self.emissions[0])

    @property
    def families(self) -> list[str]:
        return [e.tag for e in self.emissions[0]]

    def n_params(self) -> int:
        S = self.n_states
        return (S - 1) + S * (S - 1) + sum(e.n_params for row in self.emissions for e in row)

    def log_emissions(self, y) -> np.ndarray:
        """Joint log density of each observation row under each state, shape (T, S)."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        out = np.zeros((y.shape[0], self.n_states))
        for u, row in enumerate(self.emissions):
            for d, fam in enumerate(row):
                out[:, u] += fam.logpdf(y[:, d])
        return out

    def permuted(self, perm) -> "CTHMM":
        """Relabel states so that new state ``i`` is old state ``perm[i]``."""
        perm = np.asarray(perm)
        return CTHMM(
            self.pi[perm],
            self.Q[np.ix_(perm, perm)],
            [self.emissions[p] for p in perm],
            self.dims,
            dict(self.diagnostics),
        )

    def to_dict(self) -> dict:
        return {
            "S": self.n_states,
            "dims": list(self.dims),
            "pi": [float(x) for x in self.pi],
            "Q": [[float(x) for x in row] for row in self.Q],
            "states": [{"emissions": [e.to_dict() for e in row]} for row in self.emissions],
            "diagnostics": _jsonable(self.diagnostics),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "CTHMM":
        return cls(
            np.array(d["pi"]),
            np.array(d["Q"]),
            [[from_dict(e) for e in s["emissions"]] for s in d["states"]],
            tuple(d.get("dims", DEFAULT_DIMS)),
            d.get("diagnostics", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "CTHMM":
        return cls.from_dict(json.loads(text))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj
