"""Policy parametrizations and continuous maps between parameter spaces.

A :class:`ParamMap` acts on *difference* coordinates: it sends
``u = theta - theta*`` to ``w = omega - omega*``.  Rate functions pushed
through a map live on the ``w`` side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .errors import DomainError
from .mdp import softmax_batch


def softmax_policy(theta: np.ndarray) -> np.ndarray:
    """Row-wise softmax of an ``(S, A)`` parameter."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise DomainError("theta must be finite")
    return softmax_batch(theta)


def escort_policy(params: np.ndarray, p: float) -> np.ndarray:
    """Escort policy ``|w(s, a)|^p / sum_a' |w(s, a')|^p``.

    Rows are rescaled by their largest magnitude first, which leaves the
    policy unchanged and keeps ``|w|^p`` away from overflow.
    """
    if p < 1:
        raise DomainError(f"escort exponent must be >= 1, got {p}")
    w = np.abs(np.asarray(params, dtype=float))
    scale = w.max(axis=-1, keepdims=True)
    if np.any(scale == 0):
        raise DomainError("escort parametrization needs a nonzero entry in every row")
    powered = (w / scale) ** p
    return powered / powered.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ParamMap:
    """Continuous map on difference coordinates.

    ``inverse`` is set only when the map is a bijection onto its range; the
    ``domain_note`` records any restriction that makes that true.
    """

    name: str
    forward: Callable[[np.ndarray], np.ndarray]
    inverse: Optional[Callable[[np.ndarray], np.ndarray]] = None
    domain_note: str = ""
    in_range: Optional[Callable[[np.ndarray], bool]] = None

    def __call__(self, u):
        return self.forward(np.asarray(u, dtype=float))

    @property
    def invertible(self) -> bool:
        return self.inverse is not None

    def contains(self, w) -> bool:
        """Whether ``w`` lies in the range of ``forward`` (``True`` if unknown)."""
        if self.in_range is None:
            return True
        return bool(self.in_range(np.asarray(w, dtype=float)))

    def then(self, other: "ParamMap") -> "ParamMap":
        """Composition ``other . self``."""
        inverse = None
        if self.inverse is not None and other.inverse is not None:
            first_inv, second_inv = self.inverse, other.inverse
            inverse = lambda w: first_inv(second_inv(w))  # noqa: E731
        first, second = self.forward, other.forward
        # without an inverse only the outer range is checkable (necessary, not sufficient)
        in_range = other.in_range
        if inverse is not None and self.in_range is not None:
            in_range = lambda w: other.contains(w) and self.contains(other.inverse(w))  # noqa: E731
        notes = "; ".join(n for n in (self.domain_note, other.domain_note) if n)
        return ParamMap(f"{other.name}∘{self.name}", lambda u: second(first(u)),
                        inverse, notes, in_range)


def identity_map() -> ParamMap:
    return ParamMap("identity", lambda u: np.array(u, dtype=float), lambda w: np.array(w, dtype=float))


def scale_map(k: float) -> ParamMap:
    k = float(k)
    if k == 0:
        raise DomainError("scale factor must be nonzero")
    return ParamMap(f"scale:{k:g}", lambda u: k * np.asarray(u, dtype=float),
                    lambda w: np.asarray(w, dtype=float) / k)


def _positive(w) -> bool:
    return bool(np.all(np.asarray(w) > 0))


def componentwise_exp_map(p: float) -> ParamMap:
    """``u -> exp(u / p)`` componentwise, inverse ``w -> p log w`` on ``w > 0``."""
    p = float(p)
    if p <= 0:
        raise DomainError(f"exponent scale must be positive, got {p}")

    def inverse(w):
        w = np.asarray(w, dtype=float)
        if np.any(w <= 0):
            raise DomainError("inverse is defined on the positive orthant only")
        return p * np.log(w)

    return ParamMap(f"componentwise-exp:{p:g}", lambda u: np.exp(np.asarray(u, dtype=float) / p),
                    inverse, "range is the open positive orthant", _positive)


def softmax_to_escort_map(p: float) -> ParamMap:
    """Map from softmax to escort parameters with the same policy.

    ``escort_policy(forward(theta), p) == softmax_policy(theta)``; the
    inverse ``w -> p log w`` is the positive branch of ``w -> p log|w|``.
    """
    if p < 1:
        raise DomainError(f"escort exponent must be >= 1, got {p}")
    base = componentwise_exp_map(p)
    return ParamMap(f"escort:{float(p):g}", base.forward, base.inverse,
                    "positive branch of p*log|w|; range is the open positive orthant", _positive)


_BUILTIN = {
    "identity": lambda arg: identity_map(),
    "scale": lambda arg: scale_map(float(arg)),
    "escort": lambda arg: softmax_to_escort_map(float(arg)),
    "componentwise-exp": lambda arg: componentwise_exp_map(float(arg)),
}

_registry: dict[str, Callable[[Optional[str]], ParamMap]] = dict(_BUILTIN)


def register_map(name: str, factory: Callable[[Optional[str]], ParamMap]) -> None:
    """Register a user map; ``factory`` receives the text after ``name:``."""
    if ":" in name:
        raise ValueError("map names may not contain ':'")
    _registry[name] = factory


def map_from_spec(spec: str) -> ParamMap:
    """Build a map from ``"name"`` or ``"name:<arg>"``, e.g. ``"escort:2"``."""
    name, _, arg = spec.partition(":")
    if name not in _registry:
        raise DomainError(f"unknown parameter map {name!r}; known: {sorted(_registry)}")
    if name != "identity" and name in _BUILTIN and not arg:
        raise DomainError(f"map {name!r} needs an argument, e.g. {name}:2")
    try:
        return _registry[name](arg or None)
    except ValueError as exc:
        raise DomainError(f"bad argument for map {spec!r}: {exc}") from None
