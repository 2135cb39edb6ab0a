"""Incident lifecycle: severity probabilities, triggering, damage and spread."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Iterable, Optional, Sequence

import numpy as np

INCIDENT_TYPES = ("a", "b", "c")
ACTIVE, RESOLVED = "active", "resolved"


@dataclass(frozen=True)
class SeverityModel:
    """Multinomial-logit severity model over levels I, II, III."""

    alpha: tuple[float, float, float]
    beta: tuple[tuple[float, ...], ...]
    x: tuple[tuple[float, ...], ...]

    @property
    def dim(self) -> int:
        return len(self.beta[0])

    def validate(self) -> None:
        if len(self.alpha) != 3 or len(self.beta) != 3 or len(self.x) != 3:
            raise ValueError("severity model needs exactly three levels")
        for b, x in zip(self.beta, self.x):
            if len(b) != len(x) or len(b) < 1:
                raise ValueError("feature vector must match its coefficient dimension")
        vals = list(self.alpha) + [v for r in self.beta for v in r] + [v for r in self.x for v in r]
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("severity parameters must be finite")

    def logits(self) -> np.ndarray:
        return np.array([a + float(np.dot(b, x)) for a, b, x in zip(self.alpha, self.beta, self.x)])


def severity_probabilities(m: SeverityModel) -> np.ndarray:
    z = m.logits()
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite severity logits")
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def should_trigger(probs: Sequence[float]) -> bool:
    return probs[0] <= probs[1] or probs[0] <= probs[2]


def is_resolved(probs: Sequence[float]) -> bool:
    return probs[0] > probs[1] and probs[0] > probs[2]


@dataclass(frozen=True)
class Incident:
    start: int
    node: int
    type: str
    severity: SeverityModel
    probs: tuple[float, float, float]
    status: str = ACTIVE
    damage: float = 0.0
    lam: float = 0.0
    work: int = 0  # agent-ticks of response accumulated toward the next effect application

    @property
    def active(self) -> bool:
        return self.status == ACTIVE


def new_incident(start: int, node: int, type_: str, severity: SeverityModel, lam: float = 0.0) -> Incident:
    if type_ not in INCIDENT_TYPES:
        raise ValueError(f"unknown incident type {type_!r}")
    probs = tuple(float(p) for p in severity_probabilities(severity))
    return Incident(start=start, node=node, type=type_, severity=severity, probs=probs, lam=lam)


def apply_response(inc: Incident, effect) -> Incident:
    """Shift each level's features by ``effect`` (3 x dim) and re-evaluate."""
    if not inc.active:
        raise ValueError("incident already resolved")
    effect = np.asarray(effect, dtype=float)
    x = np.asarray(inc.severity.x, dtype=float)
    if effect.shape != x.shape:
        raise ValueError(f"effect shape {effect.shape} does not match features {x.shape}")
    sev = replace(inc.severity, x=tuple(tuple(float(v) for v in row) for row in x + effect))
    probs = tuple(float(p) for p in severity_probabilities(sev))
    status = RESOLVED if is_resolved(probs) else ACTIVE
    return replace(inc, severity=sev, probs=probs, status=status)


def damage_step(inc: Incident, dt: int) -> Incident:
    """Linear damage accrual f += lambda * dt for active type-c incidents."""
    if dt < 0:
        raise ValueError("dt must be non-negative")
    if inc.type != "c" or not inc.active:
        return inc
    return replace(inc, damage=inc.damage + inc.lam * dt)


def loss_reward(inc: Incident) -> float:
    """grad f * exp(-f); the time rate of f is lambda while active and 0 afterwards."""
    if inc.type != "c" or not inc.active:
        return 0.0
    return inc.lam * math.exp(-inc.damage)


def step_spread(
    g,
    incidents: Iterable[Incident],
    rng: np.random.Generator,
    tick: int,
    p_spread: float,
    severity: SeverityModel,
    lam: float,
    ignited: Optional[set] = None,
) -> list[Incident]:
    """Each active type-c incident ignites each unignited neighbour with prob p_spread.

    ``ignited`` holds nodes that already burned; nodes hosting any active
    incident are skipped too. One uniform draw per (source, candidate) pair
    in node order keeps the random stream reproducible.
    """
    if not 0.0 <= p_spread <= 1.0:
        raise ValueError("p_spread must lie in [0, 1]")
    incidents = list(incidents)
    occupied = {i.node for i in incidents if i.active}
    burned = set(ignited or ()) | {i.node for i in incidents if i.type == "c"}
    new: list[Incident] = []
    for src in sorted((i for i in incidents if i.active and i.type == "c"), key=lambda i: i.node):
        for v, _ in g.neighbors[src.node]:
            if v in occupied or v in burned:
                continue
            if rng.random() < p_spread:
                new.append(new_incident(tick, v, "c", severity, lam))
                occupied.add(v)
                burned.add(v)
    return new
