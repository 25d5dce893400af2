"""The algorithm zoo, each expressed as masks over update/aggregate plus a
local rule. The decoupling of every method lives in this one table."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class AlgorithmSpec:
    """What a federated algorithm updates locally, what the server
    aggregates, how the local update runs, and which part (if any) stays
    client-resident between rounds."""

    name: str
    update_part: str  # body | head | full
    aggregate_part: str  # body | head | full
    local_rule: str  # joint | sequential_head_then_body | proximal | ditto | perfedavg_fo
    persistent_part: str | None = None  # None | head | body | full
    federated: bool = True  # local-only skips sampling and aggregation
    two_phase_lg: bool = False  # LG-FedAvg starts from a FedAvg-trained model


ALGORITHMS: dict[str, AlgorithmSpec] = {
    "fedavg": AlgorithmSpec("fedavg", "full", "full", "joint"),
    "fedbabu": AlgorithmSpec("fedbabu", "body", "body", "joint"),
    "fedper": AlgorithmSpec("fedper", "full", "body", "joint", persistent_part="head"),
    "lg-fedavg": AlgorithmSpec(
        "lg-fedavg", "full", "head", "joint", persistent_part="body", two_phase_lg=True
    ),
    "fedrep": AlgorithmSpec(
        "fedrep", "full", "body", "sequential_head_then_body", persistent_part="head"
    ),
    "fedprox": AlgorithmSpec("fedprox", "full", "full", "proximal"),
    "fedprox-babu": AlgorithmSpec("fedprox-babu", "body", "body", "proximal"),
    "perfedavg": AlgorithmSpec("perfedavg", "full", "full", "perfedavg_fo"),
    "ditto": AlgorithmSpec("ditto", "full", "full", "ditto", persistent_part="full"),
    "local-only": AlgorithmSpec(
        "local-only", "full", "full", "joint", persistent_part="full", federated=False
    ),
}


def get_algorithm(name: str) -> AlgorithmSpec:
    try:
        return ALGORITHMS[name]
    except KeyError:
        raise ValueError(
            f"unknown algorithm {name!r}; choose from {sorted(ALGORITHMS)}"
        ) from None
