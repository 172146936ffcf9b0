"""Node-placement fairness rule for the bottom-layer chains.

Honest members reject a proposal to add one of member c's nodes to chain
l unless l is (one of) the chains where c currently holds its smallest
fraction of nodes. Repeated application spreads every member's nodes
evenly, so no member can concentrate enough nodes in one chain to break
its fault bound.

Fractions are exact rationals: the support condition is equality with a
minimum, which must not be exposed to float rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable


class UnknownChainError(KeyError):
    pass


@dataclass
class PlacementTable:
    """Per-(member, chain) node counts plus per-chain totals."""

    chains: list[str] = field(default_factory=list)
    counts: dict[tuple[str, str], int] = field(default_factory=dict)
    totals: dict[str, int] = field(default_factory=dict)

    def add_chain(self, chain: str) -> None:
        if chain not in self.totals:
            self.chains.append(chain)
            self.totals[chain] = 0

    def add_node(self, member: str, chain: str) -> None:
        self.add_chain(chain)
        self.counts[(member, chain)] = self.counts.get((member, chain), 0) + 1
        self.totals[chain] += 1

    def remove_node(self, member: str, chain: str) -> None:
        key = (member, chain)
        if self.counts.get(key, 0) <= 0:
            raise ValueError(f"no node of {member} on {chain} to remove")
        self.counts[key] -= 1
        self.totals[chain] -= 1


def build_table(nodes: Iterable[tuple[str, str]], chains: Iterable[str] = ()) -> PlacementTable:
    """Build a table from (owner member, chain) pairs; ``chains`` may list
    chains that currently have no nodes."""
    table = PlacementTable()
    for chain in chains:
        table.add_chain(chain)
    for member, chain in nodes:
        table.add_node(member, chain)
    return table


def fraction(table: PlacementTable, member: str, chain: str) -> Fraction:
    """Exact fraction of chain's nodes controlled by member.

    An empty chain counts as 0, which makes new chains the preferred
    insertion target.
    """
    if chain not in table.totals:
        raise UnknownChainError(chain)
    total = table.totals[chain]
    if total == 0:
        return Fraction(0)
    return Fraction(table.counts.get((member, chain), 0), total)


def evaluate(table: PlacementTable, proposer: str, target: str) -> bool:
    """True (recommend support) iff the target chain minimizes the
    proposer's representation fraction; ties count as minimal."""
    target_fraction = fraction(table, proposer, target)
    minimum = min(fraction(table, proposer, chain) for chain in table.chains)
    return target_fraction == minimum
