"""Control flow graphs shared by the IR and machine levels.

A Cfg is a plain node/edge structure over block labels. Payloads that the
analyses need (block cost, loop depth) are attached as side tables rather
than baked into the nodes, so one graph can be re-annotated per query.
"""

from __future__ import annotations

from dataclasses import dataclass, field


@dataclass
class Cfg:
    entry: str
    nodes: list[str] = field(default_factory=list)
    edges: list[tuple[str, str]] = field(default_factory=list)

    def successors(self, node: str) -> list[str]:
        return [d for (s, d) in self.edges if s == node]

    def predecessors(self, node: str) -> list[str]:
        return [s for (s, d) in self.edges if d == node]

    def exit_nodes(self) -> list[str]:
        """Nodes with no outgoing edges (return/halt blocks)."""
        sources = {s for (s, _) in self.edges}
        return [n for n in self.nodes if n not in sources]

    def validate(self) -> None:
        known = set(self.nodes)
        if self.entry not in known:
            raise ValueError(f"entry node {self.entry!r} not in graph")
        for s, d in self.edges:
            if s not in known or d not in known:
                raise ValueError(f"edge ({s!r}, {d!r}) references unknown node")
        if self.predecessors(self.entry):
            raise ValueError(f"entry node {self.entry!r} has incoming edges")
