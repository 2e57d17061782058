"""Per-segment reorder graph: which consumers retain which channels.

One node per consumer (consumers with identical retained sets are merged:
they are interchangeable for ordering purposes). A node's reward is its
retained-channel count. Two nodes share an undirected edge iff they share
at least one retained channel; the edge reward is minus the shared count.
A node whose retained set strictly contains another's is a *parent*;
parent-child edges are exempt from the acyclicity rule during path search.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

from reslice.graph import ChannelMask, ModelGraph, ValidationError
from reslice.segments import Segment


class UnsupportedTopologyError(RuntimeError):
    """The join structure violates a reduction assumption for the segment."""

    def __init__(self, segment_id: str, reason: str):
        super().__init__(f"segment {segment_id}: {reason}")
        self.segment_id = segment_id
        self.reason = reason


@dataclass(frozen=True)
class ProducerEquivalence:
    """Map from a producer's local output channels to shared-space slots."""

    producer: str
    slots: tuple[int, ...]


@dataclass(frozen=True)
class RGNode:
    """A consumer (or merged group of identical-mask consumers)."""

    id: str  # == members[0]
    members: tuple[str, ...]
    retained: frozenset[int]
    reward: int


@dataclass(frozen=True)
class SubsetRelation:
    parent: str
    children: tuple[str, ...]


@dataclass
class ReorderGraph:
    nodes: dict[str, RGNode]
    edges: dict[tuple[str, str], frozenset[int]]  # key: sorted id pair -> shared
    parents: dict[str, tuple[str, ...]]  # parent node -> children (strict subsets)
    exempt: frozenset[tuple[str, str]]  # parent-child pairs, sorted
    channel_space: int

    @staticmethod
    def _key(u: str, v: str) -> tuple[str, str]:
        return (u, v) if u <= v else (v, u)

    def shared(self, u: str, v: str) -> frozenset[int]:
        return self.edges.get(self._key(u, v), frozenset())

    def edge_reward(self, u: str, v: str) -> int:
        return -len(self.edges.get(self._key(u, v), ()))

    def has_edge(self, u: str, v: str) -> bool:
        return self._key(u, v) in self.edges

    def is_exempt(self, u: str, v: str) -> bool:
        return self._key(u, v) in self.exempt

    def neighbors(self, u: str) -> tuple[str, ...]:
        out = [b if a == u else a for (a, b) in self.edges if u in (a, b)]
        return tuple(sorted(out))

    def subgraph(self, keep: Iterable[str]) -> "ReorderGraph":
        keep = set(keep)
        return _from_nodes([self.nodes[i] for i in sorted(keep)], self.channel_space)


def _from_nodes(nodes: Iterable[RGNode], channel_space: int) -> ReorderGraph:
    node_map = {n.id: n for n in nodes}
    ids = sorted(node_map)
    edges: dict[tuple[str, str], frozenset[int]] = {}
    exempt: set[tuple[str, str]] = set()
    children: dict[str, list[str]] = {i: [] for i in ids}
    for i, u in enumerate(ids):
        ru = node_map[u].retained
        for v in ids[i + 1:]:
            rv = node_map[v].retained
            shared = ru & rv
            if shared:
                edges[(u, v)] = frozenset(shared)
            if ru < rv:
                children[v].append(u)
                exempt.add((u, v))
            elif rv < ru:
                children[u].append(v)
                exempt.add((u, v))
    parents = {p: tuple(sorted(cs)) for p, cs in children.items() if cs}
    return ReorderGraph(node_map, edges, parents, frozenset(exempt), channel_space)


def reorder_graph_from_sets(retained: Mapping[str, Iterable[int]],
                            channel_space: int) -> ReorderGraph:
    """Build a reorder graph from raw consumer -> retained-channel sets.

    Consumers with identical sets merge into one node named after the
    smallest member id.
    """
    by_set: dict[frozenset[int], list[str]] = {}
    for cid in sorted(retained):
        rset = frozenset(int(c) for c in retained[cid])
        if not rset:
            raise ValidationError([f"{cid}: retained set is empty"])
        if any(not (0 <= c < channel_space) for c in rset):
            raise ValidationError([f"{cid}: retained channel out of [0, {channel_space})"])
        by_set.setdefault(rset, []).append(cid)
    nodes = []
    for rset, members in by_set.items():
        members = tuple(sorted(members))
        nodes.append(RGNode(members[0], members, rset, len(rset)))
    return _from_nodes(nodes, channel_space)


def retained_slots(segment: Segment, masks: ChannelMask) -> dict[str, frozenset[int]]:
    """Per-consumer retained channels in segment-slot space.

    Consumers without a mask entry retain everything they read. Mask
    indices are consumer-local input channel indices.
    """
    out: dict[str, frozenset[int]] = {}
    for c in segment.consumers:
        vec = segment.consumer_slots[c]
        if c in masks:
            local = masks[c]
            bad = [i for i in local if not (0 <= i < len(vec))]
            if bad:
                raise ValidationError([f"{c}: mask index {bad[0]} out of [0, {len(vec)})"])
            out[c] = frozenset(vec[i] for i in local)
        else:
            out[c] = frozenset(vec)
    return out


def build_reorder_graph(segment: Segment, masks: ChannelMask) -> ReorderGraph:
    slots = retained_slots(segment, masks)
    return reorder_graph_from_sets(slots, segment.channel_space)


def detect_subsets(graph: ReorderGraph) -> list[SubsetRelation]:
    return [SubsetRelation(p, graph.parents[p]) for p in sorted(graph.parents)]


def reduce_producers(segment: Segment, graph: ModelGraph | None = None) -> list[ProducerEquivalence]:
    """Per-producer slot maps, or an error when the join structure breaks
    the one-channel-to-one-slot assumptions."""
    if segment.unsupported is not None:
        raise UnsupportedTopologyError(segment.id, segment.unsupported)
    return [ProducerEquivalence(p, segment.producer_slots[p]) for p in segment.producers]
