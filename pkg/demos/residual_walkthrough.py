#!/usr/bin/env python3
"""Walk one residual block through the whole export, stage by stage.

Two branches A and C are summed, and two consumers B and D read the sum
with different pruning masks. Dropping channels naively would force every
consumer to gather; reordering the shared space lets both read slices.
"""

import numpy as np

from reslice.graph import Layer, LayerKind, ModelGraph, WeightStore
from reslice.interp import check_equivalence
from reslice.ordering import order_channels
from reslice.path_search import decompose_paths
from reslice.pipeline import export_model
from reslice.reorder_graph import build_reorder_graph
from reslice.segments import find_segments

K = LayerKind


def residual_block(width=4, seed=0):
    rng = np.random.default_rng(seed)
    layers = [
        Layer("in", K.INPUT, width, width),
        Layer("A", K.CHANNEL_MIX, width, width),
        Layer("C", K.CHANNEL_MIX, width, width),
        Layer("j", K.ADD, width, width),
        Layer("r", K.PASS_THROUGH, width, width),
        Layer("B", K.CHANNEL_MIX, width, 2),
        Layer("D", K.CHANNEL_MIX, width, 2),
        Layer("j2", K.ADD, 2, 2),
        Layer("out", K.OUTPUT, 2, 2),
    ]
    edges = [("in", "A"), ("in", "C"), ("A", "j"), ("C", "j"), ("j", "r"),
             ("r", "B"), ("r", "D"), ("B", "j2"), ("D", "j2"), ("j2", "out")]
    weights = WeightStore({
        l.id: rng.standard_normal((l.out_channels, l.in_channels))
        for l in layers if l.kind is K.CHANNEL_MIX})
    return ModelGraph(layers, edges), weights


def main():
    graph, weights = residual_block()
    masks = {"B": (0, 2), "D": (1, 2)}
    print("masks (retained input channels):", masks)

    print("\n1. segments")
    segments = find_segments(graph)
    for s in segments:
        print(f"   producers={s.producers} interior={s.interior} "
              f"consumers={s.consumers}")
    block = next(s for s in segments if set(s.producers) == {"A", "C"})

    print("\n2. reorder graph over the pruned consumers")
    rg = build_reorder_graph(block, masks)
    for node in rg.nodes.values():
        print(f"   {node.id}: retains {sorted(node.retained)} (reward {node.reward})")
    for a, b in sorted(rg.edges):
        print(f"   edge {a}-{b}: shares {sorted(rg.shared(a, b))} "
              f"(penalty {rg.edge_reward(a, b)})")

    print("\n3. best paths and the channel order they emit")
    paths = decompose_paths(rg)
    for p in paths:
        print(f"   path {p.nodes} reward {p.reward}")
    order = order_channels(rg, paths)
    print(f"   order {order.order}, dropped {order.dropped}")

    print("\n4. export")
    result = export_model(graph, weights, masks)
    plan = next(p for p in result.plans if p.segment == block.id)
    for prod, rows in sorted(plan.producer_orders.items()):
        print(f"   {prod}: keeps filters {rows} (drops {plan.dropped.get(prod, ())})")
    for a in plan.consumers:
        if a.mode == "slice":
            print(f"   {a.consumer}: slice [{a.start}:{a.start + a.length}] "
                  f"reading original columns {a.perm}")
        else:
            print(f"   {a.consumer}: gather {a.indices}")
    print(f"   copied channels: {result.totals.copied} of {result.totals.total_reads}")

    print("\n5. numerical check against the masked original")
    report = check_equivalence(graph, weights, masks, result.graph, result.weights)
    print(f"   max deviation {report.max_deviation:.3e} "
          f"(tolerance {report.tol:g}) -> {'OK' if report.passed else 'MISMATCH'}")


if __name__ == "__main__":
    main()
