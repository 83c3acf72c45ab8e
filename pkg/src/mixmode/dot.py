"""Graphviz rendering of partial-order computations.

Each process gets its own row; nodes are filled by relay color and an
optional cut is drawn as a dashed line through per-process boundary points.
"""

from __future__ import annotations

from .causality import Cut, PoComputation
from .kernel import Internal, Receive, Send, UpdateAction

FILL = {"red": "#f4a6a6", "blue": "#a6c8f4", "neutral": "white"}


def _node_id(node) -> str:
    p, i = node
    return f"{p}_{i}"


def _label(a) -> str:
    if isinstance(a, Send):
        return f"!{a.dst}"
    if isinstance(a, Receive):
        return f"?{a.src}"
    if isinstance(a, Internal):
        return a.tag
    if isinstance(a, UpdateAction):
        return "update"
    return type(a).__name__


def render(po: PoComputation, cut: Cut | None = None, title: str | None = None) -> str:
    out = ["digraph po {", "  rankdir=LR;", "  newrank=true;",
           '  node [shape=box, style=filled, fontname="Helvetica", fontsize=10];']
    if title:
        out.append(f'  label="{title}";')
    procs = list(po.timelines)
    for p in procs:
        out.append(f'  subgraph "cluster_{p}" {{')
        out.append(f'    label="{p}"; style=dotted;')
        n = len(po.timelines[p])
        for i in range(n):
            node = (p, i)
            shape = ', shape=diamond' if isinstance(po.label(node), UpdateAction) else ""
            out.append(f'    "{_node_id(node)}" [label="{_label(po.label(node))}", '
                       f'fillcolor="{FILL[po.color(node)]}"{shape}];')
        if cut is not None:
            out.append(f'    "cut_{p}" [shape=point, width=0.05, label=""];')
        chain = [_node_id((p, i)) for i in range(n)]
        if cut is not None:
            chain.insert(min(cut.count(p), n), f"cut_{p}")
        for a, b in zip(chain, chain[1:]):
            out.append(f'    "{a}" -> "{b}" [weight=10];')
        out.append("  }")
    for src, dst in po.message_edges:
        out.append(f'  "{_node_id(src)}" -> "{_node_id(dst)}" [constraint=false, color="gray40"];')
    if cut is not None:
        for a, b in zip(procs, procs[1:]):
            out.append(f'  "cut_{a}" -> "cut_{b}" [style=dashed, arrowhead=none, constraint=false, penwidth=2];')
    out.append("}")
    return "\n".join(out) + "\n"
