"""Text and Graphviz dumps of a prefix tree.

Text format: one chunk per line in DFS pre-order, whitespace separated::

    id parent start_pos len ref_count first_token last_token

``parent`` is ``-`` for roots. A leading ``#`` line names the columns.
"""

from __future__ import annotations

from chunkkv.kvcache.allocator import Chunk
from chunkkv.kvcache.tree import PrefixTree

DUMP_FIELDS = ("id", "parent", "start_pos", "len", "ref_count", "first_token", "last_token")


def dump_text(tree: PrefixTree) -> str:
    lines = ["# " + " ".join(DUMP_FIELDS)]
    for chunk, parent in tree.iter_chunks():
        pid = str(parent.slot) if isinstance(parent, Chunk) else "-"
        lines.append(
            f"{chunk.slot} {pid} {chunk.start_pos} {len(chunk)} {chunk.ref_count} "
            f"{chunk.tokens[0]} {chunk.tokens[-1]}"
        )
    return "\n".join(lines) + "\n"


def dump_dot(tree: PrefixTree) -> str:
    lines = ["digraph prefix_tree {", "  node [shape=box];"]
    for chunk, parent in tree.iter_chunks():
        label = f"C{chunk.slot}\\npos {chunk.start_pos} len {len(chunk)}\\nref {chunk.ref_count}"
        style = ", style=filled, fillcolor=lightgrey" if chunk.ref_count >= 2 else ""
        lines.append(f'  c{chunk.slot} [label="{label}"{style}];')
        if isinstance(parent, Chunk):
            lines.append(f"  c{parent.slot} -> c{chunk.slot};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def parse_text(dump: str) -> list[dict[str, int | None]]:
    rows = []
    for line in dump.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        row: dict[str, int | None] = {}
        for name, raw in zip(DUMP_FIELDS, parts):
            row[name] = None if raw == "-" else int(raw)
        rows.append(row)
    return rows
