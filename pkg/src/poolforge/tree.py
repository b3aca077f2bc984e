"""Indirect block trees.

A tree of level ``L`` addresses ``128**L`` leaves; a level-0 tree is a single
leaf referenced directly by the root. Holes are BlockRefs with the hole flag
set. A hole keeps the txg in which its range was freed; children synthesized
from a hole inherit that birth, so birth-time pruning also finds frees.
"""

from itertools import groupby

from .blockref import (BREF_SIZE, TYPE_INDIRECT, BlockRef, decode_many, encode_many, hole)

FANOUT = 128
INDIRECT_SIZE = FANOUT * BREF_SIZE


def levels_for(nblocks: int) -> int:
    level = 0
    cap = 1
    while cap < nblocks:
        cap *= FANOUT
        level += 1
    return level


def span_of(level: int) -> int:
    return FANOUT ** level


class BlockTree:
    """A tree of fixed-size leaves with an in-memory dirty overlay."""

    def __init__(self, pool, root: BlockRef, leaf_size: int, leaf_type: int):
        self.pool = pool
        self.root = root
        self.leaf_size = leaf_size
        self.leaf_type = leaf_type
        self.dirty = {}

    def clone(self) -> "BlockTree":
        t = BlockTree(self.pool, self.root, self.leaf_size, self.leaf_type)
        t.dirty = dict(self.dirty)
        return t

    # ---------------------------------------------------------- committed view

    def children(self, node: BlockRef) -> list:
        if node.hole:
            return [hole(node.level - 1, node.birth_txg)] * FANOUT
        return self.pool.read_indirect(node)

    def lookup(self, idx: int) -> BlockRef:
        node = self.root
        level = node.level
        if idx >= span_of(level):
            return hole(0)
        while level > 0:
            if node.hole:
                return hole(0, node.birth_txg)
            span = span_of(level - 1)
            node = self.children(node)[idx // span]
            idx %= span
            level -= 1
        return node

    def iter_leaves(self, lo: int = 0, hi: int | None = None):
        """Committed non-hole leaves ``(index, bref)`` with ``lo <= index < hi``."""
        stack = [(self.root, self.root.level, 0)]
        while stack:
            node, level, base = stack.pop()
            if node.hole:
                continue
            top = base + span_of(level)
            if top <= lo or (hi is not None and base >= hi):
                continue
            if level == 0:
                yield base, node
                continue
            span = span_of(level - 1)
            kids = self.children(node)
            for ci in range(FANOUT - 1, -1, -1):
                stack.append((kids[ci], level - 1, base + ci * span))

    def changes(self, since_txg: int):
        """Birth-pruned changes relative to ``since_txg``.

        Yields ``("write", index, bref)`` and ``("free", lo, hi)`` in index
        order; ``hi`` is None for "to the end".
        """
        yield from self._changes(self.root, self.root.level, 0, since_txg, True)

    def _changes(self, node, level, base, since, is_root):
        if node.birth_txg <= since:
            return
        if node.hole:
            yield ("free", base, None if is_root else base + span_of(level))
            return
        if level == 0:
            yield ("write", base, node)
            return
        span = span_of(level - 1)
        for ci, kid in enumerate(self.children(node)):
            yield from self._changes(kid, level - 1, base + ci * span, since, False)

    def walk(self, visit, read=None):
        """Depth-first over committed non-hole brefs.

        ``visit(bref)`` returning False prunes the subtree. ``read`` supplies
        the logical bytes of indirect blocks (defaults to the pool).
        """
        stack = [self.root]
        while stack:
            node = stack.pop()
            if node.hole or not visit(node):
                continue
            if node.level > 0:
                kids = decode_many(read(node)) if read else self.children(node)
                stack.extend(reversed(kids))

    # ------------------------------------------------------------- dirty view

    def read_leaf(self, idx: int):
        """Logical bytes of leaf ``idx``, or None for a hole."""
        if idx in self.dirty:
            return self.dirty[idx]
        ref = self.lookup(idx)
        if ref.hole:
            return None
        return self.pool.read_logical_block(ref)

    def set_leaf(self, idx: int, data) -> None:
        if data is not None and len(data) != self.leaf_size:
            raise ValueError(f"leaf must be {self.leaf_size} bytes")
        self.dirty[idx] = None if data is None else bytes(data)

    def data_indices(self, lo: int = 0, hi: int | None = None) -> list:
        """Indices holding data in the dirty view."""
        found = {i for i, _ in self.iter_leaves(lo, hi)}
        for i, v in self.dirty.items():
            if i < lo or (hi is not None and i >= hi):
                continue
            if v is None:
                found.discard(i)
            else:
                found.add(i)
        return sorted(found)

    def free_range(self, lo: int, hi: int | None = None) -> None:
        for i in self.data_indices(lo, hi):
            self.dirty[i] = None
        for i in [i for i in self.dirty if i >= lo and (hi is None or i < hi)]:
            self.dirty[i] = None

    # ------------------------------------------------------------------ sync

    def sync(self, txg: int):
        """Write dirty leaves and the indirect chain above them.

        Returns ``(new_root, displaced)``; the tree itself is updated and its
        dirty overlay cleared.
        """
        if not self.dirty:
            return self.root, []
        displaced = []
        items = sorted(self.dirty.items())
        node = self.root
        level = node.level
        top = max((i for i, v in items if v is not None), default=-1)
        need = levels_for(top + 1)
        while level < need:
            if node.hole:
                node = hole(level + 1, node.birth_txg)
            else:
                node = [node] + [hole(level)] * (FANOUT - 1)
            level += 1
        cap = span_of(level)
        items = [(i, v) for i, v in items if i < cap]
        new_root = self._sync_node(node, level, 0, items, txg, displaced) if items else node
        if isinstance(new_root, list):
            new_root = self._write_indirect(new_root, level)
        self.root = new_root
        self.dirty = {}
        return new_root, displaced

    def _write_indirect(self, kids, level):
        return self.pool.write_logical_block(encode_many(kids), TYPE_INDIRECT, level)

    def _sync_node(self, node, level, base, items, txg, displaced):
        if level == 0:
            (_, data), = items
            if data is None:
                if node.hole:
                    return node
                displaced.append(node)
                return hole(0, txg)
            new = self.pool.write_logical_block(data, self.leaf_type, 0)
            if not node.hole:
                displaced.append(node)
            return new
        virtual = isinstance(node, list)
        kids = list(node) if virtual else list(self.children(node))
        span = span_of(level - 1)
        changed = virtual
        for ci, grp in groupby(items, key=lambda it: (it[0] - base) // span):
            old = kids[ci]
            new = self._sync_node(old, level - 1, base + ci * span, list(grp), txg, displaced)
            if new is not old:
                kids[ci] = new
                changed = True
        if not changed:
            return node
        if not virtual and not node.hole:
            displaced.append(node)
        if all(k.hole for k in kids):
            return hole(level, txg)
        return self._write_indirect(kids, level)


def write_blob(pool, blob: bytes, leaf_size: int, leaf_type: int):
    """Store ``blob`` (8-byte length prefix added) as a fresh tree."""
    framed = len(blob).to_bytes(8, "little") + blob
    tree = BlockTree(pool, hole(0), leaf_size, leaf_type)
    for i in range(0, len(framed), leaf_size):
        chunk = framed[i:i + leaf_size]
        tree.set_leaf(i // leaf_size, chunk.ljust(leaf_size, b"\0"))
    root, _ = tree.sync(pool.open_txg)
    return root


def read_blob(pool, root: BlockRef, leaf_size: int, leaf_type: int) -> bytes:
    tree = BlockTree(pool, root, leaf_size, leaf_type)
    parts = [tree.pool.read_logical_block(ref) for _, ref in tree.iter_leaves()]
    framed = b"".join(parts)
    n = int.from_bytes(framed[:8], "little")
    if n > len(framed) - 8:
        raise ValueError("blob length prefix exceeds stored bytes")
    return framed[8:8 + n]


def tree_brefs(pool, root: BlockRef, leaf_size: int, leaf_type: int) -> list:
    out = []
    BlockTree(pool, root, leaf_size, leaf_type).walk(lambda b: out.append(b) or True)
    return out
