"""Multiscale patch grids and hierarchical graph construction.

Patches are 224x224 and non-overlapping, so every node center sits on a
lattice: ``center = grid_index * 224 + 112`` in level-local pixels, where one
level-m pixel equals ``2**m`` level-0 pixels. Spatial edges connect nodes of
the same level whose center distance (in patch units) is at or below the
spatial threshold; cross-scale edges connect nodes of different levels whose
centers, after scaling the coarser one by ``2**delta``, lie within
``scale_threshold * 224`` pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

PATCH_SIZE = 224


@dataclass(frozen=True)
class PatchNode:
    """One patch at one magnification level."""

    node_id: int
    core_id: str
    level: int
    grid_row: int
    grid_col: int
    embedding: tuple = ()

    @property
    def center_x(self):
        return self.grid_col * PATCH_SIZE + PATCH_SIZE // 2

    @property
    def center_y(self):
        return self.grid_row * PATCH_SIZE + PATCH_SIZE // 2


@dataclass
class HierarchicalGraph:
    """Nodes across M levels plus typed edge lists.

    ``spatial_edges`` hold unordered same-level pairs stored as
    ``(min_id, max_id)``; ``cross_edges`` are ordered
    ``(coarser_node_id, finer_node_id)``. Neither list contains duplicates or
    self-loops.
    """

    nodes: list = field(default_factory=list)
    spatial_edges: list = field(default_factory=list)
    cross_edges: list = field(default_factory=list)

    def levels(self):
        return sorted({n.level for n in self.nodes})

    def nodes_at(self, level):
        return [n for n in self.nodes if n.level == level]


def build_level_grid(core_width, core_height, level, core_id="core", start_id=0):
    """Tile a core's level-0 extent with level-``level`` patches.

    Returns the nodes of a ``floor(w / (224 * 2**level)) x floor(h / ...)``
    grid (incomplete boundary patches are dropped). Returns an empty list when
    the extent cannot hold a single patch at this level.
    """
    if level < 0:
        raise ValueError("level must be non-negative")
    step = PATCH_SIZE * (2 ** level)
    cols = core_width // step
    rows = core_height // step
    if cols < 1 or rows < 1:
        return []
    nodes = []
    nid = start_id
    for r in range(rows):
        for c in range(cols):
            nodes.append(PatchNode(node_id=nid, core_id=core_id, level=level,
                                   grid_row=r, grid_col=c))
            nid += 1
    return nodes


def spatial_distance(a, b):
    """Euclidean center distance in units of the patch size (same level)."""
    if a.level != b.level:
        raise ValueError(f"spatial_distance: levels differ ({a.level} vs {b.level})")
    dx = a.center_x - b.center_x
    dy = a.center_y - b.center_y
    return math.hypot(dx, dy) / PATCH_SIZE


def scale_distance(a, b):
    """Center distance across levels, in pixels of the finer level.

    The coarser patch's level-local center is scaled by ``2**delta`` to the
    finer level's pixel grid before measuring.
    """
    if a.level == b.level:
        raise ValueError("scale_distance: nodes are at the same level")
    coarse, fine = (a, b) if a.level > b.level else (b, a)
    delta = coarse.level - fine.level
    f = 2 ** delta
    dx = coarse.center_x * f - fine.center_x
    dy = coarse.center_y * f - fine.center_y
    return math.hypot(dx, dy)


def build_hierarchical_graph(levels, spatial_threshold=1.5, scale_threshold=1.0):
    """Assemble the typed edge lists from per-level node lists.

    Spatial edge iff ``spatial_distance <= spatial_threshold``; cross edge iff
    ``scale_distance <= scale_threshold * 224``. Candidate neighbors are found
    through per-level grid buckets, which is exact because centers sit on the
    patch lattice; the output equals all-pairs threshold testing.
    """
    if spatial_threshold <= 0 or scale_threshold <= 0:
        raise ValueError("thresholds must be positive")
    nodes = sorted((n for lv in levels for n in lv),
                   key=lambda n: (n.level, n.grid_row, n.grid_col))
    if not nodes:
        raise ValueError("at least one level must be non-empty")

    by_level = {}
    for n in nodes:
        by_level.setdefault(n.level, {})[(n.grid_row, n.grid_col)] = n

    spatial = set()
    reach = int(math.floor(spatial_threshold))
    for n in nodes:
        grid = by_level[n.level]
        for dr in range(-reach, reach + 1):
            for dc in range(-reach, reach + 1):
                if dr == 0 and dc == 0:
                    continue
                other = grid.get((n.grid_row + dr, n.grid_col + dc))
                if other is None:
                    continue
                if spatial_distance(n, other) <= spatial_threshold:
                    spatial.add((min(n.node_id, other.node_id),
                                 max(n.node_id, other.node_id)))

    cross = set()
    level_ids = sorted(by_level)
    limit = scale_threshold * PATCH_SIZE
    for ci in level_ids:
        for fi in level_ids:
            if ci <= fi:
                continue
            fine_grid = by_level[fi]
            f = 2 ** (ci - fi)
            pad = int(math.ceil(scale_threshold)) + 1
            for coarse in by_level[ci].values():
                # fine-grid index of the scaled coarse center
                cx = coarse.center_x * f
                cy = coarse.center_y * f
                c0 = (cx - PATCH_SIZE // 2) // PATCH_SIZE
                r0 = (cy - PATCH_SIZE // 2) // PATCH_SIZE
                for dr in range(-pad, pad + 1):
                    for dc in range(-pad, pad + 1):
                        fine = fine_grid.get((r0 + dr, c0 + dc))
                        if fine is None:
                            continue
                        if scale_distance(coarse, fine) <= limit:
                            cross.add((coarse.node_id, fine.node_id))

    return HierarchicalGraph(nodes=nodes,
                             spatial_edges=sorted(spatial),
                             cross_edges=sorted(cross))


def brute_force_edges(levels, spatial_threshold=1.5, scale_threshold=1.0):
    """All-pairs threshold testing; the independent oracle for construction."""
    nodes = [n for lv in levels for n in lv]
    spatial, cross = set(), set()
    for i, a in enumerate(nodes):
        for b in nodes[i + 1:]:
            if a.level == b.level:
                if spatial_distance(a, b) <= spatial_threshold:
                    spatial.add((min(a.node_id, b.node_id), max(a.node_id, b.node_id)))
            else:
                coarse, fine = (a, b) if a.level > b.level else (b, a)
                if scale_distance(coarse, fine) <= scale_threshold * PATCH_SIZE:
                    cross.add((coarse.node_id, fine.node_id))
    return sorted(spatial), sorted(cross)
