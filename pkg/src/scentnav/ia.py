"""Hierarchical information architectures: layouts, scent, and path costs.

A layout is a rooted tree of options. The root layer models the headings of a
menu; each internal node opens a child layer. Every node carries a true scent
value in [0, 1] (semantic similarity between its label and the task goal).
Synthetic benchmark layouts assign scent directly from per-condition ranges;
real layouts derive it from label embeddings via cosine similarity.
"""

from __future__ import annotations

import json
import hashlib
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

NodeId = int

DEFAULT_N_MAX = 12


class LayoutError(ValueError):
    """Base class for layout construction and lookup failures."""


class CycleDetected(LayoutError):
    pass


class MultipleTargets(LayoutError):
    pass


class LayerTooWide(LayoutError):
    pass


class ScentOutOfRange(LayoutError):
    pass


class NodeNotFound(LayoutError):
    pass


class UnknownCondition(LayoutError):
    pass


class MissingLabel(KeyError):
    pass


class ZeroNormVector(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    """One option in the hierarchy.

    ``grid_pos`` is the (row, col) cell of the option in the on-screen grid;
    it only has to be unique within the node's own layer.
    """

    id: NodeId
    true_scent: float
    children: tuple[NodeId, ...] = ()
    label: Optional[str] = None
    grid_pos: tuple[int, int] = (0, 0)

    @property
    def is_leaf(self) -> bool:
        return not self.children


class Layout:
    """Validated, immutable option tree.

    Construct through :func:`build_layout`; instances are treated as frozen
    and are safe to share across concurrent episode rollouts.
    """

    def __init__(
        self,
        nodes: Sequence[Node],
        root_layer: Sequence[NodeId],
        target_id: NodeId,
        n_max: int,
        depth_max: int,
        d_max: int,
        parent: Mapping[NodeId, Optional[NodeId]],
        ancestors: Mapping[NodeId, tuple[NodeId, ...]],
    ):
        self.nodes: tuple[Node, ...] = tuple(nodes)
        self.root_layer: tuple[NodeId, ...] = tuple(root_layer)
        self.target_id: NodeId = target_id
        self.n_max: int = n_max
        self.depth_max: int = depth_max
        self.d_max: int = d_max
        self._by_id: dict[NodeId, Node] = {n.id: n for n in self.nodes}
        self._parent: dict[NodeId, Optional[NodeId]] = dict(parent)
        self._ancestors: dict[NodeId, tuple[NodeId, ...]] = dict(ancestors)
        # Node ids on the unique root-to-target path, including the target.
        self.on_path: frozenset[NodeId] = frozenset(
            self._ancestors[target_id] + (target_id,)
        )

    def node(self, node_id: NodeId) -> Node:
        try:
            return self._by_id[node_id]
        except KeyError:
            raise NodeNotFound(f"no node with id {node_id}") from None

    def __contains__(self, node_id: NodeId) -> bool:
        return node_id in self._by_id

    def parent(self, node_id: NodeId) -> Optional[NodeId]:
        self.node(node_id)
        return self._parent[node_id]

    def ancestors(self, node_id: NodeId) -> tuple[NodeId, ...]:
        """Ancestor ids of ``node_id``, root end first (empty for root-layer nodes)."""
        self.node(node_id)
        return self._ancestors[node_id]

    def layer_options(self, parent_id: Optional[NodeId]) -> tuple[NodeId, ...]:
        """Ordered option ids of the root layer (``None``) or of a child layer."""
        if parent_id is None:
            return self.root_layer
        return self.node(parent_id).children

    def layer_paths(self) -> list[tuple[NodeId, ...]]:
        """All layer paths in the tree: () for the root layer, (a,) under a, ..."""
        paths = [()]
        for n in self.nodes:
            if not n.is_leaf:
                paths.append(self._ancestors[n.id] + (n.id,))
        return paths

    @property
    def leaf_ids(self) -> tuple[NodeId, ...]:
        return tuple(n.id for n in self.nodes if n.is_leaf)

    def depth(self, node_id: NodeId) -> int:
        """1-based depth: root-layer nodes have depth 1."""
        return len(self.ancestors(node_id)) + 1

    def scent(self, node_id: NodeId) -> float:
        return self.node(node_id).true_scent

    def content_hash(self) -> str:
        payload = layout_to_json(self).encode()
        return hashlib.blake2b(payload, digest_size=8).hexdigest()


def _check_tree(nodes: Sequence[Node], root_layer: Sequence[NodeId]) -> dict:
    by_id: dict[NodeId, Node] = {}
    for n in nodes:
        if n.id in by_id:
            raise LayoutError(f"duplicate node id {n.id}")
        by_id[n.id] = n

    parent: dict[NodeId, Optional[NodeId]] = {}
    for rid in root_layer:
        if rid not in by_id:
            raise NodeNotFound(f"root layer references unknown node {rid}")
        if rid in parent:
            raise LayoutError(f"node {rid} listed twice in root layer")
        parent[rid] = None
    for n in nodes:
        for c in n.children:
            if c == n.id:
                raise CycleDetected(f"node {n.id} lists itself as a child")
            if c not in by_id:
                raise NodeNotFound(f"node {n.id} references unknown child {c}")
            if c in parent:
                raise CycleDetected(f"node {c} has more than one parent")
            parent[c] = n.id

    # Every node must be reachable from the root layer; anything left over
    # either floats free or sits on a cycle.
    ancestors: dict[NodeId, tuple[NodeId, ...]] = {}
    depth: dict[NodeId, int] = {}
    stack = [(rid, ()) for rid in reversed(root_layer)]
    seen = set()
    while stack:
        nid, anc = stack.pop()
        if nid in seen:
            raise CycleDetected(f"node {nid} reached twice")
        seen.add(nid)
        ancestors[nid] = anc
        depth[nid] = len(anc) + 1
        node = by_id[nid]
        for c in reversed(node.children):
            stack.append((c, anc + (nid,)))
    if len(seen) != len(nodes):
        unreachable = sorted(set(by_id) - seen)
        raise CycleDetected(f"nodes unreachable from root (cycle or orphan): {unreachable}")

    return {"by_id": by_id, "parent": parent, "ancestors": ancestors, "depth": depth}


def _max_action_cost(
    layer_paths: list[tuple[NodeId, ...]], ancestors: Mapping[NodeId, tuple[NodeId, ...]]
) -> int:
    best = 0
    anc_list = list(ancestors.items())
    for path in layer_paths:
        for nid, anc in anc_list:
            c = _common_prefix_len(path, anc)
            cost = (len(path) - c) + 2 * (len(anc) - c) + 1
            if cost > best:
                best = cost
    return best


def _common_prefix_len(a: Sequence[NodeId], b: Sequence[NodeId]) -> int:
    n = 0
    for x, y in zip(a, b):
        if x != y:
            break
        n += 1
    return n


def build_layout(
    nodes: Sequence[Node],
    root_layer: Sequence[NodeId],
    target_id: NodeId,
    n_max: int = DEFAULT_N_MAX,
) -> Layout:
    """Validate an explicit node list and assemble a Layout.

    Checks tree shape (single parent, no cycles, full reachability), layer
    widths against ``n_max``, scent ranges, grid uniqueness, and that the
    target is a single existing leaf. ``depth_max`` and ``d_max`` are computed
    here and cached on the returned object.
    """
    if not root_layer:
        raise LayoutError("root layer is empty")
    info = _check_tree(nodes, root_layer)
    by_id = info["by_id"]

    if sum(1 for n in nodes if n.id == target_id) == 0:
        raise NodeNotFound(f"target {target_id} not in node list")
    if sum(1 for n in nodes if n.id == target_id) > 1:
        raise MultipleTargets(f"target id {target_id} appears more than once")
    if not by_id[target_id].is_leaf:
        raise MultipleTargets(f"target {target_id} is not a leaf")

    if len(root_layer) > n_max:
        raise LayerTooWide(f"root layer has {len(root_layer)} > {n_max} options")
    for n in nodes:
        if len(n.children) > n_max:
            raise LayerTooWide(f"layer under {n.id} has {len(n.children)} > {n_max} options")
        if not (0.0 <= n.true_scent <= 1.0):
            raise ScentOutOfRange(f"node {n.id} scent {n.true_scent} outside [0, 1]")

    for parent_id in [None] + [n.id for n in nodes if not n.is_leaf]:
        opts = tuple(root_layer) if parent_id is None else by_id[parent_id].children
        cells = [by_id[o].grid_pos for o in opts]
        if len(set(cells)) != len(cells):
            raise LayoutError(f"duplicate grid_pos within layer under {parent_id}")

    depth_max = max(info["depth"].values())
    ordered = [by_id[i] for i in sorted(by_id)]
    layer_paths = [()] + [
        info["ancestors"][n.id] + (n.id,) for n in ordered if not n.is_leaf
    ]
    d_max = _max_action_cost(layer_paths, info["ancestors"])
    return Layout(
        nodes=ordered,
        root_layer=root_layer,
        target_id=target_id,
        n_max=n_max,
        depth_max=depth_max,
        d_max=d_max,
        parent=info["parent"],
        ancestors=info["ancestors"],
    )


def propagate_internal_scent(layout: Layout, rho_h: float = 0.9) -> Layout:
    """Recompute every internal node's scent as ``rho_h * max(children)``.

    Values are recomputed from the leaves up, so the pass is idempotent and
    monotone in the leaf scents. Leaf scents are left untouched.
    """
    if not (0.0 < rho_h <= 1.0):
        raise ValueError(f"rho_h must lie in (0, 1], got {rho_h}")

    memo: dict[NodeId, float] = {}

    def value(nid: NodeId) -> float:
        if nid in memo:
            return memo[nid]
        node = layout.node(nid)
        v = node.true_scent if node.is_leaf else rho_h * max(value(c) for c in node.children)
        memo[nid] = v
        return v

    new_nodes = [
        n if n.is_leaf else replace(n, true_scent=value(n.id)) for n in layout.nodes
    ]
    return build_layout(new_nodes, layout.root_layer, layout.target_id, layout.n_max)


def action_path_cost(
    layout: Layout,
    from_path: Sequence[NodeId],
    focus: Optional[NodeId],
    to: NodeId,
) -> int:
    """Minimal number of atomic actions to bring focus onto ``to``.

    ``from_path`` is the stack of selected ancestors identifying the current
    layer; ``focus`` the currently focused node, if any. The cost climbs out
    to the deepest common ancestor layer (one Return per level), descends with
    one Visit plus one Select per level, and ends with the Visit that focuses
    ``to``. Already focused costs zero.
    """
    target_anc = layout.ancestors(to)
    path = tuple(from_path)
    for nid in path:
        layout.node(nid)
    if focus is not None and focus == to:
        return 0
    c = _common_prefix_len(path, target_anc)
    return (len(path) - c) + 2 * (len(target_anc) - c) + 1


# ---------------------------------------------------------------------------
# Benchmark condition generation
# ---------------------------------------------------------------------------

DIFFICULTY_KINDS = ("no_problem", "competing", "low_scent")
DEPTH_KINDS = ("two_level_8x8", "three_level_4x4x4")
POSITION_KINDS = ("left", "right", "top", "bottom")
ALL_KINDS = DIFFICULTY_KINDS + DEPTH_KINDS + POSITION_KINDS

GRID_SIZE = 8  # benchmark menus hold 64 leaves on an 8x8 grid


def condition_family(kind: str) -> str:
    if kind in DIFFICULTY_KINDS:
        return "difficulty"
    if kind in DEPTH_KINDS:
        return "depth"
    if kind in POSITION_KINDS:
        return "position"
    raise UnknownCondition(f"unknown condition kind {kind!r}")


@dataclass(frozen=True)
class ConditionSpec:
    """One benchmark cell: a condition kind, one of its three goals, a seed."""

    kind: str
    goal_index: int
    seed: int

    def __post_init__(self):
        condition_family(self.kind)
        if not 0 <= self.goal_index <= 2:
            raise ValueError(f"goal_index must be 0..2, got {self.goal_index}")


@dataclass(frozen=True)
class ScentProfile:
    """True-scent assignment rule for one difficulty regime.

    The target leaf draws from [target_low, target_high]; every other leaf
    from [distractor_low, distractor_high]. A competing profile additionally
    lifts 2..3 random non-target leaves into a band of half-width
    ``competing_halfwidth`` around the target value.
    """

    target_low: float
    target_high: float
    distractor_low: float
    distractor_high: float
    n_competing_min: int = 0
    n_competing_max: int = 0
    competing_halfwidth: float = 0.05


DEFAULT_PROFILES: dict[str, ScentProfile] = {
    "no_problem": ScentProfile(0.75, 0.90, 0.05, 0.30),
    "competing": ScentProfile(0.70, 0.70, 0.05, 0.30, n_competing_min=2, n_competing_max=3),
    "low_scent": ScentProfile(0.35, 0.35, 0.10, 0.30),
}


@dataclass(frozen=True)
class GenerationConfig:
    """Knobs of the synthetic benchmark generator.

    The depth and position studies reuse the competing profile by default:
    it is the regime where noisy scent produces the occasional wrong turn
    that the behavioral anchors reflect.
    """

    profiles: Mapping[str, ScentProfile] = field(
        default_factory=lambda: dict(DEFAULT_PROFILES)
    )
    rho_h: float = 0.9
    depth_profile: str = "competing"
    position_profile: str = "competing"
    n_max: int = DEFAULT_N_MAX


DEFAULT_GENERATION = GenerationConfig()


def _leaf_cell_two_level(row: int, col: int) -> tuple[int, int]:
    """(heading index, child index) of the grid cell: headings are columns."""
    return col, row


def _leaf_cell_three_level(row: int, col: int) -> tuple[int, int, int]:
    """(level1, level2, level3) indices of a grid cell of the 4x4x4 menu."""
    a = col // 2
    b = 2 * (col % 2) + row // 4
    c = row % 4
    return a, b, c


def _build_two_level(scents: np.ndarray, target_cell: tuple[int, int], n_max: int) -> Layout:
    """8 heading columns, each opening a layer of 8 items (rows top to bottom)."""
    g = GRID_SIZE
    nodes = []
    for j in range(g):
        children = tuple(g + g * j + i for i in range(g))
        nodes.append(Node(id=j, true_scent=0.0, children=children, grid_pos=(0, j)))
    for j in range(g):
        for i in range(g):
            nodes.append(
                Node(id=g + g * j + i, true_scent=float(scents[i, j]), grid_pos=(i, j))
            )
    heading, child = _leaf_cell_two_level(*target_cell)
    target = g + g * heading + child
    return build_layout(nodes, tuple(range(g)), target, n_max)


def _build_three_level(scents: np.ndarray, target_cell: tuple[int, int], n_max: int) -> Layout:
    k = 4
    nodes = []
    lvl2_id = lambda a, b: k + k * a + b
    leaf_id = lambda a, b, c: k + k * k + 16 * a + 4 * b + c
    for a in range(k):
        nodes.append(
            Node(id=a, true_scent=0.0, children=tuple(lvl2_id(a, b) for b in range(k)),
                 grid_pos=(0, a))
        )
    for a in range(k):
        for b in range(k):
            nodes.append(
                Node(id=lvl2_id(a, b), true_scent=0.0,
                     children=tuple(leaf_id(a, b, c) for c in range(k)),
                     grid_pos=(b, a))
            )
    for a in range(k):
        for b in range(k):
            for c in range(k):
                row = 4 * (b % 2) + c
                col = 2 * a + b // 2
                nodes.append(
                    Node(id=leaf_id(a, b, c), true_scent=float(scents[row, col]),
                         grid_pos=(row, col))
                )
    a, b, c = _leaf_cell_three_level(*target_cell)
    return build_layout(nodes, tuple(range(k)), leaf_id(a, b, c), n_max)


def make_menu_layout(
    shape: str,
    profile: ScentProfile,
    target_cell: tuple[int, int],
    rng: np.random.Generator,
    rho_h: float = 0.9,
    n_max: int = DEFAULT_N_MAX,
) -> Layout:
    """Build one synthetic benchmark menu with scents drawn from ``profile``.

    ``shape`` is "8x8" (two levels) or "4x4x4" (three levels); both hold 64
    leaves on the same 8x8 grid. Draw order is fixed so layouts are a pure
    function of the generator state.
    """
    g = GRID_SIZE
    scents = rng.uniform(profile.distractor_low, profile.distractor_high, size=(g, g))
    tr, tc = target_cell
    scents[tr, tc] = rng.uniform(profile.target_low, profile.target_high)
    if profile.n_competing_max > 0:
        n_comp = int(rng.integers(profile.n_competing_min, profile.n_competing_max + 1))
        flat = [i for i in range(g * g) if i != tr * g + tc]
        picks = rng.choice(len(flat), size=n_comp, replace=False)
        center = scents[tr, tc]
        for p in picks:
            cell = flat[int(p)]
            lo = max(0.0, center - profile.competing_halfwidth)
            hi = min(1.0, center + profile.competing_halfwidth)
            scents[cell // g, cell % g] = rng.uniform(lo, hi)
    if shape == "8x8":
        layout = _build_two_level(scents, target_cell, n_max)
    elif shape == "4x4x4":
        layout = _build_three_level(scents, target_cell, n_max)
    else:
        raise UnknownCondition(f"unknown menu shape {shape!r}")
    return propagate_internal_scent(layout, rho_h)


def _target_cell_for_kind(kind: str, rng: np.random.Generator) -> tuple[int, int]:
    g = GRID_SIZE
    half = g // 2
    row = int(rng.integers(0, g))
    col = int(rng.integers(0, g))
    if kind == "left":
        col = int(rng.integers(0, half))
    elif kind == "right":
        col = int(rng.integers(half, g))
    elif kind == "top":
        row = int(rng.integers(0, half))
    elif kind == "bottom":
        row = int(rng.integers(half, g))
    return row, col


def condition_rng(cond: ConditionSpec) -> np.random.Generator:
    kind_code = ALL_KINDS.index(cond.kind)
    seed = cond.seed & (2**64 - 1)
    return np.random.default_rng(np.random.SeedSequence([seed, kind_code, cond.goal_index]))


def generate_benchmark_layout(
    cond: ConditionSpec, gen: GenerationConfig = DEFAULT_GENERATION
) -> Layout:
    """Deterministically generate the benchmark layout for one condition cell."""
    family = condition_family(cond.kind)
    rng = condition_rng(cond)
    if family == "difficulty":
        profile = gen.profiles[cond.kind]
        shape = "8x8"
    elif family == "depth":
        profile = gen.profiles[gen.depth_profile]
        shape = "8x8" if cond.kind == "two_level_8x8" else "4x4x4"
    else:
        profile = gen.profiles[gen.position_profile]
        shape = "8x8"
    cell = _target_cell_for_kind(cond.kind, rng)
    return make_menu_layout(shape, profile, cell, rng, gen.rho_h, gen.n_max)


# ---------------------------------------------------------------------------
# Embedding-based scent
# ---------------------------------------------------------------------------

@dataclass
class EmbeddingTable:
    """Label-to-vector map exported by the offline embedding tool."""

    dim: int
    vectors: dict[str, np.ndarray]

    def __post_init__(self):
        for label, v in self.vectors.items():
            arr = np.asarray(v, dtype=np.float64)
            if arr.shape != (self.dim,):
                raise ValueError(
                    f"vector for {label!r} has shape {arr.shape}, expected ({self.dim},)"
                )
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"vector for {label!r} has NaN/Inf components")
            self.vectors[label] = arr

    def vector(self, label: str) -> np.ndarray:
        try:
            return self.vectors[label]
        except KeyError:
            raise MissingLabel(label) from None


def scent_from_embeddings(goal_label: str, option_label: str, table: EmbeddingTable) -> float:
    """Cosine similarity of goal and option labels, clamped to [0, 1]."""
    g = table.vector(goal_label)
    l = table.vector(option_label)
    gn = float(np.linalg.norm(g))
    ln = float(np.linalg.norm(l))
    if gn == 0.0 or ln == 0.0:
        raise ZeroNormVector(f"zero-norm embedding for {goal_label!r} or {option_label!r}")
    cos = float(np.dot(g, l) / (gn * ln))
    return min(1.0, max(0.0, cos))


def layout_with_embedding_scent(
    layout: Layout, goal_label: str, table: EmbeddingTable, rho_h: float = 0.9
) -> Layout:
    """Re-score every labeled leaf from the embedding table, then propagate."""
    new_nodes = []
    for n in layout.nodes:
        if n.is_leaf:
            if n.label is None:
                raise MissingLabel(f"leaf {n.id} has no label")
            new_nodes.append(replace(n, true_scent=scent_from_embeddings(goal_label, n.label, table)))
        else:
            new_nodes.append(n)
    rebuilt = build_layout(new_nodes, layout.root_layer, layout.target_id, layout.n_max)
    return propagate_internal_scent(rebuilt, rho_h)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def layout_to_json(layout: Layout) -> str:
    doc = {
        "nodes": [
            {
                "id": n.id,
                "label": n.label,
                "scent": n.true_scent,
                "children": list(n.children),
                "row": n.grid_pos[0],
                "col": n.grid_pos[1],
            }
            for n in layout.nodes
        ],
        "root": list(layout.root_layer),
        "target": layout.target_id,
    }
    return json.dumps(doc, sort_keys=True, indent=1)


def layout_from_json(text: str, n_max: int = DEFAULT_N_MAX) -> Layout:
    doc = json.loads(text)
    nodes = [
        Node(
            id=d["id"],
            label=d.get("label"),
            true_scent=float(d["scent"]),
            children=tuple(d.get("children", ())),
            grid_pos=(int(d.get("row", 0)), int(d.get("col", 0))),
        )
        for d in doc["nodes"]
    ]
    return build_layout(nodes, tuple(doc["root"]), doc["target"], n_max)


def save_layout(layout: Layout, path) -> None:
    with open(path, "w") as f:
        f.write(layout_to_json(layout))
        f.write("\n")


def load_layout(path, n_max: int = DEFAULT_N_MAX) -> Layout:
    with open(path) as f:
        return layout_from_json(f.read(), n_max)


def embedding_table_to_json(table: EmbeddingTable) -> str:
    doc = {
        "dim": table.dim,
        "vectors": {k: [float(x) for x in v] for k, v in sorted(table.vectors.items())},
    }
    return json.dumps(doc, sort_keys=True)


def embedding_table_from_json(text: str) -> EmbeddingTable:
    doc = json.loads(text)
    return EmbeddingTable(
        dim=int(doc["dim"]),
        vectors={k: np.asarray(v, dtype=np.float64) for k, v in doc["vectors"].items()},
    )


def load_embedding_table(path) -> EmbeddingTable:
    with open(path) as f:
        return embedding_table_from_json(f.read())
