"""Traffic networks, route enumeration and the sparse assignment matrices.

Nodes are always 0-based contiguous integers internally.  TNTP files number
nodes from 1; the original labels are kept in ``Network.node_labels``.
"""
from __future__ import annotations

import io
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ModelError, ParseError

SCHEMA_VERSION = 1

# Field order of a TNTP link record after init/term node.
TNTP_FIELDS = (
    "capacity",
    "length",
    "free_flow_time",
    "b",
    "power",
    "speed",
    "toll",
    "link_type",
)


@dataclass(frozen=True)
class Network:
    node_count: int
    edges: tuple
    attributes: dict = field(default_factory=dict, compare=False)
    node_labels: tuple = None

    def __post_init__(self):
        edges = tuple((int(a), int(b)) for a, b in self.edges)
        object.__setattr__(self, "edges", edges)
        if self.node_labels is None:
            object.__setattr__(self, "node_labels", tuple(range(self.node_count)))
        if self.node_count < 1:
            raise ModelError("network needs at least one node")
        seen = set()
        for a, b in edges:
            if not (0 <= a < self.node_count and 0 <= b < self.node_count):
                raise ModelError(f"edge ({a}, {b}) references a missing node")
            if a == b:
                raise ModelError(f"self-loop at node {a}")
            if (a, b) in seen:
                raise ModelError(f"duplicate edge ({a}, {b})")
            seen.add((a, b))
        attrs = {k: np.asarray(v, dtype=float) for k, v in self.attributes.items()}
        for k, v in attrs.items():
            if v.shape != (len(edges),):
                raise ModelError(f"attribute {k!r} has shape {v.shape}, expected ({len(edges)},)")
        object.__setattr__(self, "attributes", attrs)

    @property
    def edge_count(self):
        return len(self.edges)

    @property
    def edge_index(self):
        return {e: i for i, e in enumerate(self.edges)}

    def out_edges(self):
        """Per node, the list of (edge index, head) sorted by edge index."""
        out = [[] for _ in range(self.node_count)]
        for i, (a, b) in enumerate(self.edges):
            out[a].append((i, b))
        return out

    def unreachable_pair(self):
        """Return some (u, v) with no u->v path, or None if strongly connected."""
        fwd = [[] for _ in range(self.node_count)]
        bwd = [[] for _ in range(self.node_count)]
        for a, b in self.edges:
            fwd[a].append(b)
            bwd[b].append(a)
        for adj, flip in ((fwd, False), (bwd, True)):
            seen = _bfs_order(adj, 0)
            for v in range(self.node_count):
                if v not in seen:
                    return (v, 0) if flip else (0, v)
        return None

    def check_strongly_connected(self):
        bad = self.unreachable_pair()
        if bad is not None:
            raise ModelError(f"network is not strongly connected: node {bad[1]} unreachable from node {bad[0]}")

    def to_dict(self):
        return {
            "schema": "onp.network",
            "version": SCHEMA_VERSION,
            "node_count": self.node_count,
            "node_labels": list(self.node_labels),
            "edges": [list(e) for e in self.edges],
            "attributes": {k: v.tolist() for k, v in self.attributes.items()},
        }

    @classmethod
    def from_dict(cls, d, check_connectivity=True):
        _check_schema(d, "onp.network")
        net = cls(
            node_count=d["node_count"],
            edges=tuple(tuple(e) for e in d["edges"]),
            attributes=d.get("attributes", {}),
            node_labels=tuple(d.get("node_labels") or range(d["node_count"])),
        )
        if check_connectivity:
            net.check_strongly_connected()
        return net


def make_network(node_count, edges, attributes=None, node_labels=None, check_connectivity=True):
    """Build a Network and verify strong connectivity unless told otherwise.

    ``check_connectivity=False`` exists only for small analysis fixtures.
    """
    net = Network(node_count, tuple(edges), dict(attributes or {}), node_labels)
    if check_connectivity:
        net.check_strongly_connected()
    return net


def _bfs_order(adj, start):
    seen = {start}
    queue = deque([start])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return seen


def _check_schema(d, name):
    if d.get("schema") != name:
        raise ParseError(f"expected schema {name!r}, got {d.get('schema')!r}")
    if d.get("version") != SCHEMA_VERSION:
        raise ParseError(f"unsupported {name} version {d.get('version')!r}")


# ---------------------------------------------------------------------------
# TNTP


def load_tntp(stream, check_connectivity=True):
    """Parse a TNTP ``*_net.tntp`` link file into a Network."""
    if isinstance(stream, (str, bytes)):
        raise TypeError("load_tntp expects a text stream; use open(path) or io.StringIO")
    meta = {}
    lines = iter(enumerate(stream, start=1))
    for line_no, raw in lines:
        line = raw.strip()
        if not line:
            continue
        if line.startswith("<END OF METADATA>"):
            break
        if not line.startswith("<"):
            raise ParseError(f"expected a metadata tag, got {line[:40]!r}", line_no)
        close = line.find(">")
        if close < 0:
            raise ParseError("unterminated metadata tag", line_no)
        key = line[1:close].strip().upper()
        meta[key] = (line[close + 1:].strip(), line_no)
    else:
        raise ParseError("missing <END OF METADATA>")

    n_nodes = _meta_int(meta, "NUMBER OF NODES")
    n_links = _meta_int(meta, "NUMBER OF LINKS")

    edges = []
    attrs = {k: [] for k in TNTP_FIELDS}
    for line_no, raw in lines:
        line = raw.split("~", 1)[0].strip()
        if not line:
            continue
        if line.endswith(";"):
            line = line[:-1]
        parts = line.split()
        if len(parts) < 2:
            raise ParseError("link record needs init and term node", line_no)
        try:
            a, b = int(parts[0]), int(parts[1])
            values = [float(x) for x in parts[2:2 + len(TNTP_FIELDS)]]
        except ValueError as exc:
            raise ParseError(f"bad link record: {exc}", line_no) from None
        for label in (a, b):
            if not 1 <= label <= n_nodes:
                raise ParseError(f"node id {label} outside 1..{n_nodes}", line_no)
        edges.append((a - 1, b - 1))
        values += [np.nan] * (len(TNTP_FIELDS) - len(values))
        for k, v in zip(TNTP_FIELDS, values):
            attrs[k].append(v)

    if len(edges) != n_links:
        raise ParseError(f"metadata declares {n_links} links but {len(edges)} were read")
    attrs = {k: v for k, v in attrs.items() if not np.all(np.isnan(v))}
    return make_network(
        n_nodes,
        edges,
        attrs,
        node_labels=tuple(range(1, n_nodes + 1)),
        check_connectivity=check_connectivity,
    )


def _meta_int(meta, key):
    if key not in meta:
        raise ParseError(f"missing <{key}> in metadata")
    value, line_no = meta[key]
    try:
        return int(value)
    except ValueError:
        raise ParseError(f"<{key}> is not an integer: {value!r}", line_no) from None


def dump_tntp(net):
    """Serialize a Network back to TNTP text."""
    out = io.StringIO()
    out.write(f"<NUMBER OF ZONES> {net.node_count}\n")
    out.write(f"<NUMBER OF NODES> {net.node_count}\n")
    out.write("<FIRST THRU NODE> 1\n")
    out.write(f"<NUMBER OF LINKS> {net.edge_count}\n")
    out.write("<END OF METADATA>\n\n")
    out.write("~\tinit_node\tterm_node\t" + "\t".join(TNTP_FIELDS) + "\t;\n")
    for i, (a, b) in enumerate(net.edges):
        vals = []
        for k in TNTP_FIELDS:
            v = net.attributes.get(k)
            vals.append(repr(float(v[i])) if v is not None else "0")
        out.write(f"\t{a + 1}\t{b + 1}\t" + "\t".join(vals) + "\t;\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# Routes


@dataclass(frozen=True)
class RouteSet:
    routes: tuple
    assignment: sp.csr_matrix = field(compare=False)
    source_sink: tuple
    edge_count: int

    @property
    def n_routes(self):
        return len(self.routes)

    def nodes(self, net, r):
        """Node sequence of route ``r``."""
        path = self.routes[r]
        return (net.edges[path[0]][0],) + tuple(net.edges[e][1] for e in path)

    def to_dict(self):
        return {
            "schema": "onp.routes",
            "version": SCHEMA_VERSION,
            "edge_count": self.edge_count,
            "routes": [list(r) for r in self.routes],
            "source_sink": [list(p) for p in self.source_sink],
        }

    @classmethod
    def from_dict(cls, d, net):
        _check_schema(d, "onp.routes")
        rs = make_route_set(net, [tuple(r) for r in d["routes"]])
        if [list(p) for p in rs.source_sink] != d["source_sink"]:
            raise ParseError("stored source_sink does not match the routes")
        return rs


def make_route_set(net, routes):
    """Validate edge sequences as simple paths and assemble the assignment matrix."""
    routes = tuple(tuple(int(e) for e in r) for r in routes)
    if not routes:
        raise ModelError("route set is empty")
    source_sink = []
    for k, r in enumerate(routes):
        if not r:
            raise ModelError(f"route {k} has no edges")
        for e in r:
            if not 0 <= e < net.edge_count:
                raise ModelError(f"route {k} uses unknown edge {e}")
        nodes = [net.edges[r[0]][0]]
        for e in r:
            tail, head = net.edges[e]
            if tail != nodes[-1]:
                raise ModelError(f"route {k} is not a contiguous path")
            nodes.append(head)
        if len(set(nodes)) != len(nodes):
            raise ModelError(f"route {k} repeats a node")
        source_sink.append((nodes[0], nodes[-1]))
    rows = np.repeat(np.arange(len(routes)), [len(r) for r in routes])
    cols = np.concatenate([np.asarray(r, dtype=np.int64) for r in routes])
    A = sp.csr_matrix((np.ones(len(cols)), (rows, cols)), shape=(len(routes), net.edge_count))
    A.sort_indices()
    return RouteSet(routes, A, tuple(source_sink), net.edge_count)


def routes_from_nodes(net, node_paths):
    """Convert node sequences into edge-index sequences."""
    idx = net.edge_index
    out = []
    for path in node_paths:
        try:
            out.append(tuple(idx[(a, b)] for a, b in zip(path[:-1], path[1:])))
        except KeyError as exc:
            raise ModelError(f"path {path} uses a missing edge {exc.args[0]}") from None
    return out


def _hop_distances_to(net, target):
    rev = [[] for _ in range(net.node_count)]
    for a, b in net.edges:
        rev[b].append(a)
    dist = np.full(net.node_count, np.iinfo(np.int64).max // 2, dtype=np.int64)
    dist[target] = 0
    queue = deque([target])
    while queue:
        u = queue.popleft()
        for v in rev[u]:
            if dist[v] > dist[u] + 1:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def _paths_of_length(out, dist, source, target, hops, limit):
    """Simple paths with exactly ``hops`` edges in lexicographic edge order."""
    found = []
    path = []
    on_path = {source}

    def walk(u, left):
        if len(found) >= limit:
            return
        if left == 0:
            if u == target:
                found.append(tuple(path))
            return
        for e, v in out[u]:
            if v in on_path or dist[v] > left - 1:
                continue
            if v == target and left > 1:
                continue
            path.append(e)
            on_path.add(v)
            walk(v, left - 1)
            on_path.discard(v)
            path.pop()
            if len(found) >= limit:
                return

    walk(source, hops)
    return found


def k_shortest_simple_paths(net, source, target, k, max_length):
    """Up to ``k`` simple paths, fewest hops first, ties in lexicographic edge order."""
    out = net.out_edges()
    dist = _hop_distances_to(net, target)
    paths = []
    for hops in range(max(1, int(dist[source])), max_length + 1):
        if len(paths) >= k:
            break
        paths += _paths_of_length(out, dist, source, target, hops, k - len(paths))
    return paths


def enumerate_routes(net, pairs, max_per_pair, max_length):
    if max_per_pair < 1 or max_length < 1:
        raise ValueError("max_per_pair and max_length must be positive")
    routes = []
    seen = set()
    for s, t in pairs:
        if s == t:
            raise ModelError(f"pair ({s}, {t}) has identical source and sink")
        if not (0 <= s < net.node_count and 0 <= t < net.node_count):
            raise ModelError(f"pair ({s}, {t}) references a missing node")
        found = k_shortest_simple_paths(net, s, t, max_per_pair, max_length)
        if not found:
            raise ModelError(f"pair ({s}, {t}) has no simple path within {max_length} edges")
        for r in found:
            if r not in seen:
                seen.add(r)
                routes.append(r)
    return make_route_set(net, routes)


# ---------------------------------------------------------------------------
# Commodities


@dataclass(frozen=True)
class CommoditySpec:
    pairs: tuple
    matrix: sp.csr_matrix = field(compare=False)
    demand_lower: np.ndarray = field(compare=False)

    @property
    def n_commodities(self):
        return len(self.pairs)

    def to_dict(self):
        K = self.matrix.tocoo()
        return {
            "schema": "onp.commodity",
            "version": SCHEMA_VERSION,
            "pairs": [list(p) for p in self.pairs],
            "entries": sorted([int(i), int(j)] for i, j in zip(K.row, K.col)),
            "demand_lower": self.demand_lower.tolist(),
        }

    @classmethod
    def from_dict(cls, d, routes):
        _check_schema(d, "onp.commodity")
        per_pair = [[] for _ in d["pairs"]]
        for k, r in d["entries"]:
            per_pair[k].append(r)
        return build_commodity(routes, [tuple(p) for p in d["pairs"]], per_pair, d["demand_lower"])


def build_commodity(routes, pairs, route_indices_per_pair=None, demand_lower=None):
    """Assemble K.

    Default mode marks every route whose (source, sink) equals the pair;
    ``route_indices_per_pair`` selects the entries explicitly instead.
    """
    pairs = tuple((int(s), int(t)) for s, t in pairs)
    if demand_lower is None:
        demand_lower = np.zeros(len(pairs))
    demand_lower = np.asarray(demand_lower, dtype=float).reshape(-1)
    if demand_lower.shape != (len(pairs),):
        raise ModelError(f"demand_lower has length {demand_lower.size}, expected {len(pairs)}")
    if np.any(demand_lower < 0):
        raise ModelError("demand_lower must be nonnegative")

    rows, cols = [], []
    if route_indices_per_pair is None:
        for k, pair in enumerate(pairs):
            for r, st in enumerate(routes.source_sink):
                if st == pair:
                    rows.append(k)
                    cols.append(r)
    else:
        if len(route_indices_per_pair) != len(pairs):
            raise ModelError("need one route selection per pair")
        for k, (pair, sel) in enumerate(zip(pairs, route_indices_per_pair)):
            for r in sel:
                if not 0 <= r < routes.n_routes:
                    raise ModelError(f"route index {r} out of range")
                if routes.source_sink[r] != pair:
                    raise ModelError(
                        f"route {r} runs {routes.source_sink[r]} but commodity {k} is {pair}"
                    )
                rows.append(k)
                cols.append(r)
    K = sp.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(len(pairs), routes.n_routes)
    )
    K.sum_duplicates()
    K.data[:] = 1.0
    empty = np.flatnonzero(np.diff(K.indptr) == 0)
    if empty.size:
        raise ModelError(f"commodity {pairs[empty[0]]} is served by no route")
    return CommoditySpec(pairs, K, demand_lower)


# ---------------------------------------------------------------------------
# Fixtures

# Toy graph used to illustrate the structure of Q; not strongly connected.
TOY3_EDGES = ((0, 1), (2, 0), (2, 1))
TOY3_ROUTES = ((0,), (1,), (1, 0), (2,))

# Four-node verification network, 1-based node labels.
TOY4_EDGES_1BASED = ((1, 2), (2, 3), (3, 4), (4, 1), (2, 4), (4, 3))
TOY4_ROUTES_1BASED = (
    (1, 2), (1, 2, 3), (1, 2, 3, 4), (1, 2, 4),
    (2, 3), (2, 3, 4), (2, 3, 4, 1), (2, 4), (2, 4, 1),
    (3, 4), (3, 4, 1), (3, 4, 1, 2),
    (4, 1), (4, 1, 2), (4, 1, 2, 3), (4, 3),
)


def toy3_network():
    return make_network(3, TOY3_EDGES, check_connectivity=False)


def toy3_routes():
    return make_route_set(toy3_network(), TOY3_ROUTES)


def toy4_network():
    edges = [(a - 1, b - 1) for a, b in TOY4_EDGES_1BASED]
    return make_network(4, edges, node_labels=(1, 2, 3, 4))


def toy4_routes(net=None):
    net = net or toy4_network()
    node_paths = [tuple(v - 1 for v in path) for path in TOY4_ROUTES_1BASED]
    return make_route_set(net, routes_from_nodes(net, node_paths))
