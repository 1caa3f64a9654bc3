import io

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from onp import network as nw
from onp.errors import ModelError, ParseError
from onp.problem import load_budget, sioux_falls_network

TWO_NODE = """<NUMBER OF NODES> 2
<NUMBER OF LINKS> 2
<END OF METADATA>
~ init term cap
1 2 10 ;
2 1 10 ;
"""

TOY3_FILE = """<NUMBER OF NODES> 3
<NUMBER OF LINKS> 3
<END OF METADATA>
1 2 ;
3 1 ;
3 2 ;
"""


def test_sioux_falls_size():
    net = sioux_falls_network()
    assert (net.node_count, net.edge_count) == (24, 76)
    assert "free_flow_time" in net.attributes and "capacity" in net.attributes


def test_two_node_loads():
    net = nw.load_tntp(io.StringIO(TWO_NODE))
    assert net.node_count == 2 and net.edges == ((0, 1), (1, 0))
    assert net.attributes["capacity"].tolist() == [10.0, 10.0]


def test_not_strongly_connected():
    with pytest.raises(ModelError, match="not strongly connected"):
        nw.load_tntp(io.StringIO(TOY3_FILE))


def test_toy3_fixture_skips_check():
    net = nw.toy3_network()
    assert net.unreachable_pair() is not None
    assert nw.toy3_routes().assignment.toarray().tolist() == [[1, 0, 0], [0, 1, 0], [1, 1, 0], [0, 0, 1]]


@pytest.mark.parametrize("text,match", [
    ("<NUMBER OF NODES> x\n<NUMBER OF LINKS> 1\n<END OF METADATA>\n1 2 ;\n", "NUMBER OF NODES"),
    ("<NUMBER OF NODES> 2\n<END OF METADATA>\n1 2 ;\n", "NUMBER OF LINKS"),
])
def test_bad_metadata(text, match):
    with pytest.raises(ParseError, match=match):
        nw.load_tntp(io.StringIO(text))


def test_self_loop_and_duplicate():
    with pytest.raises(ModelError, match="self-loop"):
        nw.make_network(2, [(0, 0), (0, 1), (1, 0)])
    with pytest.raises(ModelError, match="duplicate"):
        nw.make_network(2, [(0, 1), (0, 1), (1, 0)])


def test_tntp_roundtrip():
    net = sioux_falls_network()
    again = nw.load_tntp(io.StringIO(nw.dump_tntp(net)))
    assert again.node_count == net.node_count and again.edges == net.edges
    np.testing.assert_array_equal(again.attributes["capacity"], net.attributes["capacity"])


def test_toy4_route_table():
    net = nw.toy4_network()
    rs = nw.toy4_routes(net)
    table = [tuple(net.node_labels[v] for v in rs.nodes(net, r)) for r in range(rs.n_routes)]
    assert table == [
        (1, 2), (1, 2, 3), (1, 2, 3, 4), (1, 2, 4),
        (2, 3), (2, 3, 4), (2, 3, 4, 1), (2, 4), (2, 4, 1),
        (3, 4), (3, 4, 1), (3, 4, 1, 2),
        (4, 1), (4, 1, 2), (4, 1, 2, 3), (4, 3),
    ]


def test_toy4_enumeration_covers_table():
    # All simple paths on the toy graph: the fixture's 16 plus two more.
    net = nw.toy4_network()
    pairs = [(a, b) for a in range(4) for b in range(4) if a != b]
    rs = nw.enumerate_routes(net, pairs, 50, 3)
    assert rs.n_routes == 18
    assert set(nw.toy4_routes(net).routes) <= set(rs.routes)


def test_two_node_single_route():
    net = nw.load_tntp(io.StringIO(TWO_NODE))
    rs = nw.enumerate_routes(net, [(0, 1)], 5, 3)
    assert rs.routes == ((0,),)


def test_sioux_falls_route_budget():
    b = load_budget()
    net = sioux_falls_network()
    pairs = [(a, c) for a in range(24) for c in range(24) if a != c][: b["pair_count"]]
    rs = nw.enumerate_routes(net, pairs, b["max_per_pair"], b["max_length"])
    assert rs.n_routes == b["expected_routes"] == 3298


def test_enumerate_errors():
    net = nw.toy4_network()
    with pytest.raises(ModelError):
        nw.enumerate_routes(net, [(0, 0)], 1, 3)
    with pytest.raises(ModelError, match="no simple path"):
        nw.enumerate_routes(net, [(0, 3)], 1, 1)


def test_commodity_toy_explicit():
    rs = nw.toy4_routes()
    com = nw.build_commodity(rs, [(0, 2), (1, 2)], [[1], [4]], [0.0, 0.0])
    K = com.matrix.toarray()
    assert K.sum() == 2 and K[0, 1] == 1 and K[1, 4] == 1
    assert abs(com.matrix.nnz / K.size - 0.0625) < 1e-15


def test_commodity_mismatch():
    rs = nw.toy4_routes()
    with pytest.raises(ModelError, match="runs"):
        nw.build_commodity(rs, [(0, 2)], [[0]])


def test_commodity_default_row():
    net = nw.make_network(3, [(0, 1), (1, 2), (0, 2), (2, 0), (1, 0)])
    rs = nw.make_route_set(net, [(0, 1), (2,)])
    com = nw.build_commodity(rs, [(0, 2)])
    assert com.matrix.toarray().tolist() == [[1.0, 1.0]]
    assert com.demand_lower.tolist() == [0.0]


def test_route_validation():
    net = nw.toy4_network()
    with pytest.raises(ModelError, match="contiguous"):
        nw.make_route_set(net, [(0, 2)])
    with pytest.raises(ModelError, match="repeats"):
        nw.make_route_set(net, [(0, 1, 2, 3)])


def test_json_roundtrips():
    net = nw.toy4_network()
    rs = nw.toy4_routes(net)
    com = nw.build_commodity(rs, [(0, 2), (1, 2)], [[1], [4]], [0.5, 0.25])
    net2 = nw.Network.from_dict(net.to_dict())
    rs2 = nw.RouteSet.from_dict(rs.to_dict(), net2)
    com2 = nw.CommoditySpec.from_dict(com.to_dict(), rs2)
    assert net2 == net and rs2.routes == rs.routes
    assert (com2.matrix != com.matrix).nnz == 0 and com2.demand_lower.tolist() == [0.5, 0.25]


@given(st.integers(2, 5), st.integers(1, 4), st.integers(0, 10_000))
def test_assignment_properties(n_pairs, k, seed):
    net = sioux_falls_network()
    rng = np.random.default_rng(seed)
    nodes = rng.choice(24, size=(n_pairs, 2), replace=True)
    pairs = [(int(a), int(b)) for a, b in nodes if a != b]
    if not pairs:
        return
    rs = nw.enumerate_routes(net, pairs, k, 8)
    lengths = np.array([len(r) for r in rs.routes])
    assert rs.assignment.nnz == lengths.sum()
    np.testing.assert_array_equal(np.asarray(rs.assignment.sum(axis=1)).ravel(), lengths)
    again = nw.enumerate_routes(net, pairs, k, 8)
    assert again.routes == rs.routes
    com = nw.build_commodity(rs, pairs[:1])
    K = com.matrix.toarray()
    for r, ss in enumerate(rs.source_sink):
        assert (K[0, r] == 1) == (ss == pairs[0])
