"""Structure, traversal, and round-trip tests for the network model."""

import pytest

from dsomarket.network import Bus, Network, NetworkError, TimeHorizon, load_network, save_network
from dsomarket.scenario import network_15bus


def two_bus() -> Network:
    return Network(
        [
            Bus(0, None, Vmin=1.0, Vmax=1.0),
            Bus(1, 0, R=0.01, X=0.02, S=1.0, Vmin=0.81, Vmax=1.21),
        ]
    )


def test_two_bus_chain_is_valid():
    net = two_bus()
    assert net.num_buses == 2
    assert net.path_to_root(1) == [1, 0]
    assert net.children(0) == (1,)
    assert net.children(1) == ()


def test_15bus_topology():
    net = network_15bus()
    assert net.path_to_root(11) == [11, 10, 9, 8, 3, 2, 1, 0]
    assert set(net.children(3)) == {4, 8}
    assert set(net.children(0)) == {1, 12}
    assert net.path_to_root(0) == [0]
    assert set(net.leaves()) == {6, 7, 11, 14}


def test_edge_count_matches_tree():
    net = network_15bus()
    assert sum(len(net.children(n)) for n in range(net.num_buses)) == net.num_buses - 1


def test_path_head_is_ancestor():
    net = network_15bus()
    for n in net.non_root_ids:
        assert net.path_to_root(n)[1] == net.ancestor(n)
        assert len(net.path_to_root(n)) <= net.num_buses


def test_subtree():
    net = network_15bus()
    assert set(net.subtree(8)) == {8, 7, 9, 10, 11}
    assert set(net.subtree(12)) == {12, 13, 14}


def test_cycle_detected():
    with pytest.raises(NetworkError, match="cycle|reach"):
        Network(
            [
                Bus(0, None, Vmin=1.0, Vmax=1.0),
                Bus(1, 2, Vmin=0.8, Vmax=1.2),
                Bus(2, 1, Vmin=0.8, Vmax=1.2),
            ]
        )


def test_dangling_ancestor():
    with pytest.raises(NetworkError, match="dangling"):
        Network([Bus(0, None, Vmin=1.0, Vmax=1.0), Bus(1, 5)])


def test_multiple_roots_rejected():
    with pytest.raises(NetworkError):
        Network([Bus(0, None, Vmin=1.0, Vmax=1.0), Bus(1, None)])


def test_noncontiguous_ids_rejected():
    with pytest.raises(NetworkError, match="contiguous"):
        Network([Bus(0, None, Vmin=1.0, Vmax=1.0), Bus(2, 0)])


def test_root_line_parameters_must_vanish():
    with pytest.raises(NetworkError, match="root"):
        Network([Bus(0, None, R=0.1, Vmin=1.0, Vmax=1.0), Bus(1, 0)])


def test_negative_capacity_rejected():
    with pytest.raises(NetworkError, match="negative"):
        Network([Bus(0, None, Vmin=1.0, Vmax=1.0), Bus(1, 0, S=-1.0)])


def test_horizon_validation():
    assert TimeHorizon(2).periods == range(2)
    with pytest.raises(NetworkError):
        TimeHorizon(0)


def test_round_trip_bit_exact(tmp_path):
    net = network_15bus()
    path = tmp_path / "net.json"
    save_network(net, str(path))
    back = load_network(str(path))
    assert back.num_buses == net.num_buses
    for a, b in zip(net.buses, back.buses):
        assert a == b  # dataclass equality covers every numeric field exactly


def test_load_rejects_garbage(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(NetworkError, match="unparseable"):
        load_network(str(path))
    path.write_text('{"buses": [{"id": 0}]}')
    with pytest.raises(NetworkError):
        load_network(str(path))  # missing ancestor key
