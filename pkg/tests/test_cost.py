import json

import pytest

from derivopt.cost import CostParams, estimate, explain, rank
from derivopt.errors import EmptyCandidates
from derivopt.frontend import load_program
from derivopt.graph import OperatorGraph
from derivopt.search import Candidate


def _mm(n=2):
    return load_program({"tensors": [{"name": "A", "shape": [n, n]}, {"name": "B", "shape": [n, n]},
                                     {"name": "C", "shape": [n, n]}],
                         "nodes": [{"kind": "Matmul", "inputs": ["A", "B"], "outputs": ["C"]}], "outputs": ["C"]})


def test_matmul_closed_form():
    est = estimate(_mm())
    assert est.flops == 16
    assert est.bytes_moved == (4 + 4 + 4) * 4
    assert est.launches == 1
    assert est.total == pytest.approx(16 / 1e12 + 48 / 1e11 + 5e-6)


def test_conv_flops(fixtures_dir):
    assert estimate(load_program(fixtures_dir / "conv3x3.json")).flops == 2 * 4 * 4 * 2 * 2 * 3 * 3


def test_empty_graph_costs_nothing():
    assert estimate(OperatorGraph()).total == 0


def test_rank_ties_prefer_fewer_nodes():
    single = Candidate(_mm(), [])
    assert rank([single]) == [single]
    pair = _mm()
    pair.tensors["D"] = pair.tensors["C"].__class__("D", (2, 2))
    pair.nodes.append(type(pair.nodes[0])("Add", {}, ("C", "C"), ("D",)))
    big, small = Candidate(pair, []), Candidate(_mm(), [])
    big.cost, small.cost = estimate(big.graph), estimate(small.graph)
    big.cost.total = small.cost.total
    assert rank([big, small]) == [small, big]
    with pytest.raises(EmptyCandidates):
        rank([])


def test_params_file_and_validation(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"flops_per_s": 2e12, "bytes_per_s": 5e10, "launch_s": 1e-6}))
    params = CostParams.load(p)
    assert estimate(_mm(), params).total == pytest.approx(16 / 2e12 + 48 / 5e10 + 1e-6)
    with pytest.raises(ValueError):
        CostParams(flops_per_s=0)


def test_explain_lists_every_node():
    text = explain(_mm())
    assert "Matmul" in text and "total" in text
