import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from failslow.errors import InvalidInputError, TraceFormatError
from failslow.model import (
    CommCall,
    FailSlowEvent,
    IterationSeries,
    ParallelTopology,
    TrafficModel,
    comm_volumes,
    encode_signature,
    link_id,
    param_count,
    param_count_approx,
    read_trace,
    write_trace,
)


def small_model(**kw):
    base = dict(layers=2, hidden=4, heads=1, head_dim=4, vocab=10, context=8)
    base.update(kw)
    return TrafficModel(**base)


# -- parameter count -------------------------------------------------------


def test_param_count_approximation_example():
    assert param_count_approx(small_model(layers=2, hidden=4)) == 384


def test_param_count_zeroed_terms():
    m = small_model(vocab=0, context=0, heads=0, head_dim=0, layers=3, hidden=5)
    assert param_count(m) == 3 * (8 * 25 + 5 * 5)


def test_param_count_gpt2_xl_close_to_approximation():
    m = TrafficModel(layers=48, hidden=1600, heads=25, head_dim=64, vocab=50257, context=1024)
    exact, approx = param_count(m), param_count_approx(m)
    assert abs(exact - approx) / exact < 0.15


@given(
    L=st.integers(1, 8),
    h=st.integers(1, 64),
    v=st.integers(1, 1000),
    n=st.integers(1, 512),
)
def test_exact_count_dominates_approximation(L, h, v, n):
    # with heads * head_dim == hidden the blocks alone give 12 L h^2
    m = TrafficModel(layers=L, hidden=h, heads=1, head_dim=h, vocab=v, context=n)
    assert param_count(m) >= param_count_approx(m)


# -- volumes ---------------------------------------------------------------


def test_tp_volume_zero_without_tensor_parallelism():
    topo = ParallelTopology.build(1, 2, 2)
    assert comm_volumes(small_model(), topo).tp_bytes == 0


def test_volumes_match_closed_forms():
    m = small_model(micro_batch=2, num_micro_batches=3, element_bytes=4, grad_bytes_factor=1.5)
    topo = ParallelTopology.build(2, 1, 3)
    v = comm_volumes(m, topo)
    b, mm, n, h, L, T, P, e = 2, 3, 8, 4, 2, 2, 3, 4
    assert v.tp_bytes == pytest.approx(8 * b * mm * n * h * L * (T - 1) / (P * T) * e)
    assert v.dp_bytes == pytest.approx(1.5 * param_count(m) / (T * P) * e)
    assert v.pp_bytes == pytest.approx(mm * b * n * h * e)


def test_pp_volume_defined_for_single_stage():
    v = comm_volumes(small_model(num_micro_batches=4), ParallelTopology.build(1, 2, 1))
    assert v.pp_bytes == 4 * 1 * 8 * 4 * 2


def test_dp_to_pp_ratio_grows_with_hidden():
    topo = ParallelTopology.build(1, 2, 2)

    def ratio(h):
        v = comm_volumes(TrafficModel(layers=4, hidden=h, heads=1, head_dim=h, vocab=0, context=128), topo)
        return v.dp_bytes / v.pp_bytes

    growth = ratio(1024) / ratio(64)
    assert 15.0 < growth < 16.5


@given(
    h=st.integers(256, 4096),
    L=st.integers(1, 96),
    n=st.integers(1, 4096),
    T=st.sampled_from([1, 2, 4, 8]),
    P=st.integers(1, 8),
)
@settings(max_examples=200)
def test_dp_dominates_pp(h, L, n, T, P):
    if L < P:
        L = P
    m = TrafficModel(layers=L, hidden=h, heads=1, head_dim=h, vocab=0, context=n)
    # the claim needs one stage's share of the weights to exceed one activation
    if 12 * L * h * h / (T * P) <= n * h:
        return
    v = comm_volumes(m, ParallelTopology.build(T, 1, P))
    assert v.dp_bytes > v.pp_bytes


# -- topology --------------------------------------------------------------


@given(T=st.integers(1, 4), D=st.integers(1, 4), P=st.integers(1, 4), per_node=st.sampled_from([1, 2, 4]))
def test_build_produces_valid_topology(T, D, P, per_node):
    if (D * P) % per_node:
        per_node = 1
    topo = ParallelTopology.build(T, D, P, gpus_per_node=T * per_node)
    topo.validate()
    assert topo.world_size == T * D * P
    for r in range(topo.world_size):
        assert topo.rank_of(*topo.coords(r)) == r
    for d in range(D):
        for p in range(P):
            assert len({topo.node_of(r) for r in topo.stage_ranks(d, p)}) == 1


def test_tp_group_split_across_nodes_rejected():
    topo = ParallelTopology.build(2, 2, 1)
    # swap one GPU of each TP group across the two nodes
    placement = [(0, 0), (1, 0), (0, 1), (1, 1)]
    with pytest.raises(InvalidInputError, match="spans nodes"):
        topo.with_placement(placement)
    with pytest.raises(InvalidInputError):
        ParallelTopology.build(2, 1, 1, gpus_per_node=1)


@given(seed=st.integers(0, 10_000))
def test_relabel_keeps_bijection(seed):
    import random

    topo = ParallelTopology.build(1, 2, 3)
    nodes = topo.nodes
    image = nodes[:]
    random.Random(seed).shuffle(image)
    new = topo.relabel_nodes(dict(zip(nodes, image)))
    new.validate()
    assert sorted(new.placement) == sorted(topo.placement)


def test_group_membership():
    topo = ParallelTopology.build(2, 2, 2)
    assert topo.dp_groups()[0] == [topo.rank_of(0, 0, 0), topo.rank_of(0, 1, 0)]
    assert topo.pp_groups()[0] == [topo.rank_of(0, 0, 0), topo.rank_of(0, 0, 1)]
    assert link_id(3, 1) == (1, 3)


# -- traces ----------------------------------------------------------------


def test_signature_is_stable_and_distinguishes_fields():
    a = encode_signature("allreduce", 3, 1024)
    assert a == encode_signature("allreduce", 3, 1500)  # same log2 bucket
    assert a != encode_signature("allgather", 3, 1024)
    assert a != encode_signature("allreduce", 4, 1024)
    assert a != encode_signature("allreduce", 3, 4096)


def test_trace_roundtrip(tmp_path):
    trace = {
        0: [CommCall(0, 0.0, "send", 1, 10), CommCall(0, 0.5, "allreduce", 2, 100)],
        1: [CommCall(1, 0.25, "recv", 1, 10)],
    }
    path = tmp_path / "t.csv"
    write_trace(path, trace)
    back = read_trace(path)
    assert back == trace


def test_trace_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("rank,timestamp_s,kind,group,bytes\n0,0.0,send,1,10\n0,zz,send,1,10\n")
    with pytest.raises(TraceFormatError) as exc:
        read_trace(path)
    assert exc.value.line == 3
    path.write_text("rank,timestamp_s,kind,group,bytes\n0,1.0,send,1,10\n0,0.5,send,1,10\n")
    with pytest.raises(TraceFormatError, match="line 3"):
        read_trace(path)
    path.write_text("rank,timestamp_s,kind,group,bytes\n0,1.0,teleport,1,10\n")
    with pytest.raises(TraceFormatError, match="line 2"):
        read_trace(path)
    path.write_text("rank,time,kind\n")
    with pytest.raises(TraceFormatError, match="line 1"):
        read_trace(path)


def test_empty_trace_file(tmp_path):
    path = tmp_path / "e.csv"
    path.write_text("")
    assert read_trace(path) == {}


# -- series and events -----------------------------------------------------


def test_series_invariants():
    s = IterationSeries.from_values([1.0, 2.0])
    assert len(s) == 2 and s.values.tolist() == [1.0, 2.0]
    with pytest.raises(InvalidInputError):
        IterationSeries(0, (1.0, 0.0), (0, 1))
    with pytest.raises(InvalidInputError):
        IterationSeries(0, (1.0,), (0, 1))


def test_event_invariants():
    assert FailSlowEvent(3).is_open
    with pytest.raises(InvalidInputError):
        FailSlowEvent(5, 5)
    with pytest.raises(InvalidInputError):
        FailSlowEvent(1, severity=0.9)
    with pytest.raises(InvalidInputError):
        FailSlowEvent(1, kind="cosmic")
    assert not math.isnan(FailSlowEvent(1, 4, "computation", (2,), 1.5).severity)
