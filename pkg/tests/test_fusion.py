import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedmesh.data import Dataset, FeatureSpec, Schema, numeric_schema, play_tennis
from fedmesh.errors import FusionError, TerminationSignal
from fedmesh.fusion import (
    COUNTS_REQUEST,
    CountsTable,
    GlobalModelState,
    Id3Fusion,
    ReplySet,
    SplitCandidates,
    coord_median_fuse,
    entropy,
    fedavg_fuse,
    grow_tree_centralized,
    id3_fuse_and_grow,
    id3_next_query,
    information_gain,
    iter_avg_fuse,
    make_fusion,
    next_query_avg,
    run_fusion_session,
    sync_query,
    tabulate_counts,
)
from fedmesh.localtrain import LocalTrainer
from fedmesh.model import DecisionTree, LinearModel, ModelUpdate, TreeNode, predict
from fedmesh.protocol import envelope_to_query, query_to_envelope

import oracles
from harness import federated_id3, wire_exchange

PT_DOMAINS = [3, 3, 2, 2]


def rs(*vectors, nsamples=None, names=None):
    names = names or [f"p{i}" for i in range(len(vectors))]
    return ReplySet(
        1,
        {
            pid: ModelUpdate({"w": np.asarray(v, dtype=float)}, nsamples=None if nsamples is None else nsamples[i])
            for i, (pid, v) in enumerate(zip(names, vectors))
        },
    )


def test_iter_avg_examples():
    assert iter_avg_fuse(rs([2, 4], [4, 6]))["w"].tolist() == [3, 5]
    v = np.array([0.1, -3.7, 1e-17])
    assert np.array_equal(iter_avg_fuse(rs(v))["w"], v)
    assert np.array_equal(iter_avg_fuse(rs(v, v, v, v, v))["w"], v)


def test_iter_avg_ignores_nsamples():
    assert iter_avg_fuse(rs([0.0], [4.0], nsamples=[1, 100]))["w"].tolist() == [2.0]


def test_fedavg_examples():
    assert fedavg_fuse(rs([1.0], [3.0], nsamples=[1, 3]))["w"].tolist() == [2.5]
    v = np.array([0.3, -1.1])
    out = fedavg_fuse(rs(v, [9.0, 9.0], [7.0, 7.0], nsamples=[5, 0, 0]))
    assert np.array_equal(out["w"], v)


def test_fedavg_errors():
    with pytest.raises(FusionError, match="FedAvg requires nsamples"):
        fedavg_fuse(rs([1.0], [2.0]))
    with pytest.raises(FusionError):
        fedavg_fuse(rs([1.0], [2.0], nsamples=[0, 0]))


def test_median_examples():
    assert coord_median_fuse(rs([1, 5], [2, 2], [9, 3]))["w"].tolist() == [2, 3]
    assert coord_median_fuse(rs([0, 0], [10, 10]))["w"].tolist() == [5, 5]


def test_median_robust_to_one_corruption():
    rng = np.random.default_rng(3)
    clean = [rng.normal(size=4) for _ in range(5)]
    bad = [v.copy() for v in clean]
    bad[2][1] = 1e9
    a = coord_median_fuse(rs(*clean))["w"]
    b = coord_median_fuse(rs(*bad))["w"]
    # the corrupted coordinate moves at most to a neighbouring order statistic; others stay put
    others = [0, 2, 3]
    assert np.array_equal(a[others], b[others])
    col = sorted(v[1] for v in clean)
    assert col[1] <= b[1] <= col[3]


@pytest.mark.parametrize("fuse", [iter_avg_fuse, coord_median_fuse])
def test_shape_mismatch(fuse):
    with pytest.raises(FusionError):
        fuse(rs([1.0, 2.0], [1.0]))
    with pytest.raises(FusionError):
        fuse(ReplySet(1, {}))
    bad = ReplySet(1, {"a": ModelUpdate({"w": np.zeros(2)}), "b": ModelUpdate({"v": np.zeros(2)})})
    with pytest.raises(FusionError):
        fuse(bad)


vectors = st.integers(1, 6).flatmap(
    lambda dim: st.lists(
        st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=dim, max_size=dim), min_size=1, max_size=6
    )
)


@given(vectors, st.data())
def test_weight_fusions_match_oracles(vecs, data):
    n = data.draw(st.lists(st.integers(0, 500), min_size=len(vecs), max_size=len(vecs)))
    if sum(n) == 0:
        n[0] = 1
    assert np.allclose(iter_avg_fuse(rs(*vecs))["w"], oracles.mean(vecs), rtol=0, atol=1e-12 * 1e3)
    assert np.allclose(fedavg_fuse(rs(*vecs, nsamples=n))["w"], oracles.weighted_mean(vecs, n), rtol=0, atol=1e-12 * 1e3)
    assert coord_median_fuse(rs(*vecs))["w"].tolist() == oracles.median(vecs)


@given(vectors, st.integers(1, 1000))
def test_fedavg_equal_counts_equals_iter_avg(vecs, n):
    a = fedavg_fuse(rs(*vecs, nsamples=[n] * len(vecs)))["w"]
    b = iter_avg_fuse(rs(*vecs))["w"]
    assert np.max(np.abs(a - b), initial=0.0) <= 1e-12 * max(1.0, np.max(np.abs(b)))


@given(vectors, st.randoms(use_true_random=False))
def test_fusions_permutation_invariant(vecs, rnd):
    names = [f"party{i:02d}" for i in range(len(vecs))]
    n = list(range(1, len(vecs) + 1))
    order = list(range(len(vecs)))
    rnd.shuffle(order)
    fwd = rs(*vecs, nsamples=n, names=names)
    perm = ReplySet(1, {names[i]: fwd.replies[names[i]] for i in order})
    for fuse in (iter_avg_fuse, fedavg_fuse, coord_median_fuse):
        assert fuse(fwd)["w"].tobytes() == fuse(perm)["w"].tobytes()


@given(vectors)
def test_median_within_bounds(vecs):
    out = coord_median_fuse(rs(*vecs))["w"]
    arr = np.array(vecs)
    assert (arr.min(axis=0) <= out).all() and (out <= arr.max(axis=0)).all()


# -- query generation --------------------------------------------------------


def test_next_query_avg():
    state = GlobalModelState(LinearModel(2, 2), max_rounds=3)
    q = next_query_avg(state, {"epochs": 3, "learning_rate": 0.1, "batch_size": 4, "max_rounds": 3})
    assert q.round == 1 and q.kind == "train_weights"
    assert all((v == 0).all() for v in q.payload.values())
    assert q.hyperparams == {"epochs": 3, "learning_rate": 0.1, "batch_size": 4}
    state.t = 3
    with pytest.raises(TerminationSignal) as exc:
        next_query_avg(state, {})
    assert exc.value.reason == "max_rounds"


def test_query_payload_is_a_copy():
    model = LinearModel(1, 2)
    q = next_query_avg(GlobalModelState(model, 2), {})
    q.payload["bias"][0] = 5.0
    assert model.weights["bias"][0] == 0.0


# -- entropy / information gain ---------------------------------------------


def test_play_tennis_root_entropy_and_gain():
    ds = play_tennis()
    cand = SplitCandidates((), (0, 1, 2, 3), ds.schema)
    counts = tabulate_counts(ds, cand)
    assert counts.node_total.tolist() == [9, 5]
    h = entropy(counts.node_total)
    gains = [information_gain(counts.node_total, counts.per_split[f]) for f in range(4)]
    rows = oracles.dataset_rows(ds)
    assert h == pytest.approx(oracles.entropy_bits([9, 5]), abs=1e-12)
    assert round(h, 3) == 0.940
    assert round(gains[0], 3) == 0.247
    for f in range(4):
        assert gains[f] == pytest.approx(oracles.info_gain(rows, f, PT_DOMAINS[f], 2), abs=1e-12)
    assert int(np.argmax(gains)) == 0


@given(st.integers(2, 9), st.integers(1, 50))
def test_entropy_uniform_and_pure(c, k):
    assert abs(entropy([k] * c) - math.log2(c)) <= 1e-12
    assert entropy([0] * (c - 1) + [k]) == 0.0
    assert entropy([0] * c) == 0.0


# -- counts tables -----------------------------------------------------------


def test_counts_table_consistency_and_addition():
    ds = play_tennis()
    cand = SplitCandidates(((0, 0),), (1, 2, 3), ds.schema)
    whole = tabulate_counts(ds, cand)
    assert whole.is_consistent()
    assert whole.node_total.tolist() == [2, 3]  # Sunny: 2 Yes, 3 No
    a, b = ds.subset(range(7)), ds.subset(range(7, 14))
    assert tabulate_counts(a, cand) + tabulate_counts(b, cand) == whole
    assert CountsTable.from_dict(whole.to_dict()) == whole
    with pytest.raises(FusionError):
        whole + tabulate_counts(ds, SplitCandidates((), (0,), ds.schema))


def test_split_candidates_reject_path_overlap():
    with pytest.raises(FusionError):
        SplitCandidates(((0, 1),), (0, 2), play_tennis().schema)


# -- ID3 ---------------------------------------------------------------------


def test_play_tennis_tree_matches_oracle_and_textbook():
    tree = grow_tree_centralized(play_tennis(), 8)
    assert tree.root.to_dict() == oracles.id3(oracles.dataset_rows(play_tennis()), PT_DOMAINS, 2, 8)
    root = tree.root
    assert root.feature == 0
    assert root.children[1].is_leaf and root.children[1].label == 0  # Overcast -> Yes
    assert root.children[0].feature == 2  # Sunny -> Humidity
    assert root.children[2].feature == 3  # Rain -> Wind


def test_id3_query_sequence():
    ds = play_tennis()
    tree = DecisionTree(ds.schema, 8)
    h = Id3Fusion(tree)
    state = GlobalModelState(tree, 100)
    q = id3_next_query(h, state)
    assert q.kind == COUNTS_REQUEST and q.round == 1
    assert q.payload.path == () and q.payload.candidate_features == (0, 1, 2, 3)
    res = id3_fuse_and_grow(h, state, ReplySet(1, {"a": ModelUpdate(counts=tabulate_counts(ds, q.payload))}))
    assert res.split == 0 and res.new_leaves == [(1, 0)]
    state.t = 1
    q2 = id3_next_query(h, state)
    assert q2.payload.path == ((0, 0),) and 0 not in q2.payload.candidate_features


def test_id3_fully_grown_terminates():
    ds = play_tennis()
    tree, state = federated_id3([ds])
    assert state.termination == "tree_complete"
    with pytest.raises(TerminationSignal):
        Id3Fusion.next_query(_finished_handler(tree), GlobalModelState(tree, 100))


def _finished_handler(tree):
    h = Id3Fusion(DecisionTree(tree.schema, tree.max_depth))
    h.pending.clear()
    return h


def test_id3_pure_root_is_a_leaf():
    ds = play_tennis()
    yes = ds.subset(np.flatnonzero(ds.y == 0))
    tree, state = federated_id3([yes])
    assert tree.root.is_leaf and tree.root.label == 0
    assert state.t == 1


def test_id3_tie_goes_to_lowest_feature():
    schema = Schema(
        (FeatureSpec("a", "categorical", ("0", "1")), FeatureSpec("b", "categorical", ("0", "1"))), ("n", "y")
    )
    # label = a = b: both features carry identical information
    ds = Dataset(np.array([[0, 0], [1, 1], [0, 0], [1, 1]]), np.array([0, 1, 0, 1]), schema)
    assert grow_tree_centralized(ds, 4).root.feature == 0
    # label = b XOR (a AND b) style symmetric table: swap columns to check the index rule
    ds2 = Dataset(np.array([[1, 1], [0, 0], [1, 1], [0, 0]]), np.array([1, 0, 1, 0]), schema)
    assert grow_tree_centralized(ds2, 4).root.feature == 0


def test_id3_empty_child_takes_parent_majority():
    ds = play_tennis()
    # drop every Overcast row: the Overcast child is empty
    sub = ds.subset(np.flatnonzero(ds.X[:, 0] != 1))
    tree = grow_tree_centralized(sub, 8)
    assert tree.root.feature == 0 or tree.root.children
    oracle = oracles.id3(oracles.dataset_rows(sub), PT_DOMAINS, 2, 8)
    assert tree.root.to_dict() == oracle


def test_id3_depth_bound():
    ds = play_tennis()
    for d in (1, 2, 3):
        tree, _ = federated_id3([ds], max_depth=d)
        assert tree.depth() <= d
        assert tree.root.to_dict() == oracles.id3(oracles.dataset_rows(ds), PT_DOMAINS, 2, d)


def test_id3_max_rounds_finalizes_majority_leaves():
    ds = play_tennis()
    tree, state = federated_id3([ds], max_rounds=1)
    assert state.termination == "max_rounds"
    assert tree.root.feature == 0
    assert all(c.is_leaf for c in tree.root.children.values())
    # Sunny majority No, Rain majority Yes
    assert tree.root.children[0].label == 1 and tree.root.children[2].label == 0


def test_id3_rejects_inconsistent_schemas():
    ds = play_tennis()
    tree = DecisionTree(ds.schema, 8)
    h = Id3Fusion(tree)
    state = GlobalModelState(tree, 100)
    h.next_query(state)
    wrong = tabulate_counts(ds, SplitCandidates((), (0, 1), ds.schema))
    with pytest.raises(FusionError):
        h.aggregate(ReplySet(1, {"a": ModelUpdate(counts=wrong)}))


def tree_paths_ok(node, seen=()):
    if node.is_leaf:
        return not node.children
    if node.feature in seen or not node.children:
        return False
    return all(tree_paths_ok(c, seen + (node.feature,)) for c in node.children.values())


def random_categorical(rng, n_rows):
    n_features = int(rng.integers(1, 5))
    domains = [int(rng.integers(1, 4)) for _ in range(n_features)]
    n_classes = int(rng.integers(2, 4))
    schema = Schema(
        tuple(FeatureSpec(f"f{j}", "categorical", tuple(str(v) for v in range(d))) for j, d in enumerate(domains)),
        tuple(f"c{c}" for c in range(n_classes)),
    )
    X = np.column_stack([rng.integers(0, d, n_rows) for d in domains]) if n_rows else np.zeros((0, n_features))
    return Dataset(X, rng.integers(0, n_classes, n_rows), schema), domains, n_classes


@given(st.integers(0, 2**32 - 1), st.integers(0, 40), st.integers(1, 4), st.integers(1, 5))
def test_federated_equals_centralized_property(seed, n_rows, n_parties, max_depth):
    rng = np.random.default_rng(seed)
    ds, domains, n_classes = random_categorical(rng, n_rows)
    owner = rng.integers(0, n_parties, n_rows)
    parts = [ds.subset(np.flatnonzero(owner == p)) for p in range(n_parties)]
    tree, state = federated_id3(parts, max_depth=max_depth)
    assert tree.root.to_dict() == oracles.id3(oracles.dataset_rows(ds), domains, n_classes, max_depth)
    assert tree.depth() <= max_depth and tree_paths_ok(tree.root)
    for summary in state.history:
        assert summary.participants == sorted(f"p{i}" for i in range(n_parties))


# -- sessions ----------------------------------------------------------------


def test_single_party_single_round_fixed_point():
    rng = np.random.default_rng(0)
    ds = Dataset(rng.normal(size=(20, 2)), rng.integers(0, 2, 20), numeric_schema(2, 2))
    hp = {"epochs": 2, "learning_rate": 0.1, "batch_size": 5}
    trainer = LocalTrainer(LinearModel(2, 2), ds, party_id="solo", seed=4)
    model = LinearModel(2, 2)
    state = GlobalModelState(model, 1)
    run_fusion_session(make_fusion("iter_avg", model, hp), wire_exchange({"solo": trainer}), state)
    assert state.t == 1 and state.termination == "max_rounds"
    assert all(np.array_equal(model.weights[k], trainer.model.weights[k]) for k in model.weights)


def test_session_rounds_increase_and_history():
    ds = play_tennis()
    tree, state = federated_id3([ds.subset(range(5)), ds.subset(range(5, 14))])
    rounds = [s.round for s in state.history]
    assert rounds == list(range(1, len(rounds) + 1))


def test_sync_query_payloads():
    lin = GlobalModelState(LinearModel(1, 2), 3)
    q = sync_query(lin)
    assert q.kind == "sync" and set(q.payload) == {"bias", "coef"} and q.round == 1
    tree = grow_tree_centralized(play_tennis(), 8)
    q = sync_query(GlobalModelState(tree, 3, t=3))
    assert q.payload["kind"] == "id3" and q.round == 3


def test_make_fusion_checks_model_kind():
    with pytest.raises(FusionError):
        make_fusion("id3", LinearModel(1, 2), {})
    with pytest.raises(FusionError):
        make_fusion("fedavg", DecisionTree(play_tennis().schema), {})


def test_reply_round_mismatch_is_rejected():
    model = LinearModel(1, 2)
    state = GlobalModelState(model, 2)

    def exchange(q):
        return ReplySet(q.round + 1, {"a": ModelUpdate(model.weights)})

    with pytest.raises(FusionError):
        run_fusion_session(make_fusion("iter_avg", model, {}), exchange, state)


def test_tree_node_leaf_has_no_children():
    leaf = TreeNode.leaf(3)
    assert leaf.is_leaf and leaf.depth() == 0 and not leaf.children


def test_exhaustive_small_schema_sync_matches():
    """A synced tree predicts like the aggregator's on every row of the schema."""
    ds = play_tennis()
    tree = grow_tree_centralized(ds, 8)
    trainer = LocalTrainer(DecisionTree(ds.schema), ds, reply_policy="counts")
    trainer.handle(envelope_to_query(query_to_envelope(sync_query(GlobalModelState(tree, 1, t=1)), "agg")))
    for row in itertools.product(*(range(d) for d in PT_DOMAINS)):
        assert predict(trainer.model, row) == predict(tree, row)
