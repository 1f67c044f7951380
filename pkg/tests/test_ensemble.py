import numpy as np
import pytest

from ensteal.datapool import Dataset, GaussianMixture, PoolState, make_synthetic, strip_labels
from ensteal.ensemble import (
    DEFAULT_HIDDEN_PROFILE,
    VICTIM_ARCH_INDEX,
    EnsembleSpec,
    EnsembleState,
    consensus_mean,
    default_member_configs,
    ensemble_predict,
    label_frequencies,
    load_ensemble,
    majority_vote,
    make_default_ensemble,
    member_labels_matrix,
    member_probs_matrix,
    save_ensemble,
    train_cycle,
)
from ensteal.errors import InvalidConfigError, InvalidInputError
from ensteal.numkit import MlpModel, MlpSpec
from ensteal.victim import QueryBudget, VictimOracle, default_victim_sgd, train_victim


def test_default_profile_capacities_strictly_increase():
    spec = make_default_ensemble(8, 4, rng_seed=0)
    counts = [m.param_count() for m in spec.members]
    assert counts == sorted(counts)
    assert len(set(counts)) == len(counts)
    assert spec.members[VICTIM_ARCH_INDEX].hidden_layers == (64, 64)
    assert spec.size == 5


def test_member_seeds_differ():
    spec = make_default_ensemble(8, 4, rng_seed=7)
    seeds = {m.rng_seed for m in spec.members}
    assert len(seeds) == 5


def test_ensemble_spec_validation():
    a = MlpSpec(4, (8,), 3, "relu", 0)
    b = MlpSpec(4, (8,), 3, "relu", 1)  # same architecture, different seed
    with pytest.raises(InvalidConfigError):
        EnsembleSpec((a, b))
    with pytest.raises(InvalidConfigError):
        EnsembleSpec((a,))
    c = MlpSpec(5, (16,), 3, "relu", 2)  # input_dim mismatch
    with pytest.raises(InvalidConfigError):
        EnsembleSpec((a, c))
    d = MlpSpec(4, (16,), 3, "relu", 2)
    with pytest.raises(InvalidConfigError):
        EnsembleSpec((a, d), victim_arch_index=5)


def test_default_member_configs():
    spec = make_default_ensemble(8, 4)
    cfgs = default_member_configs(spec, epochs=12, batch_size=32)
    lrs = [c.base_lr for c in cfgs]
    assert lrs == [0.01, 0.02, 0.02, 0.02, 0.02]  # smallest member trains slower
    for c in cfgs:
        assert c.momentum == 0.9
        assert c.lr_decay_factor == 0.1 and c.lr_decay_every == 30
        assert c.weight_decay == 0.0
        assert c.epochs == 12 and c.batch_size == 32


# ── voting arithmetic ────────────────────────────────────────────────


def test_label_frequencies():
    labels = np.array([[0, 0, 1, 2, 0], [3, 3, 3, 3, 3]]).T  # (members=5, rows=2)
    freq = label_frequencies(labels, num_classes=4)
    assert freq.shape == (2, 4)
    assert np.allclose(freq[0], [0.6, 0.2, 0.2, 0.0])
    assert np.allclose(freq[1], [0.0, 0.0, 0.0, 1.0])
    assert np.allclose(freq.sum(axis=1), 1.0)


def test_majority_vote_needs_strict_majority():
    # 5 members: 3 votes carry; a 2-2-1 split falls back to consensus argmax
    labels = np.array([[1, 1, 1, 0, 2], [0, 0, 1, 1, 2]]).T
    consensus = np.array([[0.1, 0.2, 0.7], [0.5, 0.4, 0.1]])
    out = majority_vote(labels, consensus)
    assert out[0] == 1  # clear majority
    assert out[1] == 0  # no majority: argmax of mean probabilities


def test_vote_matrices_shapes(small_pool):
    models = [
        MlpModel.initialize(MlpSpec(small_pool.dim, (h,), 4, "relu", i))
        for i, h in enumerate((4, 8, 12))
    ]
    X = small_pool.features[:7]
    probs = member_probs_matrix(models, X)
    assert probs.shape == (3, 7, 4)
    assert np.allclose(probs.sum(axis=2), 1.0)
    cons = consensus_mean(probs)
    assert cons.shape == (7, 4)
    assert np.allclose(cons, probs.mean(axis=0))
    labels = member_labels_matrix(models, X)
    assert labels.shape == (3, 7)
    pred = ensemble_predict(models, X)
    assert pred.shape == (7,)


# ── training cycles ──────────────────────────────────────────────────


@pytest.fixture(scope="module")
def trained_state():
    src = GaussianMixture(3, 6, 4.0)
    pool = PoolState(strip_labels(make_synthetic(src, 400, seed=21)))
    victim_train = make_synthetic(src, 800, seed=22)
    victim_test = make_synthetic(src, 300, seed=23)
    victim, _ = train_victim(victim_train, victim_test, cfg=default_victim_sgd(epochs=30), seed=5)
    oracle = VictimOracle(victim, QueryBudget(200))
    oracle.query_labels(list(range(0, 60)), pool)
    oracle.query_labels(list(range(300, 330)), pool)
    pool.convert_queried_to_validation(list(range(300, 330)))
    spec = make_default_ensemble(6, 3, rng_seed=77, hidden_profile=((4,), (8,), (12,)), victim_arch_index=None)
    state = EnsembleState(spec)
    cfgs = default_member_configs(spec, epochs=15)
    accs1 = train_cycle(state, pool, cfgs, seed=31)
    return state, pool, cfgs, accs1


def test_train_cycle_tracks_best(trained_state):
    state, pool, cfgs, accs1 = trained_state
    assert state.cycle == 1
    assert all(b is not None for b in state.best)
    for b, a in zip(state.best, accs1):
        assert b.val_accuracy == a
        assert b.cycle == 1
    assert len(accs1) == 3
    assert all(0.0 <= a <= 1.0 for a in accs1)


def test_train_cycle_best_replaced_only_on_improvement(trained_state):
    state, pool, cfgs, _ = trained_state
    before = [(b.model, b.val_accuracy, b.cycle) for b in state.best]
    accs2 = train_cycle(state, pool, cfgs, seed=32)
    assert state.cycle == 2
    for (m0, v0, c0), b, a2 in zip(before, state.best, accs2):
        if a2 > v0:
            assert b.cycle == 2 and b.val_accuracy == a2
        else:
            assert b.cycle == c0 and b.val_accuracy == v0
            assert b.model is m0  # checkpoint object untouched


def test_train_cycle_same_init_each_cycle(trained_state):
    state, pool, cfgs, _ = trained_state
    # members restart from their spec-seeded init: two cycles with the same
    # seed produce identical weights
    s1 = EnsembleState(state.spec)
    s2 = EnsembleState(state.spec)
    a1 = train_cycle(s1, pool, cfgs, seed=50)
    a2 = train_cycle(s2, pool, cfgs, seed=50)
    assert a1 == a2
    for m1, m2 in zip(s1.current, s2.current):
        assert np.array_equal(m1.params, m2.params)


def test_best_member_index(trained_state):
    state, _, _, _ = trained_state
    accs = [b.val_accuracy for b in state.best]
    assert state.best_member_index() == int(np.argmax(accs))


def test_best_models_requires_training():
    spec = make_default_ensemble(4, 3, hidden_profile=((4,), (6,)), victim_arch_index=None)
    state = EnsembleState(spec)
    with pytest.raises(InvalidInputError):
        state.best_models()


def test_train_cycle_needs_validation_rows():
    pool = PoolState(Dataset(np.random.default_rng(0).normal(size=(50, 4))))
    spec = make_default_ensemble(4, 3, hidden_profile=((4,), (6,)), victim_arch_index=None)
    state = EnsembleState(spec)
    cfgs = default_member_configs(spec, epochs=2)
    with pytest.raises(InvalidInputError):
        train_cycle(state, pool, cfgs, seed=0)


# ── persistence ──────────────────────────────────────────────────────


def test_ensemble_roundtrip(trained_state, tmp_path):
    state, _, _, _ = trained_state
    save_ensemble(state, tmp_path)
    back = load_ensemble(tmp_path)
    assert back.spec.size == state.spec.size
    assert back.cycle == state.cycle
    for b0, b1 in zip(state.best, back.best):
        assert b1.val_accuracy == b0.val_accuracy
        assert b1.cycle == b0.cycle
        assert np.array_equal(b1.model.params, b0.model.params)
        assert b1.model.spec.architecture() == b0.model.spec.architecture()
    # victim_arch_index can be supplied on load
    tagged = load_ensemble(tmp_path, victim_arch_index=1)
    assert tagged.spec.victim_arch_index == 1


def test_load_ensemble_missing_dir(tmp_path):
    with pytest.raises(InvalidInputError):
        load_ensemble(tmp_path / "nope")
