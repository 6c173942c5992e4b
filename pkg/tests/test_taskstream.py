import itertools

import numpy as np
import pytest

from hepco.taskstream import (
    HeterogeneityConfig,
    assign_round,
    build_task_sequence,
    longtail_counts,
)


def _balanced(n_classes, per_class):
    labels = np.repeat(np.arange(n_classes), per_class)
    return labels, build_task_sequence(range(n_classes), 1, 0, labels)[0]


class TestTaskSequence:
    def test_cifar_split(self):
        s = build_task_sequence(range(100), 10, 0)
        assert [len(t.labels) for t in s.tasks] == [10] * 10

    def test_domainnet_split(self):
        s = build_task_sequence(range(345), 5, 0)
        assert [len(t.labels) for t in s.tasks] == [69] * 5

    def test_seed_changes_membership_not_sizes(self):
        a = build_task_sequence(range(4), 2, 0)
        b = build_task_sequence(range(4), 2, 5)
        assert [len(t.labels) for t in a.tasks] == [len(t.labels) for t in b.tasks] == [2, 2]
        seeds = {tuple(build_task_sequence(range(4), 2, s)[0].labels) for s in range(20)}
        assert len(seeds) > 1

    def test_not_divisible(self):
        with pytest.raises(ValueError):
            build_task_sequence(range(10), 3, 0)

    @pytest.mark.parametrize("n,k", [(20, 5), (100, 10), (12, 4)])
    def test_disjoint_and_covering(self, n, k):
        s = build_task_sequence(range(n), k, 1)
        for a, b in itertools.combinations(s.tasks, 2):
            assert not set(a.labels) & set(b.labels)
        assert sorted(itertools.chain.from_iterable(t.labels for t in s.tasks)) == list(range(n))

    def test_train_test_disjoint(self):
        labels = np.repeat(np.arange(6), 10)
        mask = np.tile(np.arange(10) < 7, 6)
        s = build_task_sequence(range(6), 3, 0, labels, mask)
        for t in s.tasks:
            assert not set(t.train_idx) & set(t.test_idx)
            assert set(labels[t.train_idx]) == set(t.labels)


class TestLongtail:
    def test_balanced(self):
        assert longtail_counts(37, 5, 1.0) == [37] * 5

    def test_two_classes(self):
        assert longtail_counts(100, 2, 0.01) == [100, 1]

    def test_three_classes(self):
        assert longtail_counts(100, 3, 0.04) == [100, 20, 4]

    def test_single_class(self):
        assert longtail_counts(42, 1, 0.1) == [42]


class TestAssignRound:
    def test_kappa_categories(self):
        labels, task = _balanced(10, 50)
        cfg = HeterogeneityConfig(gamma=0.1, kappa=0.6, beta=1.0, clients=5)
        for a in assign_round(task, labels, cfg, 0):
            assert len(a.categories) == 6

    def test_uniform_case(self):
        labels, task = _balanced(10, 500)
        cfg = HeterogeneityConfig(gamma=0.1, kappa=1.0, beta=1.0, clients=4)
        for a in assign_round(task, labels, cfg, 0):
            assert a.counts == {y: 50 for y in range(10)}

    def test_hand_checked_longtail(self):
        # kappa=0.5 of 4 classes -> 2 per client; n_max = round(0.5*100) = 50;
        # ranks 0, 1 -> 50 * 0.1**0 = 50 and 50 * 0.1**1 = 5
        labels, task = _balanced(4, 100)
        cfg = HeterogeneityConfig(gamma=0.5, kappa=0.5, beta=0.1, clients=6)
        for a in assign_round(task, labels, cfg, 2, seed=3):
            assert sorted(a.counts.values()) == [5, 50]

    @pytest.mark.parametrize("beta", [0.05, 0.3, 0.5, 0.9])
    def test_imbalance_ratio(self, beta):
        labels, task = _balanced(10, 1000)
        cfg = HeterogeneityConfig(gamma=0.2, kappa=0.6, beta=beta, clients=5)
        for a in assign_round(task, labels, cfg, 1):
            c = list(a.counts.values())
            assert beta - 0.05 <= min(c) / max(c) <= beta + 0.05

    def test_counts_and_labels_consistent(self):
        labels, task = _balanced(10, 80)
        cfg = HeterogeneityConfig(gamma=0.3, kappa=0.6, beta=0.2, clients=5)
        for a in assign_round(task, labels, cfg, 0):
            assert sum(a.counts.values()) == a.indices.size
            assert set(labels[a.indices]) <= set(a.categories)
            ys, cs = np.unique(labels[a.indices], return_counts=True)
            assert dict(zip(ys.tolist(), cs.tolist())) == a.counts
            assert len(set(a.indices.tolist())) == a.indices.size  # no repeats within a client

    def test_iid_when_beta_and_kappa_one(self):
        labels, task = _balanced(5, 60)
        cfg = HeterogeneityConfig(gamma=0.5, kappa=1.0, beta=1.0, clients=3)
        counts = [a.counts for a in assign_round(task, labels, cfg, 0)]
        assert all(c == counts[0] for c in counts)

    def test_pure_function(self):
        labels, task = _balanced(10, 40)
        cfg = HeterogeneityConfig(gamma=0.5, kappa=0.6, beta=0.5, clients=4)
        a = assign_round(task, labels, cfg, 3)
        assign_round(task, labels, cfg, 2)  # an earlier round computed in between changes nothing
        b = assign_round(task, labels, cfg, 3)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.indices, y.indices)
            assert x.counts == y.counts

    def test_rounds_differ(self):
        labels, task = _balanced(10, 40)
        cfg = HeterogeneityConfig(gamma=0.5, kappa=0.6, clients=4)
        r0 = [a.categories for a in assign_round(task, labels, cfg, 0)]
        r1 = [a.categories for a in assign_round(task, labels, cfg, 1)]
        assert r0 != r1

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            HeterogeneityConfig(gamma=0.0)
        with pytest.raises(ValueError):
            HeterogeneityConfig(beta=1.5)
        with pytest.raises(ValueError):
            HeterogeneityConfig(clients=0)
