import numpy as np
import pytest

from graphda.datasets import Dataset, Domain
from graphda.model import Model, ModelConfig
from graphda.pseudo import (
    PseudoState,
    assign_pseudo_labels,
    label_from_probs,
    pseudo_coverage,
    write_pseudo_csv,
)


def _target(n=20, dim=3, m=2, seed=0):
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, dim)), np.full(n, -1), Domain.TARGET, m)


def _model(dim=3, m=2, seed=0):
    cfg = ModelConfig(input_dims=(dim,), num_classes=m, hidden=8, phi_dim=8,
                      backbone_hidden=8)
    return Model.init(cfg, np.random.default_rng(seed))


class TestLabelFromProbs:
    def test_confident_row_assigned(self):
        labels, conf = label_from_probs([[0.98, 0.02]], 0.97)
        assert labels.tolist() == [0]
        assert conf[0] == 0.98

    def test_uniform_row_unassigned(self):
        labels, _ = label_from_probs([[0.5, 0.5]], 0.97)
        assert labels.tolist() == [-1]

    def test_threshold_is_strict(self):
        labels, conf = label_from_probs([[0.97, 0.03]], 0.97)
        assert labels.tolist() == [-1]
        assert conf[0] == 0.97  # confidence still recorded

    def test_argmax_class_chosen(self):
        labels, conf = label_from_probs([[0.01, 0.99], [0.992, 0.008]], 0.97)
        assert labels.tolist() == [1, 0]
        assert np.allclose(conf, [0.99, 0.992])

    def test_monotone_in_epsilon(self):
        rng = np.random.default_rng(1)
        raw = rng.dirichlet(np.ones(3) * 0.3, size=200)
        prev = None
        for eps in (0.40, 0.60, 0.80, 0.95):
            labels, _ = label_from_probs(raw, eps)
            assigned = set(np.nonzero(labels != -1)[0].tolist())
            if prev is not None:
                assert assigned <= prev
            prev = assigned

    def test_epsilon_bounds(self):
        with pytest.raises(ValueError):
            label_from_probs([[0.9, 0.1]], 0.5)  # not above 1/m
        with pytest.raises(ValueError):
            label_from_probs([[0.9, 0.1]], 1.0)
        label_from_probs([[0.9, 0.1]], 0.5001)  # just inside is fine


class TestAssign:
    def test_labels_match_inference_argmax(self):
        model, tgt = _model(seed=2), _target(seed=3)
        state = assign_pseudo_labels(model, tgt, 0.6, epoch=4)
        probs = model.infer(tgt.features).probs.data
        assigned = state.labels != -1
        assert np.array_equal(state.labels[assigned], np.argmax(probs, axis=1)[assigned])
        assert np.all(state.confidence[assigned] > 0.6)
        assert state.epoch == 4 and state.epsilon == 0.6

    def test_chunking_does_not_change_result(self):
        model, tgt = _model(seed=4), _target(n=37, seed=5)
        a = assign_pseudo_labels(model, tgt, 0.55, chunk=3)
        b = assign_pseudo_labels(model, tgt, 0.55, chunk=1000)
        assert np.array_equal(a.labels, b.labels)
        assert np.allclose(a.confidence, b.confidence, atol=1e-12)

    def test_full_reassignment_revokes(self):
        model, tgt = _model(seed=1), _target(n=10, seed=7)
        prior = PseudoState(labels=np.zeros(10, dtype=np.int64),
                            confidence=np.full(10, 0.999), epoch=0, epsilon=0.97)
        state = assign_pseudo_labels(model, tgt, 0.97, epoch=1, prior=prior)
        # fresh random-init model is nowhere near 0.97 confident
        assert np.all(state.labels == -1)

    def test_sticky_keeps_but_updates_on_confidence(self):
        model, tgt = _model(seed=8), _target(n=6, seed=9)
        prior = PseudoState(labels=np.array([1, -1, 0, 1, -1, 0]),
                            confidence=np.array([0.99, 0.3, 0.98, 0.995, 0.4, 0.99]),
                            epoch=0, epsilon=0.97)
        state = assign_pseudo_labels(model, tgt, 0.97, epoch=1, prior=prior,
                                     sticky=True)
        probs = model.infer(tgt.features).probs.data
        fresh = probs.max(axis=1) > 0.97
        for i in range(6):
            if fresh[i]:
                assert state.labels[i] == int(np.argmax(probs[i]))
            elif prior.labels[i] != -1:
                assert state.labels[i] == prior.labels[i]
                assert state.confidence[i] == prior.confidence[i]
            else:
                assert state.labels[i] == -1

    def test_epsilon_validated_against_class_count(self):
        model, tgt = _model(m=4, seed=10), _target(m=4, seed=11)
        assign_pseudo_labels(model, tgt, 0.26)  # 1/m = 0.25
        with pytest.raises(ValueError):
            assign_pseudo_labels(model, tgt, 0.25)


class TestCoverage:
    def test_fresh_model_high_epsilon_gives_zero(self):
        # an untrained model is rarely 0.97-confident; not guaranteed for
        # every init draw, so the seed is pinned to a typical one
        model, tgt = _model(seed=11), _target(n=50, seed=13)
        state = assign_pseudo_labels(model, tgt, 0.97)
        assert pseudo_coverage(state) == 0.0

    def test_threshold_just_above_uniform_gives_full_coverage(self):
        labels, conf = label_from_probs([[0.6, 0.4], [0.3, 0.7], [0.51, 0.49]], 0.500001)
        state = PseudoState(labels=labels, confidence=conf, epoch=0, epsilon=0.500001)
        assert pseudo_coverage(state) == 1.0

    def test_all_unassigned(self):
        state = PseudoState(labels=np.full(8, -1), confidence=np.full(8, 0.5),
                            epoch=0, epsilon=0.97)
        assert pseudo_coverage(state) == 0.0


class TestStateInvariants:
    def test_assigned_label_requires_confidence_above_epsilon(self):
        with pytest.raises(ValueError):
            PseudoState(labels=np.array([0]), confidence=np.array([0.9]),
                        epoch=0, epsilon=0.97)

    def test_immutable(self):
        state = PseudoState(labels=np.array([-1]), confidence=np.array([0.5]),
                            epoch=0, epsilon=0.97)
        with pytest.raises(ValueError):
            state.labels[0] = 1


class TestCsvSnapshot:
    def test_snapshot_layout_and_roundtrip(self, tmp_path):
        labels = np.array([0, -1, 1])
        conf = np.array([0.9812345678901234, 0.51, 0.999])
        state = PseudoState(labels=labels, confidence=conf, epoch=7, epsilon=0.5001)
        p = tmp_path / "pseudo.csv"
        write_pseudo_csv(p, state)
        lines = p.read_text().splitlines()
        assert lines[0] == "sample_id,label,confidence,epoch"
        assert len(lines) == 4
        for i, line in enumerate(lines[1:]):
            sid, lab, c, ep = line.split(",")
            assert (int(sid), int(lab), int(ep)) == (i, labels[i], 7)
            assert float(c) == conf[i]  # repr round-trips exactly

    def test_byte_identical_rewrites(self, tmp_path):
        state = PseudoState(labels=np.array([1, -1]), confidence=np.array([0.98, 0.2]),
                            epoch=3, epsilon=0.9)
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        write_pseudo_csv(a, state)
        write_pseudo_csv(b, state)
        assert a.read_bytes() == b.read_bytes()
