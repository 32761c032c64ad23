import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from idm import IGNORE_INDEX
from idm.datagen import LabeledSample
from idm.errors import ConfigurationError, ContractError
from idm.model import Arch, init_model, make_teacher, zero_classifier_
from idm.selection import (
    MemoryBank,
    SelectionConfig,
    class_count,
    mean_entropy,
    prediction_weight,
    select_batch,
    similarity_gate,
    teacher_outputs,
)
from oracles import entropy_loop, replay_selection


# --- entropy --------------------------------------------------------------------


def test_uniform_entropy_is_one():
    assert mean_entropy(np.full((5, 5, 7), 1 / 7)) == pytest.approx(1.0)


def test_one_hot_entropy_is_zero():
    p = np.zeros((5, 5, 4))
    p[..., 2] = 1
    assert mean_entropy(p) == 0.0


def test_binary_pixels():
    assert mean_entropy(np.array([[[0.5, 0.5]]])) == pytest.approx(1.0)
    # -(0.9 ln 0.9 + 0.1 ln 0.1) / ln 2 = 0.46900
    assert mean_entropy(np.array([[[0.9, 0.1]]])) == pytest.approx(0.469, abs=1e-3)


def test_entropy_matches_loop(rng):
    logits = rng.normal(size=(6, 5, 4))
    p = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    assert mean_entropy(p) == pytest.approx(entropy_loop(p), abs=1e-12)


# --- prediction weight -----------------------------------------------------------


def test_weight_zero_at_threshold():
    assert prediction_weight(0.015, 0.015) == 0.0
    assert prediction_weight(0.01, 0.015) == 0.0


def test_weight_exp_ln2():
    assert prediction_weight(0.015 + math.log(2), 0.015) == pytest.approx(2.0)


def test_weight_example():
    assert prediction_weight(0.5, 0.015) == pytest.approx(1.624, abs=1e-3)


# --- similarity gate -----------------------------------------------------------------

CFG = SelectionConfig(lambda_ent=0.015, lambda_sim=0.5, k=2, batch_budget=2)


def test_identical_to_bank_is_rejected():
    v = np.array([0.2, 0.3, 0.5])
    assert similarity_gate(v, 3, MemoryBank(v, 1), CFG) == 0


def test_empty_bank_accepts():
    assert similarity_gate(np.array([0.2, 0.3, 0.5]), 3, MemoryBank(), CFG) == 1


def test_class_gate_is_strict():
    a = np.array([0.5, 0.5, 0.0, 0.0])
    bank = MemoryBank(np.array([0.0, 0.0, 0.5, 0.5]), 1)  # cosine 0
    assert similarity_gate(a, 2, bank, CFG) == 0
    assert similarity_gate(a, 3, bank, CFG) == 1


def test_zero_vector_rejected():
    with pytest.raises(ContractError):
        similarity_gate(np.zeros(3), 5, MemoryBank(), CFG)


@pytest.mark.parametrize(
    "kw", [dict(lambda_ent=0), dict(lambda_sim=-1), dict(lambda_sim=1.2), dict(k=0), dict(batch_budget=0)]
)
def test_config_validation(kw):
    with pytest.raises(ConfigurationError):
        SelectionConfig(**kw).validate()


# --- class count --------------------------------------------------------------------


def test_class_count():
    assert class_count(np.full((4, 4), IGNORE_INDEX)) == 0
    assert class_count(np.full((4, 4), 3)) == 1
    lab = np.zeros((4, 4), np.int64)
    lab[0, 0], lab[1, 1] = 3, 7
    lab[2, 2] = IGNORE_INDEX
    assert class_count(lab) == 3


# --- memory bank ----------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.floats(0.01, 1.0), min_size=4, max_size=4), min_size=1, max_size=20))
def test_bank_is_arithmetic_mean(vectors):
    vecs = [np.array(v) / np.sum(v) for v in vectors]
    bank = MemoryBank()
    for v in vecs:
        bank = bank.fold(v)
    assert bank.count == len(vecs)
    np.testing.assert_allclose(bank.mean_output, np.mean(vecs, axis=0), atol=1e-6)
    assert bank.mean_output.sum() == pytest.approx(1.0, abs=1e-5)


# --- select_batch -------------------------------------------------------------------------


def _candidates(rng, n, size=12, classes=4):
    out = []
    for i in range(n):
        img = rng.random((size, size, 3)).astype(np.float64)
        lab = rng.integers(0, classes, size=(size, size))
        if i % 5 == 0:
            lab[:] = 0  # single-class images fail the class gate
        out.append(LabeledSample(img, lab, f"c{i:03d}"))
    return out


@pytest.fixture
def teacher():
    return make_teacher(init_model(Arch(widths=(4, 6, 8), feature_dim=5, num_classes=4), seed=0, dtype=torch.float64))


def test_all_below_entropy_threshold(teacher, rng):
    zero_classifier_(teacher.model)
    with torch.no_grad():
        teacher.model.classifier.bias[1] = 60.0  # near one-hot -> entropy ~ 0
    cfg = SelectionConfig(lambda_ent=0.015, lambda_sim=0.5, k=1, batch_budget=2)
    accepted, bank, records = select_batch(_candidates(rng, 6), teacher, MemoryBank(), cfg)
    assert accepted == []
    assert bank.empty
    assert len(records) == 6 and all(r.weight == 0 for r in records)


def test_duplicate_candidate_rejected(teacher, rng):
    c = _candidates(rng, 2)[1]
    cfg = SelectionConfig(lambda_ent=0.015, lambda_sim=0.99, k=1, batch_budget=2)
    accepted, bank, records = select_batch([c, c], teacher, MemoryBank(), cfg)
    assert len(accepted) == 1 and accepted[0][0] is c
    assert records[1].similarity == pytest.approx(1.0) and records[1].w_sim == 0


def test_budget_caps_acceptance(teacher, rng):
    cfg = SelectionConfig(lambda_ent=0.015, lambda_sim=1.0, k=1, batch_budget=3)
    cands = _candidates(rng, 20)
    accepted, bank, records = select_batch(cands, teacher, MemoryBank(), cfg)
    assert len(accepted) <= 3
    assert bank.count == len(accepted)
    assert sum(r.accepted for r in records) == len(accepted)


def test_selection_replay_and_invariants(teacher):
    rng = np.random.default_rng(50)
    cands = _candidates(rng, 50)
    cfg = SelectionConfig(lambda_ent=0.9, lambda_sim=0.9999, k=2, batch_budget=50)
    before = [p.clone() for p in teacher.model.parameters()]
    accepted, bank, records = select_batch(cands, teacher, MemoryBank(), cfg)
    assert all(torch.equal(a, b) for a, b in zip(before, teacher.model.parameters()))

    probs = [teacher_outputs(teacher, c.image[None])[0] for c in cands]
    expected, exp_bank = replay_selection(
        probs, [class_count(c.label) for c in cands], cfg.lambda_ent, cfg.lambda_sim, cfg.k, cfg.batch_budget
    )
    assert [s.id for s, _ in accepted] == [cands[n].id for n, _ in expected]
    assert 0 < len(accepted) < 50
    for (_, w), (_, we) in zip(accepted, expected):
        assert w == pytest.approx(we, abs=1e-9)
    np.testing.assert_allclose(bank.mean_output, exp_bank, atol=1e-9)

    for r in records:
        gates = (r.entropy > cfg.lambda_ent) and (r.class_count > cfg.k) and r.w_sim == 1
        assert (r.weight > 0) == gates
        assert r.weight == r.w_pred * r.w_sim
        assert 0 <= r.entropy <= 1

    again = select_batch(cands, teacher, MemoryBank(), cfg)
    assert [s.id for s, _ in again[0]] == [s.id for s, _ in accepted]
