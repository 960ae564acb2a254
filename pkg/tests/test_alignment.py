"""Tests for the similarity reduce function, contrastive losses and memory bank."""

import json
import math
from pathlib import Path

import numpy as np
import pytest

from delanlab.alignment import (
    ContrastConfig,
    InstanceEmbeddings,
    MemoryBank,
    bank_push,
    contrastive_loss,
    instruction_history_loss,
    instruction_history_sim,
    landmark_observation_loss,
    landmark_observation_sim,
    reduce_similarity,
    similarity_bundle,
    single_level_loss,
)
from delanlab.numerics import EmptySupportError, Tensor, grad_check, mean_pool

import oracles

GOLDEN = Path(__file__).parent / "golden"

REDUCE_GOLD = 0.7310585786300049      # e / (1 + e), high-precision evaluation
CONTRAST_GOLD = 0.6265233750364456    # 2 * log(1 + exp(-1))


def load_golden(name):
    return json.loads((GOLDEN / f"{name}.json").read_text())


def inst_from_dict(d) -> InstanceEmbeddings:
    return InstanceEmbeddings(
        text_global=Tensor(np.asarray(d["text_global"], float)),
        words=Tensor(np.asarray(d["words"], float)),
        word_mask=np.asarray(d["word_mask"], bool),
        landmarks=Tensor(np.asarray(d["landmarks"], float)),
        landmark_mask=np.asarray(d["landmark_mask"], bool),
        steps=Tensor(np.asarray(d["steps"], float)),
        step_mask=np.asarray(d["step_mask"], bool),
        traj_global=Tensor(np.asarray(d["traj_global"], float)),
        views=[Tensor(np.asarray(v, float)) for v in d["views"]],
    )


def random_instance(rng, d=3, m=2, n=2, t=2, k=3) -> dict:
    steps = rng.normal(size=(t, d))
    return {
        "text_global": rng.normal(size=d),
        "words": rng.normal(size=(m, d)),
        "word_mask": [True] * m,
        "landmarks": rng.normal(size=(n, d)),
        "landmark_mask": [True] * n,
        "steps": steps,
        "step_mask": [True] * t,
        "traj_global": steps.mean(axis=0),
        "views": [rng.normal(size=(k, d)) for _ in range(t)],
    }


class TestReduceSimilarity:
    def test_single_element_identity(self):
        for c in (-4.2, 0.0, 7.5):
            assert reduce_similarity([[c]]).item() == pytest.approx(c, abs=1e-15)

    def test_constant_matrix(self):
        m = np.full((2, 3), 0.5)
        assert reduce_similarity(m).item() == pytest.approx(0.5, abs=1e-15)

    def test_golden_two_by_two(self):
        value = reduce_similarity([[0.0, 1.0], [1.0, 0.0]]).item()
        assert value == pytest.approx(REDUCE_GOLD, abs=1e-5)
        assert value == pytest.approx(oracles.reduce_ref([[0.0, 1.0], [1.0, 0.0]]),
                                      abs=1e-12)

    def test_bounds_property(self):
        rng = np.random.default_rng(101)
        for _ in range(100):
            p, q = rng.integers(1, 7, size=2)
            m = rng.normal(scale=3.0, size=(p, q))
            r = reduce_similarity(m).item()
            assert m.min() - 1e-12 <= r <= m.max() + 1e-12

    def test_shift_equivariance(self):
        rng = np.random.default_rng(103)
        for _ in range(50):
            m = rng.normal(size=(4, 5))
            c = float(rng.normal(scale=10))
            shifted = reduce_similarity(m + c).item()
            assert abs(shifted - reduce_similarity(m).item() - c) < 1e-10

    def test_permutation_invariance(self):
        rng = np.random.default_rng(107)
        m = rng.normal(size=(4, 5))
        base = reduce_similarity(m).item()
        for _ in range(10):
            pm = m[rng.permutation(4)][:, rng.permutation(5)]
            assert reduce_similarity(pm).item() == pytest.approx(base, abs=1e-12)

    def test_mask_equivalence_exact(self):
        rng = np.random.default_rng(109)
        for _ in range(25):
            p, q = int(rng.integers(2, 7)), int(rng.integers(2, 7))
            m = rng.normal(size=(p, q))
            row_mask = rng.random(p) < 0.7
            col_mask = rng.random(q) < 0.7
            row_mask[int(rng.integers(0, p))] = True
            col_mask[int(rng.integers(0, q))] = True
            padded = m.copy()
            padded[~row_mask, :] = 1e6  # garbage that must not leak
            padded[:, ~col_mask] = 1e6
            compact = m[np.ix_(np.flatnonzero(row_mask), np.flatnonzero(col_mask))]
            full = reduce_similarity(padded, row_mask, col_mask).item()
            assert full == reduce_similarity(compact).item()

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(113)
        for _ in range(25):
            m = rng.normal(size=(int(rng.integers(1, 6)), int(rng.integers(1, 6))))
            assert reduce_similarity(m).item() == pytest.approx(
                oracles.reduce_ref(m.tolist()), abs=1e-12)

    def test_empty_support(self):
        with pytest.raises(EmptySupportError):
            reduce_similarity(np.ones((2, 2)), row_mask=[False, False])

    def test_gradient(self):
        rng = np.random.default_rng(127)
        mask_r = np.array([True, True, False, True])
        mask_c = np.array([True, False, True, True, True])

        def f(x):
            return reduce_similarity(x, mask_r, mask_c)

        report = grad_check(f, rng.normal(size=(4, 5)), step=1e-5, tol=1e-4)
        assert report.passed, report


class TestContrastiveLoss:
    @staticmethod
    def bidirectional(s, tau=1.0):
        s = np.asarray(s, float)
        return contrastive_loss(s, tau).item() + contrastive_loss(s.T, tau).item()

    def test_single_pair_is_zero(self):
        assert self.bidirectional([[3.7]]) == 0.0

    def test_uniform_identity(self):
        for b in (2, 4, 8):
            total = self.bidirectional(np.full((b, b), 0.3))
            assert abs(total - 2.0 * math.log(b)) < 1e-10

    def test_golden_b2(self):
        assert self.bidirectional([[1.0, 0.0], [0.0, 1.0]]) == pytest.approx(
            CONTRAST_GOLD, abs=1e-5)

    def test_nonnegative_and_matches_oracle(self):
        rng = np.random.default_rng(131)
        for _ in range(50):
            b = int(rng.integers(1, 6))
            extra = int(rng.integers(0, 4))
            s = rng.normal(size=(b, b + extra))
            tau = float(rng.uniform(0.3, 3.0))
            value = contrastive_loss(s, tau).item()
            assert value >= 0.0
            assert value == pytest.approx(oracles.contrastive_ref(s.tolist(), tau),
                                          abs=1e-10)

    def test_monotone_in_positive_score(self):
        rng = np.random.default_rng(137)
        s = rng.normal(size=(3, 3))
        base = self.bidirectional(s)
        for bump in (0.1, 0.5, 2.0):
            boosted = s.copy()
            boosted[1, 1] += bump
            assert self.bidirectional(boosted) < base

    def test_bank_columns_only_raise_loss(self):
        rng = np.random.default_rng(139)
        s = rng.normal(size=(3, 3))
        extra = np.hstack([s, rng.normal(size=(3, 2)) + 1.0])
        assert contrastive_loss(extra, 1.0).item() > contrastive_loss(s, 1.0).item()

    def test_invalid_tau(self):
        with pytest.raises(ValueError, match="tau"):
            contrastive_loss(np.ones((2, 2)), 0.0)

    def test_invalid_positive(self):
        with pytest.raises(ValueError, match="positive"):
            contrastive_loss(np.ones((2, 2)), 1.0, positives=[0, 5])

    def test_gradient(self):
        rng = np.random.default_rng(149)

        def f(x):
            return contrastive_loss(x, 0.7) + contrastive_loss(x.T, 0.7)

        report = grad_check(f, rng.normal(size=(3, 3)))
        assert report.passed, report


class TestPairSimilarities:
    def test_all_zero_embeddings(self):
        zero = inst_from_dict({
            "text_global": [0.0, 0.0], "words": [[0.0, 0.0]], "word_mask": [True],
            "landmarks": [[0.0, 0.0]], "landmark_mask": [True],
            "steps": [[0.0, 0.0]], "step_mask": [True], "traj_global": [0.0, 0.0],
            "views": [[[0.0, 0.0]]],
        })
        assert instruction_history_sim(zero, zero).item() == 0.0
        assert landmark_observation_sim(zero, zero, 0).item() == 0.0

    def test_degenerate_dimension_one(self):
        inst = inst_from_dict({
            "text_global": [2.0], "words": [[2.0]], "word_mask": [True],
            "landmarks": [[2.0]], "landmark_mask": [True],
            "steps": [[3.0]], "step_mask": [True], "traj_global": [3.0],
            "views": [[[3.0]]],
        })
        assert instruction_history_sim(inst, inst).item() == pytest.approx(6.0, abs=1e-12)

    def test_ih_sim_golden(self):
        record = load_golden("ih_sim")
        inst = inst_from_dict(record["inputs"]["text"])
        value = instruction_history_sim(inst, inst).item()
        assert value == pytest.approx(record["expected"], abs=record["precision"])

    def test_lo_sim_trivial(self):
        inst = inst_from_dict({
            "text_global": [0.0, 0.0], "words": [[0.0, 0.0]], "word_mask": [True],
            "landmarks": [[1.0, 0.0]], "landmark_mask": [True],
            "steps": [[0.0, 0.0]], "step_mask": [True], "traj_global": [0.0, 0.0],
            "views": [[[3.0, 4.0]]],
        })
        assert landmark_observation_sim(inst, inst, 0).item() == pytest.approx(3.0)

    def test_lo_sim_golden(self):
        record = load_golden("lo_sim")
        inst = inst_from_dict(record["inputs"]["instance"])
        value = landmark_observation_sim(inst, inst, record["inputs"]["step"]).item()
        assert value == pytest.approx(record["expected"], abs=record["precision"])

    def test_lo_sim_empty_landmarks(self):
        inst = inst_from_dict(random_instance(np.random.default_rng(0)))
        inst.landmark_mask = np.zeros_like(inst.landmark_mask)
        with pytest.raises(EmptySupportError, match="empty landmark set"):
            landmark_observation_sim(inst, inst, 0)

    def test_no_enabled_component(self):
        inst = inst_from_dict(random_instance(np.random.default_rng(1)))
        cfg = ContrastConfig(use_it=False, use_wt=False, use_iv=False, use_wv=False)
        with pytest.raises(ValueError, match="component"):
            instruction_history_sim(inst, inst, cfg)

    def test_bundle_shapes(self):
        d = random_instance(np.random.default_rng(2), d=4, m=3, n=2, t=5, k=6)
        inst = inst_from_dict(d)
        bundle = similarity_bundle(inst, inst)
        assert bundle.instruction_trajectory.shape == ()
        assert bundle.word_trajectory.shape == (1, 3)
        assert bundle.instruction_viewpoint.shape == (5, 1)
        assert bundle.word_viewpoint.shape == (5, 3)
        assert [v.shape for v in bundle.landmark_observation] == [(6, 2)] * 5


class TestLevelLosses:
    def test_ih_single_instance_zero(self):
        inst = inst_from_dict(random_instance(np.random.default_rng(7)))
        loss = instruction_history_loss([inst], None, ContrastConfig())
        assert loss.item() == 0.0

    def test_ih_uniform_scores(self):
        inst = inst_from_dict(random_instance(np.random.default_rng(11)))
        twin = inst_from_dict(random_instance(np.random.default_rng(11)))
        loss = instruction_history_loss([inst, twin], None, ContrastConfig())
        assert loss.item() == pytest.approx(2.0 * math.log(2.0), abs=1e-10)

    def test_ih_golden_b3(self):
        record = load_golden("ih_level_b3")
        batch = [inst_from_dict(d) for d in record["inputs"]["batch"]]
        loss = instruction_history_loss(batch, None, ContrastConfig())
        assert loss.item() == pytest.approx(record["expected"], abs=record["precision"])

    def test_ih_golden_with_bank(self):
        record = load_golden("ih_level_with_bank")
        batch = [inst_from_dict(d) for d in record["inputs"]["batch"]]
        entries = tuple(inst_from_dict(d) for d in record["inputs"]["bank"])
        bank = MemoryBank(capacity=480, entries=entries)
        loss = instruction_history_loss(batch, bank, ContrastConfig())
        assert loss.item() == pytest.approx(record["expected"], abs=record["precision"])

    def test_ih_single_flag_matches_oracle(self):
        rng = np.random.default_rng(13)
        dicts = [random_instance(rng, m=3, t=2), random_instance(rng, m=2, t=4)]
        batch = [inst_from_dict(d) for d in dicts]
        for flag in ("it", "wt", "iv", "wv"):
            cfg = ContrastConfig(use_it=flag == "it", use_wt=flag == "wt",
                                 use_iv=flag == "iv", use_wv=flag == "wv")
            loss = instruction_history_loss(batch, None, cfg).item()
            ref = oracles.ih_level_ref(
                [{k: np.asarray(v).tolist() if not isinstance(v, list) else v
                  for k, v in d.items()} for d in dicts], flags=(flag,))
            assert loss == pytest.approx(ref, abs=1e-10)

    def test_lo_single_instance_zero(self):
        inst = inst_from_dict(random_instance(np.random.default_rng(17), t=3))
        loss = landmark_observation_loss([inst], None, ContrastConfig())
        assert loss.item() == 0.0

    def test_lo_uniform_scores(self):
        inst = inst_from_dict(random_instance(np.random.default_rng(19), t=1))
        twin = inst_from_dict(random_instance(np.random.default_rng(19), t=1))
        loss = landmark_observation_loss([inst, twin], None, ContrastConfig())
        assert loss.item() == pytest.approx(2.0 * math.log(2.0), abs=1e-10)

    def test_lo_ragged_golden(self):
        record = load_golden("lo_level_ragged")
        batch = [inst_from_dict(d) for d in record["inputs"]["batch"]]
        loss = landmark_observation_loss(batch, None, ContrastConfig())
        assert loss.item() == pytest.approx(record["expected"], abs=record["precision"])

    def test_level_losses_match_oracle_random_ragged(self):
        rng = np.random.default_rng(23)
        for _ in range(10):
            b = int(rng.integers(2, 5))
            dicts = [random_instance(rng, d=3, m=int(rng.integers(1, 4)),
                                     n=int(rng.integers(1, 4)),
                                     t=int(rng.integers(1, 4)), k=2)
                     for _ in range(b)]
            batch = [inst_from_dict(d) for d in dicts]
            plain = [{k: np.asarray(v).tolist() if not isinstance(v, list) else
                      [np.asarray(x).tolist() for x in v] if k == "views" else v
                      for k, v in d.items()} for d in dicts]
            got_ih = instruction_history_loss(batch, None, ContrastConfig()).item()
            assert got_ih == pytest.approx(oracles.ih_level_ref(plain), abs=1e-8)
            got_lo = landmark_observation_loss(batch, None, ContrastConfig()).item()
            assert got_lo == pytest.approx(oracles.lo_level_ref(plain), abs=1e-8)

    def test_ih_gradient(self):
        rng = np.random.default_rng(29)
        dicts = [random_instance(rng, d=2, m=2, t=2), random_instance(rng, d=2, m=2, t=3)]
        base = [inst_from_dict(d) for d in dicts]
        mask = np.ones(2, bool)

        def f(x):
            first = InstanceEmbeddings(
                text_global=base[0].text_global, words=base[0].words,
                word_mask=base[0].word_mask, landmarks=base[0].landmarks,
                landmark_mask=base[0].landmark_mask, steps=x, step_mask=mask,
                traj_global=mean_pool(x, mask), views=base[0].views)
            return instruction_history_loss([first, base[1]], None, ContrastConfig())

        report = grad_check(f, np.asarray(dicts[0]["steps"]), step=1e-5, tol=1e-4)
        assert report.passed, report

    def test_lo_gradient(self):
        rng = np.random.default_rng(31)
        dicts = [random_instance(rng, d=2, n=2, t=2, k=2),
                 random_instance(rng, d=2, n=2, t=1, k=2)]
        base = [inst_from_dict(d) for d in dicts]

        def f(x):
            first = InstanceEmbeddings(
                text_global=base[0].text_global, words=base[0].words,
                word_mask=base[0].word_mask, landmarks=x,
                landmark_mask=base[0].landmark_mask, steps=base[0].steps,
                step_mask=base[0].step_mask, traj_global=base[0].traj_global,
                views=base[0].views)
            return landmark_observation_loss([first, base[1]], None, ContrastConfig())

        report = grad_check(f, np.asarray(dicts[0]["landmarks"]), step=1e-5, tol=1e-4)
        assert report.passed, report


class TestSingleLevel:
    def test_single_instance_zero(self):
        inst = inst_from_dict(random_instance(np.random.default_rng(37)))
        cfg = ContrastConfig(level="single")
        assert single_level_loss([inst], None, cfg).item() == 0.0

    def test_no_visual_content_rejected(self):
        inst = inst_from_dict(random_instance(np.random.default_rng(41)))
        empty = InstanceEmbeddings(
            text_global=inst.text_global, words=inst.words, word_mask=inst.word_mask,
            landmarks=inst.landmarks, landmark_mask=inst.landmark_mask,
            steps=Tensor(np.zeros((0, 3))), step_mask=np.zeros(0, bool),
            traj_global=inst.traj_global, views=[])
        with pytest.raises(EmptySupportError):
            single_level_loss([empty, inst], None, ContrastConfig(level="single"))

    def test_golden_b2(self):
        record = load_golden("single_level_b2")
        batch = [inst_from_dict(d) for d in record["inputs"]["batch"]]
        loss = single_level_loss(batch, None, ContrastConfig(level="single"))
        assert loss.item() == pytest.approx(record["expected"], abs=record["precision"])


class TestMemoryBank:
    @staticmethod
    def make_item(seed):
        return inst_from_dict(random_instance(np.random.default_rng(seed))).detach()

    def test_fifo_eviction(self):
        a, b, c = (self.make_item(i) for i in range(3))
        bank = MemoryBank(capacity=2)
        bank = bank_push(bank, [a, b, c])
        assert len(bank) == 2
        assert bank.entries == (b, c)

    def test_empty_push_unchanged(self):
        bank = MemoryBank(capacity=2)
        assert bank_push(bank, []) is not bank
        assert bank_push(bank, []).entries == ()

    def test_queue_oracle_size_trajectory(self):
        bank = MemoryBank(capacity=480)
        item = self.make_item(0)
        queue = []
        for _ in range(100):
            bank = bank_push(bank, [item] * 8)
            queue.extend([None] * 8)
            queue = queue[-480:]
            assert len(bank) == len(queue)
        assert len(bank) == 480

    def test_rejects_items_with_gradients(self):
        live = inst_from_dict(random_instance(np.random.default_rng(43)))
        live.steps.requires_grad = True
        with pytest.raises(ValueError, match="detached"):
            bank_push(MemoryBank(), [live])

    def test_bank_entries_receive_no_gradient(self):
        rng = np.random.default_rng(47)
        dicts = [random_instance(rng), random_instance(rng)]
        batch = []
        leaves = []
        for d in dicts:
            steps = Tensor(np.asarray(d["steps"]), requires_grad=True)
            leaves.append(steps)
            mask = np.asarray(d["step_mask"], bool)
            batch.append(InstanceEmbeddings(
                text_global=Tensor(np.asarray(d["text_global"])),
                words=Tensor(np.asarray(d["words"])),
                word_mask=np.asarray(d["word_mask"], bool),
                landmarks=Tensor(np.asarray(d["landmarks"])),
                landmark_mask=np.asarray(d["landmark_mask"], bool),
                steps=steps, step_mask=mask, traj_global=mean_pool(steps, mask),
                views=[Tensor(np.asarray(v)) for v in d["views"]]))
        entries = tuple(self.make_item(100 + i) for i in range(3))
        bank = MemoryBank(capacity=480, entries=entries)
        with_bank = instruction_history_loss(batch, bank, ContrastConfig())
        without = instruction_history_loss(batch, None, ContrastConfig())
        assert with_bank.item() != pytest.approx(without.item())
        with_bank.backward()
        for entry in entries:
            assert entry.steps.grad is None
            assert not entry.requires_grad()
        assert all(leaf.grad is not None for leaf in leaves)

    def test_detach_copies_storage(self):
        inst = inst_from_dict(random_instance(np.random.default_rng(53)))
        frozen = inst.detach()
        inst.steps.data[0, 0] += 99.0
        assert frozen.steps.data[0, 0] != inst.steps.data[0, 0]


class TestValidation:
    def test_traj_global_invariant(self):
        inst = inst_from_dict(random_instance(np.random.default_rng(59)))
        inst.validate()
        inst.traj_global = Tensor(inst.traj_global.data + 1.0)
        with pytest.raises(ValueError, match="mean"):
            inst.validate()

    def test_contrast_config_rejects_bad_tau(self):
        with pytest.raises(ValueError, match="tau"):
            ContrastConfig(tau=-1.0)

    def test_contrast_config_rejects_bad_level(self):
        with pytest.raises(ValueError, match="level"):
            ContrastConfig(level="triple")
