from dataclasses import replace

import numpy as np
import pytest
import torch

from regionedit.backends.base import BackendError, Backends
from regionedit.core import Anchor, BoxProposal, ImageBuffer, RegionMask
from regionedit.losses import LossBreakdown, PromptSpec, QualityScore
from regionedit.regions import SelectionSample, save_params, select_from_noise
from regionedit.scenarios import enumerate_proposal_losses, synthetic_scenario
from regionedit.trainer import (
    EditCandidate,
    EditFailed,
    LossTable,
    TrainConfig,
    build_generator,
    infer_best_edit,
    prepare,
    select_winner,
    surrogate_logit_grad,
    surrogate_objective,
    surrogate_step,
    train_region_generator,
)
from tests.helpers import random_image
from tests.oracles import softmax

FAST = TrainConfig(k=3, m=3, epochs=2)


class CountingEditor:
    def __init__(self, inner, fail_first=0, always_fail=False, retryable=True, fail_seeds=()):
        self.inner = inner
        self.identifier = inner.identifier
        self.kind = inner.kind
        self.serial_only = False
        self.calls = 0
        self.fail_first = fail_first
        self.always_fail = always_fail
        self.retryable = retryable
        self.fail_seeds = set(fail_seeds)

    def edit(self, image, mask, prompt, seed):
        self.calls += 1
        if self.always_fail or self.calls <= self.fail_first or seed in self.fail_seeds:
            raise BackendError("flaky", retryable=self.retryable)
        return self.inner.edit(image, mask, prompt, seed)


def with_editor(backends, editor):
    return Backends(backends.feature, backends.scorer, editor)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.k, c.m, c.l, c.epochs, c.learning_rate, c.batch_size) == (8, 7, 7, 5, 0.003, 1)
        assert c.steps == 8 and c.ema_decay == 0.9 and c.gradient_mode == "full-eval"
        assert (c.alpha, c.beta) == (2.0, 1.0)

    @pytest.mark.parametrize("kw", [{"epochs": -1}, {"learning_rate": 0}, {"ema_decay": 1.0},
                                    {"gradient_mode": "exact"}, {"batch_size": 2}, {"k": 0},
                                    {"steps_per_epoch": 0}, {"jobs": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestSurrogate:
    def test_equal_losses_zero_gradient(self):
        w = softmax([0.3, -1.2, 2.0, 0.1])
        assert np.all(surrogate_logit_grad(w, [1.7] * 4) == 0.0)

    def test_two_way_hand_case(self):
        g = surrogate_logit_grad(softmax([0.0, 0.0]), [0.0, 1.0])
        assert np.allclose(g, [-0.25, 0.25], atol=1e-15)

    def test_matches_softmax_jacobian(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            m = int(rng.integers(2, 9))
            w = softmax(rng.normal(0, 2, m))
            losses = rng.normal(0, 3, m)
            jac = np.diag(w) - np.outer(w, w)  # dw_i / dpi_j
            assert np.allclose(surrogate_logit_grad(w, losses), jac.T @ losses, atol=1e-12)

    def test_torch_objective_matches_analytic(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            m = int(rng.integers(2, 9))
            logits = torch.tensor(rng.normal(0, 2, m), requires_grad=True)
            gumbel, losses = rng.gumbel(size=m), rng.normal(0, 3, m)
            surrogate_objective(logits, gumbel, losses).backward()
            w = softmax(logits.detach().numpy() + gumbel)
            assert np.allclose(logits.grad.numpy(), surrogate_logit_grad(w, losses), atol=1e-12)

    def _net_and_input(self):
        net = build_generator(2, TrainConfig(k=1, m=3, l=2))
        with torch.no_grad():
            net.linear2.weight.normal_()
        x = torch.from_numpy(np.random.default_rng(2).standard_normal((6, 2, 2)).astype(np.float32))
        return net, x

    def test_step_updates_parameters(self):
        net, x = self._net_and_input()
        before = save_params(net)
        opt = torch.optim.Adam(net.parameters(), lr=0.003)
        sel = select_from_noise(net(x).detach().double().numpy(), np.zeros(3))
        value, applied = surrogate_step(net, opt, x, sel, [0.0, 1.0, 2.0])
        assert applied and np.isfinite(value)
        assert save_params(net) != before

    def test_non_finite_gradient_skipped(self):
        net, x = self._net_and_input()
        before = save_params(net)
        opt = torch.optim.Adam(net.parameters(), lr=0.003)
        sel = select_from_noise(net(x).detach().double().numpy(), np.zeros(3))
        _, applied = surrogate_step(net, opt, x, sel, [0.0, np.nan, 2.0])
        assert not applied
        assert save_params(net) == before


class TestLossTable:
    def test_ema_and_fallback(self):
        t = LossTable(2, 3, 0.9)
        t.update(0, 1, 2.0)
        t.update(0, 1, 4.0)
        assert t.estimates[0, 0] == pytest.approx(0.9 * 2.0 + 0.1 * 4.0)
        t.update(0, 3, 1.0)
        row = t.row(0, {2: 5.0})
        assert row.tolist() == pytest.approx([2.2, 5.0, 1.0])
        # unvisited entries take the mean of visited ones
        assert t.row(0, {}).tolist() == pytest.approx([2.2, 1.6, 1.0])
        assert t.counts[0].tolist() == [2, 0, 1]
        with pytest.raises(ValueError):
            t.row(1, {})


class TestTraining:
    def test_zero_epochs_keeps_init(self, backends, small_image):
        cfg = replace(FAST, epochs=0)
        r = train_region_generator(small_image, PromptSpec("red"), backends, cfg)
        assert save_params(r.params) == r.initial_blob
        assert save_params(build_generator(64, cfg)) == r.initial_blob
        assert r.log == []

    def test_log_schema_and_reproducible(self, backends, small_image):
        a = train_region_generator(small_image, PromptSpec("red"), backends, FAST)
        b = train_region_generator(small_image, PromptSpec("red"), backends, FAST)
        assert a.log == b.log
        assert save_params(a.params) == save_params(b.params)
        assert len(a.log) == FAST.epochs * FAST.k
        e = a.log[0]
        assert {"epoch", "step", "anchor", "j_star", "soft_weights", "loss_parts", "surrogate",
                "seed", "status"} <= set(e)
        assert [x["anchor"] for x in a.log] == [0, 1, 2, 0, 1, 2]
        assert abs(sum(e["soft_weights"]) - 1) < 1e-6

    def test_seed_changes_log(self, backends, small_image):
        a = train_region_generator(small_image, PromptSpec("red"), backends, FAST)
        b = train_region_generator(small_image, PromptSpec("red"), backends, replace(FAST, seed=1))
        assert a.log != b.log

    def test_editor_calls_per_mode(self, backends, small_image):
        full = CountingEditor(backends.editor)
        train_region_generator(small_image, PromptSpec("red"), with_editor(backends, full), FAST)
        assert full.calls == FAST.epochs * FAST.k * FAST.m
        sampled = CountingEditor(backends.editor)
        r = train_region_generator(small_image, PromptSpec("red"), with_editor(backends, sampled),
                                   replace(FAST, gradient_mode="sampled-ema"))
        assert sampled.calls == FAST.epochs * FAST.k
        assert r.loss_table.counts.sum() == FAST.epochs * FAST.k

    def test_parallel_matches_serial(self, backends, small_image):
        a = train_region_generator(small_image, PromptSpec("red"), backends, FAST)
        b = train_region_generator(small_image, PromptSpec("red"), backends, replace(FAST, jobs=3))
        assert a.log == b.log

    def test_retry_then_succeed(self, backends, small_image):
        flaky = CountingEditor(backends.editor, fail_first=1)
        r = train_region_generator(small_image, PromptSpec("red"), with_editor(backends, flaky),
                                   replace(FAST, epochs=1))
        assert all(e["status"] == "ok" for e in r.log)
        assert flaky.calls == FAST.k * FAST.m + 1

    def test_all_steps_skipped_raises(self, backends, small_image):
        broken = CountingEditor(backends.editor, always_fail=True, retryable=False)
        with pytest.raises(EditFailed):
            train_region_generator(small_image, PromptSpec("red"), with_editor(backends, broken),
                                   replace(FAST, epochs=1))
        assert broken.calls == FAST.k  # one attempt per step, no retries for fatal errors

    def test_step_skipped_and_logged(self, backends, small_image):
        from regionedit.core import derive_seed

        bad = derive_seed(FAST.seed, 2, 1, 1)  # edit seed of step 1 (anchor 1)
        editor = CountingEditor(backends.editor, retryable=False, fail_seeds=[bad])
        r = train_region_generator(small_image, PromptSpec("red"), with_editor(backends, editor),
                                   replace(FAST, epochs=1))
        assert [e["status"] for e in r.log] == ["ok", "skipped", "ok"]
        assert r.log[1]["loss_parts"] is None and "flaky" in r.log[1]["reason"]


def _candidate(anchor_id, t2i, i2i):
    box = BoxProposal(Anchor(0, anchor_id), 1, (0, anchor_id, 0, anchor_id))
    img = ImageBuffer.filled(2, 2, (0, 0, 0))
    q = QualityScore(t2i, i2i, 2.0, 1.0, 2 * t2i + i2i)
    return EditCandidate(anchor_id, box, RegionMask(np.ones((2, 2))), img,
                         LossBreakdown(0, 0, 0, 0), q, 0)


class TestInference:
    def test_single_anchor(self, backends, small_image):
        cfg = TrainConfig(k=1, m=3, epochs=0)
        net = build_generator(64, cfg)
        winner, cands = infer_best_edit(small_image, PromptSpec("red"), net, backends, cfg)
        assert len(cands) == 1 and winner is cands[0]

    def test_tie_goes_to_lowest_anchor(self):
        cands = [_candidate(2, 0.3, 0.8), _candidate(0, 0.4, 0.6), _candidate(1, 0.3, 0.8)]
        assert select_winner(cands).anchor_id == 0
        cands = [_candidate(3, 0.5, 0.5), _candidate(1, 0.5, 0.5)]
        assert select_winner(cands).anchor_id == 1

    def test_precomputed_pairs(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            pairs = rng.uniform(-1, 1, (6, 2)).round(1)
            cands = [_candidate(i, *p) for i, p in enumerate(pairs)]
            scores = 2 * pairs[:, 0] + pairs[:, 1]
            best = min(range(6), key=lambda i: (-scores[i], i))
            assert select_winner(cands).anchor_id == best

    def test_argmax_proposal_no_noise(self, backends, small_image):
        cfg = TrainConfig(k=4, m=3, epochs=0)
        net = build_generator(64, cfg)
        with torch.no_grad():
            net.linear2.bias.copy_(torch.tensor([0.0, 5.0, 1.0]))
        _, cands = infer_best_edit(small_image, PromptSpec("red"), net, backends, cfg)
        assert all(c.box.size_index == 2 for c in cands)

    def test_partial_failure(self, backends, small_image):
        from regionedit.core import derive_seed

        cfg = TrainConfig(k=4, m=3, epochs=0)
        net = build_generator(64, cfg)
        bad = [derive_seed(cfg.seed, 4, a) for a in (0, 2)]
        editor = CountingEditor(backends.editor, retryable=False, fail_seeds=bad)
        winner, cands = infer_best_edit(small_image, PromptSpec("red"), net,
                                        with_editor(backends, editor), cfg)
        assert sorted(c.anchor_id for c in cands) == [1, 3]
        assert winner.score.s == max(c.score.s for c in cands)
        broken = CountingEditor(backends.editor, always_fail=True, retryable=False)
        with pytest.raises(EditFailed):
            infer_best_edit(small_image, PromptSpec("red"), net, with_editor(backends, broken), cfg)

    def test_candidate_mask_matches_box(self, backends, small_image):
        from regionedit.core import rasterize_mask

        cfg = TrainConfig(k=3, m=3, epochs=0)
        _, cands = infer_best_edit(small_image, PromptSpec("red"), build_generator(64, cfg),
                                   backends, cfg)
        for c in cands:
            assert np.array_equal(c.mask.data, rasterize_mask(c.box, 16, 64, 64).data)


class TestScenarios:
    def test_grow_prefers_largest(self):
        table = enumerate_proposal_losses(synthetic_scenario("grow"))
        assert np.all(table.argmin(axis=1) == 6)
        assert np.all(np.diff(table, axis=1) < 0)

    def test_shrink_prefers_smallest(self):
        table = enumerate_proposal_losses(synthetic_scenario("shrink"))
        assert np.all(table.argmin(axis=1) == 0)

    def test_shrink_converges(self):
        sc = synthetic_scenario("shrink")
        hits = 0
        for seed in range(3):
            r = train_region_generator(sc.image, sc.prompt, sc.backends(), TrainConfig(seed=seed))
            probs = r.epoch_probabilities[-1]
            hits += bool(np.all(probs.argmax(axis=1) == 0))
        assert hits >= 2

    def test_monotone_probability_of_best(self, grow_runs):
        j = grow_runs["j_dagger"] - 1
        good = 0
        for run in grow_runs["runs"]:
            means = [p[np.arange(len(j)), j].mean() for p in run["epochs"]]
            good += all(b >= a - 1e-12 for a, b in zip(means, means[1:]))
        assert good >= 8


def test_prepare_shapes(backends):
    img = random_image(np.random.default_rng(0), 96)
    prep = prepare(img, PromptSpec("red"), backends, TrainConfig(k=5, m=4))
    assert len(prep.anchors) == 5
    assert all(len(p) == 4 for p in prep.proposals)
    assert prep.inputs[0].shape == (4 * 64, 7, 7)
