import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from regionedit.core import ImageBuffer
from regionedit.losses import (
    LossContext,
    LossWeights,
    PromptSpec,
    clip_loss,
    combine_score,
    composite_loss,
    directional_loss,
    editing_loss,
    quality_score,
    self_similarity,
    structural_distance,
    structural_loss,
)
from tests.helpers import random_image
from tests.oracles import cosine, self_similarity_loop

RED = ImageBuffer.filled(32, 32, (1, 0, 0))
BLACK = ImageBuffer.filled(32, 32, (0, 0, 0))


class TestClip:
    def test_red_on_red(self, backends):
        assert clip_loss(backends.scorer, RED, PromptSpec("red")) == pytest.approx(0, abs=1e-6)

    def test_red_on_green(self, backends):
        assert clip_loss(backends.scorer, RED, PromptSpec("green")) == pytest.approx(1.0, abs=1e-12)

    def test_black_is_degenerate(self, backends):
        assert clip_loss(backends.scorer, BLACK, PromptSpec("red")) == 1.0


class TestSelfSimilarity:
    def test_identical_tokens(self):
        assert np.allclose(self_similarity(np.tile([1.0, 2.0, 3.0], (4, 1))), 1.0)

    def test_orthogonal(self):
        assert np.allclose(self_similarity(np.eye(2)), np.eye(2))

    def test_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            tokens = rng.standard_normal((5, int(rng.integers(2, 9))))
            assert np.abs(self_similarity(tokens) - self_similarity_loop(tokens)).max() <= 1e-6

    def test_needs_two_tokens(self):
        with pytest.raises(ValueError):
            self_similarity(np.ones((1, 3)))

    @given(arrays(np.float64, (4, 3), elements=st.floats(-5, 5)))
    def test_symmetric_unit_diagonal(self, tokens):
        q = self_similarity(tokens)
        assert np.allclose(q, q.T)
        live = np.linalg.norm(tokens, axis=1) >= 1e-8
        assert np.allclose(np.diag(q)[live], 1.0)


class TestStructural:
    def test_identity_exact_zero(self, backends, small_image):
        assert structural_loss(backends.scorer, small_image, small_image) == 0.0

    def test_hand_tokens(self):
        a = np.array([[1.0, 0.0], [0.0, 1.0]])
        b = np.array([[1.0, 0.0], [1.0, 1.0]])
        # Q(b) off-diagonal is 1/sqrt(2); two entries differ by that much
        assert structural_distance(a, b) == pytest.approx(math.sqrt(2 * 0.5), abs=1e-12)

    def test_scale_invariant(self):
        t = np.random.default_rng(1).standard_normal((6, 4))
        u = np.random.default_rng(2).standard_normal((6, 4))
        assert structural_distance(2 * t, u) == pytest.approx(structural_distance(t, u), abs=1e-12)

    def test_symmetric(self, backends):
        rng = np.random.default_rng(3)
        a, b = random_image(rng), random_image(rng)
        assert structural_loss(backends.scorer, a, b) == structural_loss(backends.scorer, b, a)

    def test_token_count_mismatch(self):
        with pytest.raises(ValueError):
            structural_distance(np.ones((4, 3)), np.ones((5, 3)))


class TestDirectional:
    def test_no_edit_degenerate(self, backends, small_image):
        assert directional_loss(backends.scorer, small_image, small_image, PromptSpec("red")) == 1.0

    def test_black_to_red(self, backends):
        got = directional_loss(backends.scorer, BLACK, RED, PromptSpec("red", "green"))
        # image direction is red (black embeds to zero), text direction red - green
        assert got == pytest.approx(1 - cosine([1, 0], [1, -1]), abs=1e-12)
        assert got == pytest.approx(0.29289, abs=1e-5)

    def test_swap_reflects(self, backends):
        rng = np.random.default_rng(4)
        for _ in range(20):
            src, dst = random_image(rng), random_image(rng)
            a = directional_loss(backends.scorer, src, dst, PromptSpec("red", "blue"))
            b = directional_loss(backends.scorer, src, dst, PromptSpec("blue", "red"))
            assert a + b == pytest.approx(2.0, abs=1e-12)

    def test_default_roi_text(self):
        p = PromptSpec("a red car")
        assert p.resolved_roi_text == "a photo" and p.roi_defaulted
        q = PromptSpec("a red car", "tree")
        assert q.resolved_roi_text == "tree" and not q.roi_defaulted
        with pytest.raises(ValueError):
            PromptSpec("   ")


class TestComposite:
    def test_examples(self):
        assert composite_loss(LossWeights(), (0.5, 0.2, 0.3)).total == pytest.approx(1.0, abs=1e-12)
        assert composite_loss(LossWeights(), (0, 0, 0)).total == 0
        assert LossWeights() == LossWeights(1.0, 1.0, 1.0)

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            LossWeights(-1.0)
        with pytest.raises(ValueError):
            LossWeights(1.0, float("nan"))

    @given(st.floats(0, 10), st.floats(0, 10), st.floats(0, 10),
           st.floats(0, 5), st.floats(0, 20), st.floats(0, 2))
    def test_linearity(self, lc, ls, ld, c, s, d):
        b = composite_loss(LossWeights(lc, ls, ld), (c, s, d))
        assert b.total == pytest.approx(lc * c + ls * s + ld * d, abs=1e-6)
        doubled = composite_loss(LossWeights(2 * lc, ls, ld), (c, s, d))
        assert doubled.total - b.total == pytest.approx(lc * c, abs=1e-9)


class TestQuality:
    def test_arithmetic(self):
        assert combine_score(0.3, 0.8).s == pytest.approx(1.4, abs=1e-12)
        q = combine_score(0.3, 0.8)
        assert (q.alpha, q.beta) == (2.0, 1.0)

    def test_identity_edit(self, backends):
        src = ImageBuffer.filled(32, 32, (0.9, 0.1, 0.1))
        q = quality_score(backends.scorer, src, src, PromptSpec("red"))
        assert q.s_i2i == pytest.approx(1.0, abs=1e-12)
        assert q.s == pytest.approx(2 * q.s_t2i + q.s_i2i, abs=1e-12)

    def test_degenerate_flagged(self, backends):
        q = quality_score(backends.scorer, RED, BLACK, PromptSpec("red"))
        assert q.degenerate and q.s_t2i == 0 and q.s_i2i == 0

    @given(st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=2, max_size=10),
           st.floats(0.01, 100))
    def test_argmax_scale_invariant(self, pairs, c):
        base = [combine_score(t, i).s for t, i in pairs]
        scaled = [combine_score(t, i, 2 * c, 1 * c).s for t, i in pairs]
        top = sorted(base, reverse=True)
        if top[0] - top[1] < 1e-9:
            return  # a near-tie may flip under rounding
        assert int(np.argmax(base)) == int(np.argmax(scaled))


def test_context_matches_free_functions(backends):
    rng = np.random.default_rng(5)
    src = random_image(rng)
    prompt = PromptSpec("blue", "tree")
    ctx = LossContext(backends.scorer, src, prompt, LossWeights(0.5, 2.0, 1.5))
    for _ in range(10):
        dst = random_image(rng)
        assert ctx.breakdown(dst) == editing_loss(backends.scorer, src, dst, prompt,
                                                  LossWeights(0.5, 2.0, 1.5))
        assert ctx.quality(dst) == quality_score(backends.scorer, src, dst, prompt)


def test_parts_finite_on_fuzzed_inputs(backends):
    rng = np.random.default_rng(6)
    words = ["red", "green", "blue", "a dog", "red sky", "tiger", "blue and green"]
    for _ in range(300):
        src = random_image(rng, 32, int(rng.integers(0, 4)))
        dst = random_image(rng, 32, int(rng.integers(0, 4)))
        b = editing_loss(backends.scorer, src, dst, PromptSpec(str(rng.choice(words)),
                                                                str(rng.choice(words))))
        assert all(np.isfinite(v) for v in (b.clip, b.structural, b.directional, b.total))
