"""Tests for the high-resolution fusion neck."""

import numpy as np
import pytest
from oracles import bilinear_oracle, conv_oracle

from llts.hrfm import (
    FeatureBranches,
    HrfmParams,
    PyramidFeatures,
    align_pyramid,
    hrfm_forward,
    hrfm_fuse,
    make_hrfm_params,
    project_branch,
)
from llts.mfia import mfia_forward
from llts.tensorops import ShapeError, Tensor, grad_check, sum_all


def toy_pyramid(rng, n=1, chans=(4, 6, 8, 10), base=16):
    sizes = [base, base // 2, base // 4, base // 8]
    return PyramidFeatures(*[
        Tensor(rng.standard_normal((n, c, s, s))) for c, s in zip(chans, sizes)
    ])


class TestPyramidTypes:
    def test_halving_validated(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ShapeError, match="halve"):
            PyramidFeatures(
                Tensor(rng.standard_normal((1, 4, 16, 16))),
                Tensor(rng.standard_normal((1, 4, 8, 8))),
                Tensor(rng.standard_normal((1, 4, 5, 5))),  # should be 4x4
                Tensor(rng.standard_normal((1, 4, 2, 2))),
            )

    def test_odd_extents_use_ceil_halving(self):
        rng = np.random.default_rng(1)
        PyramidFeatures(
            Tensor(rng.standard_normal((1, 4, 9, 9))),
            Tensor(rng.standard_normal((1, 4, 5, 5))),
            Tensor(rng.standard_normal((1, 4, 3, 3))),
            Tensor(rng.standard_normal((1, 4, 2, 2))),
        )

    def test_batch_mismatch_rejected(self):
        rng = np.random.default_rng(2)
        with pytest.raises(ShapeError, match="batch"):
            PyramidFeatures(
                Tensor(rng.standard_normal((2, 4, 8, 8))),
                Tensor(rng.standard_normal((1, 4, 4, 4))),
                Tensor(rng.standard_normal((1, 4, 2, 2))),
                Tensor(rng.standard_normal((1, 4, 1, 1))),
            )

    def test_branch_shape_mismatch_rejected(self):
        rng = np.random.default_rng(3)
        good = Tensor(rng.standard_normal((1, 8, 4, 4)))
        with pytest.raises(ShapeError):
            FeatureBranches(good, good, good, Tensor(rng.standard_normal((1, 8, 4, 5))))


class TestProjectBranch:
    def test_stride4_level_is_conv_only(self):
        rng = np.random.default_rng(4)
        p = make_hrfm_params(rng, (4, 6, 8, 10), width=8)
        level = Tensor(rng.standard_normal((1, 4, 12, 12)))
        got = project_branch(level, p.projections[0], (12, 12))
        want = conv_oracle(level.data, p.projections[0].weight.data,
                           p.projections[0].bias.data, 1, 0)
        np.testing.assert_allclose(got.data, want, rtol=0, atol=1e-12)

    def test_envelope_preserved_by_enlargement(self):
        rng = np.random.default_rng(5)
        p = make_hrfm_params(rng, (4, 6, 8, 10), width=8)
        level = Tensor(rng.standard_normal((1, 6, 6, 6)))
        got = project_branch(level, p.projections[1], (12, 12)).data
        conv_only = conv_oracle(level.data, p.projections[1].weight.data,
                                p.projections[1].bias.data, 1, 0)
        assert got.max() <= conv_only.max() + 1e-12
        assert got.min() >= conv_only.min() - 1e-12

    def test_matches_composed_oracles(self):
        rng = np.random.default_rng(6)
        p = make_hrfm_params(rng, (4, 6, 8, 10), width=8)
        level = Tensor(rng.standard_normal((2, 8, 4, 4)))
        got = project_branch(level, p.projections[2], (16, 16))
        want = bilinear_oracle(
            conv_oracle(level.data, p.projections[2].weight.data,
                        p.projections[2].bias.data, 1, 0), 16, 16)
        np.testing.assert_allclose(got.data, want, rtol=0, atol=1e-12)


class TestFuse:
    def test_fused_shape_is_4x_width_on_finest_grid(self):
        rng = np.random.default_rng(7)
        p = make_hrfm_params(rng, (4, 6, 8, 10), width=8)
        out = hrfm_forward(toy_pyramid(rng), p)
        assert out.shape == (1, 32, 16, 16)

    def test_zero_attention_concatenates_eighth_branches(self):
        rng = np.random.default_rng(8)
        p = make_hrfm_params(rng, (4, 6, 8, 10), width=8)
        for inst in p.mfia:
            for _, t in inst.param_items("x"):
                t.data[...] = 0.0
        pyr = toy_pyramid(rng)
        branches = align_pyramid(pyr, p)
        out = hrfm_forward(pyr, p).data
        for i, f in enumerate(branches.branches):
            np.testing.assert_allclose(out[:, 8 * i : 8 * (i + 1)], 0.125 * f.data,
                                       rtol=0, atol=1e-15)

    def test_blocks_equal_independent_attention_runs(self):
        rng = np.random.default_rng(9)
        p = make_hrfm_params(rng, (4, 6, 8, 10), width=8)
        branches = align_pyramid(toy_pyramid(rng), p)
        out = hrfm_fuse(branches, p.mfia).data
        for i, inst in enumerate(p.mfia):
            solo = mfia_forward(*branches.branches, inst).data
            np.testing.assert_allclose(out[:, 8 * i : 8 * (i + 1)], solo, rtol=0, atol=0)

    def test_wrong_instance_count_rejected(self):
        rng = np.random.default_rng(10)
        p = make_hrfm_params(rng, (4, 6, 8, 10), width=8)
        branches = align_pyramid(toy_pyramid(rng), p)
        with pytest.raises(ShapeError):
            hrfm_fuse(branches, p.mfia[:3])

    def test_branch_ids_validated_in_order(self):
        rng = np.random.default_rng(11)
        p = make_hrfm_params(rng, (4, 6, 8, 10), width=8)
        with pytest.raises(ShapeError, match="branch"):
            HrfmParams(projections=p.projections,
                       mfia=[p.mfia[1], p.mfia[0], p.mfia[2], p.mfia[3]])

    def test_gradient_through_neck(self):
        rng = np.random.default_rng(12)
        p = make_hrfm_params(rng, (3, 4, 5, 6), width=4)
        pyr = toy_pyramid(rng, chans=(3, 4, 5, 6), base=8)

        def fn(x):
            moved = PyramidFeatures(x, pyr.p2, pyr.p3, pyr.p4)
            return sum_all(hrfm_forward(moved, p))

        assert grad_check(fn, Tensor(np.random.default_rng(13).standard_normal((1, 3, 8, 8))),
                          1e-5) < 1e-4
