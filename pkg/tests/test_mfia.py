"""Tests for the cross-branch attention module.

The oracle below re-derives the whole attention chain in plain numpy
(1x1 convs as matrix products, the 7x7 conv via the shared loop oracle).
"""

import numpy as np
import pytest
from oracles import conv_oracle

from llts.mfia import (
    CamParams,
    MfiaParams,
    _mfca_weights,
    cam,
    make_cam,
    make_mfia_params,
    make_sam,
    mfca,
    mfia_forward,
    sam,
)
from llts.tensorops import ShapeError, Tensor, grad_check, sum_all


def rand_branches(rng, n=2, c=8, h=5, w=6):
    return tuple(Tensor(rng.standard_normal((n, c, h, w))) for _ in range(4))


def zero_mfia(channels=8, ratio=4, branch=1):
    p = make_mfia_params(np.random.default_rng(0), branch, channels, ratio)
    for _, t in p.param_items("m"):
        t.data[...] = 0.0
    return p


def cam_oracle(fs, p: CamParams):
    """pool -> concat -> squeeze/expand matrix products -> sigmoid."""
    d = np.concatenate([f.data.mean(axis=(2, 3)) for f in fs], axis=1)  # [N,4C]
    wr = p.reduce.weight.data.reshape(p.reduce.out_channels, -1)
    we = p.expand.weight.data.reshape(p.expand.out_channels, -1)
    z = np.maximum(d @ wr.T + p.reduce.bias.data, 0.0)
    z = z @ we.T + p.expand.bias.data
    return 1.0 / (1.0 + np.exp(-z))  # [N,C]


def sam_oracle(fcs, p):
    s = sum(f.data for f in fcs)
    stats = np.stack([s.mean(axis=1), s.max(axis=1)], axis=1)  # [N,2,H,W]
    z = conv_oracle(stats, p.conv7.weight.data, p.conv7.bias.data, 1, 3)
    return 1.0 / (1.0 + np.exp(-z))  # [N,1,H,W]


def mfia_oracle(fs, p: MfiaParams):
    a1 = cam_oracle(fs, p.cam1)[:, :, None, None]
    weighted = [Tensor(a1 * f.data) for f in fs]
    a2 = cam_oracle(weighted, p.cam2)[:, :, None, None]
    fcs = [Tensor(a1 * a2 * f.data) for f in fs]
    beta = sam_oracle(fcs, p.sam)
    return beta * fcs[p.branch - 1].data


class TestCam:
    def test_zero_params_give_half(self):
        rng = np.random.default_rng(1)
        p = zero_mfia(channels=8)
        alpha = cam(*rand_branches(rng), p.cam1)
        np.testing.assert_allclose(alpha.data, 0.5, rtol=0, atol=0)
        assert alpha.shape == (2, 8)

    def test_values_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(2)
        p = make_cam(rng, 8)
        alpha = cam(*rand_branches(rng), p).data
        assert (alpha > 0).all() and (alpha < 1).all()

    def test_matches_transcription_oracle(self):
        rng = np.random.default_rng(3)
        p = make_cam(rng, 8)
        fs = rand_branches(rng)
        np.testing.assert_allclose(cam(*fs, p).data, cam_oracle(fs, p), rtol=0, atol=1e-9)

    def test_mismatched_branch_shapes_rejected(self):
        rng = np.random.default_rng(4)
        f1, f2, f3, _ = rand_branches(rng)
        bad = Tensor(rng.standard_normal((2, 8, 5, 5)))
        with pytest.raises(ShapeError):
            cam(f1, f2, f3, bad, make_cam(rng, 8))

    def test_ratio_must_divide_channels(self):
        with pytest.raises(ShapeError):
            make_cam(np.random.default_rng(0), 6, ratio=4)


class TestMfca:
    def test_zero_params_quarter_the_branch(self):
        rng = np.random.default_rng(5)
        p = zero_mfia(channels=8)
        fs = rand_branches(rng)
        for i in range(1, 5):
            got = mfca(*fs, p.cam1, p.cam2, i)
            np.testing.assert_allclose(got.data, 0.25 * fs[i - 1].data, rtol=0, atol=1e-15)

    def test_saturated_cams_pass_branch_through(self):
        rng = np.random.default_rng(6)
        p = make_mfia_params(rng, 1, 8)
        for c in (p.cam1, p.cam2):
            c.expand.weight.data[...] = 0.0
            c.expand.bias.data[...] = 50.0  # sigmoid(50) ~ 1
        fs = rand_branches(rng)
        got = mfca(*fs, p.cam1, p.cam2, 2)
        np.testing.assert_allclose(got.data, fs[1].data, rtol=0, atol=1e-3)

    def test_matches_composed_oracle(self):
        rng = np.random.default_rng(7)
        p = make_mfia_params(rng, 3, 8)
        fs = rand_branches(rng)
        a1 = cam_oracle(fs, p.cam1)[:, :, None, None]
        a2 = cam_oracle([Tensor(a1 * f.data) for f in fs], p.cam2)[:, :, None, None]
        want = a1 * a2 * fs[2].data
        np.testing.assert_allclose(mfca(*fs, p.cam1, p.cam2, 3).data, want, rtol=0, atol=1e-9)

    def test_weights_multiply_the_original_branch(self):
        # doubling branch 4 must not change the *ratio* out/f1 beyond the
        # alpha recomputation; specifically out is always alpha1*alpha2*f_i,
        # never alpha2 applied to an already-weighted feature
        rng = np.random.default_rng(8)
        p = make_mfia_params(rng, 1, 8)
        fs = rand_branches(rng)
        a1, a2 = (x.data[:, :, None, None] for x in _mfca_weights(*fs, p.cam1, p.cam2))
        np.testing.assert_allclose(
            mfca(*fs, p.cam1, p.cam2, 1).data, a1 * a2 * fs[0].data, rtol=0, atol=1e-12
        )


class TestSam:
    def test_zero_params_give_half(self):
        rng = np.random.default_rng(9)
        p = zero_mfia(channels=8)
        beta = sam(*rand_branches(rng), p.sam)
        np.testing.assert_allclose(beta.data, 0.5, rtol=0, atol=0)
        assert beta.shape == (2, 1, 5, 6)

    def test_values_strictly_inside_unit_interval(self):
        rng = np.random.default_rng(10)
        beta = sam(*rand_branches(rng), make_sam(rng)).data
        assert (beta > 0).all() and (beta < 1).all()

    def test_matches_transcription_oracle(self):
        rng = np.random.default_rng(11)
        p = make_mfia_params(rng, 1, 8)
        fs = rand_branches(rng)
        np.testing.assert_allclose(sam(*fs, p.sam).data, sam_oracle(fs, p.sam)[:, :],
                                   rtol=0, atol=1e-9)


class TestMfiaForward:
    def test_zero_params_give_one_eighth(self):
        rng = np.random.default_rng(12)
        fs = rand_branches(rng)
        for branch in range(1, 5):
            p = zero_mfia(channels=8, branch=branch)
            got = mfia_forward(*fs, p)
            np.testing.assert_allclose(got.data, 0.125 * fs[branch - 1].data, rtol=0, atol=1e-15)

    def test_output_shape_matches_branch(self):
        rng = np.random.default_rng(13)
        fs = rand_branches(rng, n=3, c=8, h=4, w=7)
        assert mfia_forward(*fs, make_mfia_params(rng, 2, 8)).shape == (3, 8, 4, 7)

    def test_matches_end_to_end_oracle(self):
        rng = np.random.default_rng(14)
        for branch in (1, 4):
            p = make_mfia_params(rng, branch, 8)
            fs = rand_branches(rng)
            np.testing.assert_allclose(mfia_forward(*fs, p).data, mfia_oracle(fs, p),
                                       rtol=0, atol=1e-9)

    def test_attenuation_only_and_sign_preserving(self):
        rng = np.random.default_rng(15)
        p = make_mfia_params(rng, 1, 8)
        fs = rand_branches(rng)
        out = mfia_forward(*fs, p).data
        f1 = fs[0].data
        assert (np.abs(out) <= np.abs(f1) + 1e-15).all()
        assert (np.sign(out) == np.sign(f1))[f1 != 0].all()

    def test_batch_permutation_equivariance(self):
        rng = np.random.default_rng(16)
        p = make_mfia_params(rng, 2, 8)
        fs = rand_branches(rng, n=3)
        out = mfia_forward(*fs, p).data
        perm = [2, 0, 1]
        fs_p = tuple(Tensor(f.data[perm]) for f in fs)
        np.testing.assert_allclose(mfia_forward(*fs_p, p).data, out[perm], rtol=0, atol=1e-12)

    def test_branch_symmetry_with_equal_inputs(self):
        rng = np.random.default_rng(17)
        x = Tensor(rng.standard_normal((2, 8, 5, 5)))
        outs = []
        for branch in range(1, 5):
            p = make_mfia_params(np.random.default_rng(99), branch, 8)  # same params each time
            outs.append(mfia_forward(x, x, x, x, p).data)
        for other in outs[1:]:
            np.testing.assert_allclose(outs[0], other, rtol=0, atol=0)

    def test_gradient_through_full_module(self):
        rng = np.random.default_rng(18)
        p = make_mfia_params(rng, 1, 4)
        f2, f3, f4 = (Tensor(rng.standard_normal((1, 4, 4, 4))) for _ in range(3))

        def fn(x):
            return sum_all(mfia_forward(x, f2, f3, f4, p))

        assert grad_check(fn, Tensor(rng.standard_normal((1, 4, 4, 4))), 1e-5) < 1e-4
