"""Detector tests: assembly, assignment, decoding, suppression, loss, training.

Reference behavior comes from the loop oracles in oracles.py; training and
checkpoint tests run tiny configurations end to end.
"""

import math

import numpy as np
import pytest
from oracles import assign_oracle, conv_oracle, decode_oracle, loss_oracle, nms_oracle

from llts.detector import (
    Detection,
    DivergenceError,
    ModelConfig,
    assign_targets,
    backbone_forward,
    build_model,
    checkpoint_bytes,
    decode_predictions,
    detection_loss,
    detections_to_array,
    evaluate,
    expected_param_count,
    head_forward,
    hrfm_param_count,
    labels_to_gt_array,
    load_checkpoint,
    mfia_param_count,
    model_forward,
    neck_conv_param_count,
    nms,
    pgfe_param_count,
    save_checkpoint,
    stem_param_count,
    train_loop,
)
from llts.tensorops import (
    NumericError,
    ShapeError,
    Tensor,
    grad_check_param,
)

# 64x64-capable toy model, dims kept small so loop oracles stay fast
TINY = dict(input_size=64, num_classes=2, stem_channels=8,
            backbone_widths=(8, 12, 16, 24), hrfm_width=16, head_width=16,
            pgfe_stages=1, pgfe_blocks=1)
# even smaller, for training and transcription tests
MICRO = dict(input_size=32, num_classes=2, stem_channels=4,
             backbone_widths=(4, 6, 8, 8), hrfm_width=4, head_width=8,
             pgfe_stages=1, pgfe_blocks=1)


def tiny_config(**kw):
    return ModelConfig(**{**TINY, **kw})


def micro_config(**kw):
    return ModelConfig(**{**MICRO, **kw})


def random_labels(rng, k, num_classes=2, inset=False):
    """Normalized (class, cx, cy, w, h) rows; inset keeps boxes off the edges."""
    rows = np.zeros((k, 5))
    rows[:, 0] = rng.integers(0, num_classes, k)
    if inset:
        rows[:, 3:5] = rng.uniform(0.08, 0.25, (k, 2))
        for i in range(k):
            half = rows[i, 3:5] / 2
            rows[i, 1] = rng.uniform(half[0], 1 - half[0])
            rows[i, 2] = rng.uniform(half[1], 1 - half[1])
    else:
        rows[:, 1:3] = rng.uniform(0, 1, (k, 2))
        rows[:, 3:5] = rng.uniform(0, 0.3, (k, 2))
    return rows


def zero_all(model):
    for _, t in model.named_params():
        t.data[:] = 0.0


class TestModelConfig:
    def test_defaults_are_valid(self):
        cfg = ModelConfig()
        assert cfg.grid_size == 160
        assert cfg.fused_channels == 512
        assert cfg.stride == 4

    def test_input_size_must_be_multiple_of_32(self):
        with pytest.raises(ShapeError):
            ModelConfig(input_size=100)
        with pytest.raises(ShapeError):
            ModelConfig(input_size=0)

    def test_field_validation(self):
        with pytest.raises(ShapeError):
            ModelConfig(num_classes=0)
        with pytest.raises(ShapeError):
            ModelConfig(backbone_widths=(8, 8, 8))
        with pytest.raises(ShapeError):
            ModelConfig(hrfm_width=30, attention_ratio=4)  # 4 does not divide 30
        with pytest.raises(ShapeError):
            ModelConfig(conf_threshold=1.5)

    def test_ratio_unchecked_when_attention_off(self):
        cfg = ModelConfig(hrfm_width=30, attention_ratio=4, enable_mfia=False)
        assert cfg.hrfm_width == 30

    def test_dict_round_trip(self):
        cfg = tiny_config(enable_hrfm=False, conf_threshold=0.3)
        again = ModelConfig.from_dict(cfg.to_dict())
        assert again == cfg
        assert isinstance(again.backbone_widths, tuple)

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ValueError, match="unknown"):
            ModelConfig.from_dict({"input_size": 64, "bogus": 1})


class TestModelAssembly:
    @pytest.mark.parametrize("pg", [False, True])
    @pytest.mark.parametrize("hr", [False, True])
    @pytest.mark.parametrize("mf", [False, True])
    def test_param_count_matches_closed_form(self, pg, hr, mf):
        cfg = tiny_config(enable_pgfe=pg, enable_hrfm=hr, enable_mfia=mf)
        model = build_model(cfg, seed=3)
        assert model.param_count() == expected_param_count(cfg)

    def test_attention_toggle_delta_is_its_param_sum(self):
        on = tiny_config(enable_mfia=True)
        off = tiny_config(enable_mfia=False)
        got = build_model(on, 0).param_count() - build_model(off, 0).param_count()
        assert got == 4 * mfia_param_count(on)

    def test_neck_toggle_delta_matches_closed_forms(self):
        on, off = tiny_config(enable_hrfm=True), tiny_config(enable_hrfm=False)
        got = build_model(on, 0).param_count() - build_model(off, 0).param_count()
        assert got == hrfm_param_count(on) - neck_conv_param_count(off)

    def test_front_end_toggle_delta_matches_closed_forms(self):
        on, off = tiny_config(enable_pgfe=True), tiny_config(enable_pgfe=False)
        got = build_model(on, 0).param_count() - build_model(off, 0).param_count()
        assert got == pgfe_param_count(on) - stem_param_count(off)

    def test_same_seed_same_params(self):
        a = build_model(tiny_config(), seed=11)
        b = build_model(tiny_config(), seed=11)
        for (na, ta), (nb, tb) in zip(a.named_params(), b.named_params()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)

    def test_class_bias_prior(self):
        model = build_model(tiny_config(), seed=0)
        assert np.all(model.head[2].bias.data[4:] == -4.0)
        assert np.all(model.head[2].bias.data[:4] == 0.0)

    def test_backbone_level_sizes(self):
        model = build_model(tiny_config(), seed=0, dtype=np.float64)
        x = Tensor(np.random.default_rng(0).random((1, 8, 64, 64)))
        pyr = backbone_forward(model, x)
        assert [p.shape[2:] for p in pyr.levels] == [(16, 16), (8, 8), (4, 4), (2, 2)]
        assert [p.shape[1] for p in pyr.levels] == [8, 12, 16, 24]

    def test_zero_input_gives_zero_pyramids(self):
        model = build_model(tiny_config(), seed=0, dtype=np.float64)
        pyr = backbone_forward(model, Tensor(np.zeros((2, 8, 64, 64))))
        for p in pyr.levels:  # biases start at zero, so zeros propagate
            assert np.all(p.data == 0.0)

    def test_backbone_rejects_indivisible_size(self):
        model = build_model(tiny_config(), seed=0, dtype=np.float64)
        with pytest.raises(ShapeError, match="divisible"):
            backbone_forward(model, Tensor(np.zeros((1, 8, 48, 48))))

    def test_head_softplus_of_zero_is_ln2(self):
        model = build_model(tiny_config(), seed=0, dtype=np.float64)
        for spec in model.head:
            spec.weight.data[:] = 0.0
            spec.bias.data[:] = 0.0
        raw = head_forward(model, Tensor(np.zeros((1, 64, 4, 4))))
        assert np.allclose(raw.data[:, :4], math.log(2.0), atol=1e-15)
        assert np.all(raw.data[:, 4:] == 0.0)

    def test_head_matches_transcription(self):
        rng = np.random.default_rng(7)
        model = build_model(micro_config(), seed=5, dtype=np.float64)
        fused = rng.standard_normal((1, 16, 4, 4))
        got = head_forward(model, Tensor(fused)).data

        h = fused
        for spec in model.head[:2]:
            h = np.maximum(conv_oracle(h, spec.weight.data, spec.bias.data, 1, spec.padding), 0.0)
        last = model.head[2]
        raw = conv_oracle(h, last.weight.data, last.bias.data, 1, 0)
        want = np.concatenate([np.logaddexp(0.0, raw[:, :4]), raw[:, 4:]], axis=1)
        np.testing.assert_allclose(got, want, atol=1e-9)

    @pytest.mark.parametrize("pg,hr,mf", [(True, True, True), (True, True, False),
                                          (True, False, False), (False, True, True),
                                          (False, False, False)])
    def test_full_forward_shape_all_toggle_combos(self, pg, hr, mf):
        cfg = micro_config(enable_pgfe=pg, enable_hrfm=hr, enable_mfia=mf)
        model = build_model(cfg, seed=1, dtype=np.float64)
        img = Tensor(np.random.default_rng(2).random((2, 3, 32, 32)))
        raw = model_forward(model, img)
        assert raw.shape == (2, 6, 8, 8)
        assert np.all(raw.data[:, :4] >= 0.0)

    def test_forward_rejects_non_rgb(self):
        model = build_model(micro_config(), seed=0, dtype=np.float64)
        with pytest.raises(ShapeError):
            model_forward(model, Tensor(np.zeros((1, 4, 32, 32))))


class TestAssignTargets:
    def test_centered_box_single_positive(self):
        tm = assign_targets(np.array([[0, 0.5, 0.5, 0.25, 0.25]]), 16, 4, 2)
        assert tm.num_positives == 1
        assert tm.pos_mask[8, 8]
        assert tm.cls[0, 8, 8] == 1.0 and tm.cls[1, 8, 8] == 0.0
        # cell center (34, 34), box corners 24..40: l = 10/4, r = 6/4
        np.testing.assert_allclose(tm.box[:, 8, 8], [2.5, 2.5, 1.5, 1.5])

    def test_empty_labels_all_negative(self):
        tm = assign_targets(np.zeros((0, 5)), 8, 4, 3)
        assert tm.num_positives == 0 and tm.skipped == 0
        assert not tm.cls.any() and not tm.box.any()

    def test_degenerate_boxes_skipped_and_counted(self):
        labels = np.array([[0, 0.5, 0.5, 0.01, 0.2],   # 0.64 px wide at size 64
                           [1, 0.25, 0.25, 0.2, 0.2]])
        tm = assign_targets(labels, 16, 4, 2)
        assert tm.skipped == 1
        assert tm.num_positives == 1

    def test_shared_cell_smaller_area_wins(self):
        big = [0, 0.5, 0.5, 0.4, 0.4]
        small = [1, 0.51, 0.51, 0.1, 0.1]
        for order in ([big, small], [small, big]):
            tm = assign_targets(np.array(order), 16, 4, 2)
            assert tm.num_positives == 1
            gy, gx = np.argwhere(tm.pos_mask)[0]
            assert tm.cls[1, gy, gx] == 1.0

    def test_equal_area_tie_keeps_first(self):
        a = [0, 0.5, 0.5, 0.2, 0.2]
        b = [1, 0.5, 0.5, 0.2, 0.2]
        tm = assign_targets(np.array([a, b]), 16, 4, 2)
        assert tm.cls[0].sum() == 1.0 and tm.cls[1].sum() == 0.0

    def test_center_on_far_edge_lands_in_last_cell(self):
        tm = assign_targets(np.array([[0, 1.0, 1.0, 0.2, 0.2]]), 8, 4, 1)
        assert tm.pos_mask[7, 7]

    def test_rejects_bad_class_id(self):
        with pytest.raises(ValueError, match="class id"):
            assign_targets(np.array([[5, 0.5, 0.5, 0.2, 0.2]]), 8, 4, 2)

    def test_matches_cell_scan_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            labels = random_labels(rng, int(rng.integers(0, 8)), num_classes=3)
            tm = assign_targets(labels, 8, 4, 3)
            cls, box, pos, skipped = assign_oracle(labels, 8, 4, 3)
            np.testing.assert_array_equal(tm.pos_mask, pos)
            np.testing.assert_allclose(tm.cls, cls, atol=1e-12)
            np.testing.assert_allclose(tm.box, box, atol=1e-12)
            assert tm.skipped == skipped


class TestDecodePredictions:
    def test_zero_map_above_half_confidence_empty(self):
        # all class sigmoids are exactly 0.5, below a 0.6 threshold
        assert decode_predictions(np.zeros((6, 8, 8)), 0.6, 4) == []

    def test_zero_logit_head_output_emits_every_cell(self):
        raw = np.zeros((6, 8, 8))
        raw[:4] = math.log(2.0)  # what the head yields on zero logits
        dets = decode_predictions(raw, 0.25, 4)
        assert len(dets) == 64
        assert all(d.confidence == 0.5 for d in dets)

    def test_single_hot_cell_arithmetic(self):
        raw = np.zeros((7, 8, 8))
        raw[:4, 3, 5] = [1.0, 2.0, 1.0, 2.0]
        raw[6, 3, 5] = 3.0  # class 2 logit
        dets = decode_predictions(raw, 0.9, 4)
        assert len(dets) == 1
        d = dets[0]
        assert d.class_id == 2
        assert d.confidence == pytest.approx(1 / (1 + math.exp(-3.0)), abs=1e-12)
        # cell center (22, 14) +- ltrb * stride, nothing reaches the border
        assert d.box == pytest.approx((22 - 4, 14 - 8, 22 + 4, 14 + 8))

    def test_boxes_clip_to_image(self):
        raw = np.zeros((6, 8, 8))
        raw[:4, 0, 0] = 100.0
        raw[4, 0, 0] = 5.0
        (d,) = decode_predictions(raw, 0.9, 4)
        assert d.box == (0.0, 0.0, 32.0, 32.0)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            raw = rng.standard_normal((7, 6, 6))
            raw[:4] = np.abs(raw[:4])
            got = decode_predictions(raw, 0.3, 4)
            want = decode_oracle(raw, 0.3, 4)
            assert len(got) == len(want)
            for d, (cid, conf, *box) in zip(got, want):
                assert d.class_id == cid
                assert d.confidence == pytest.approx(conf, abs=1e-12)
                assert d.box == pytest.approx(tuple(box), abs=1e-9)

    def test_detection_type_rejects_nonsense(self):
        with pytest.raises(ValueError):
            Detection(0, 0.5, (10, 10, 5, 20))
        with pytest.raises(ValueError):
            Detection(0, 1.5, (0, 0, 5, 5))


class TestNms:
    def test_identical_pair_keeps_higher_confidence(self):
        dets = [Detection(0, 0.8, (0, 0, 10, 10)), Detection(0, 0.9, (0, 0, 10, 10))]
        kept = nms(dets, 0.45)
        assert kept == [dets[1]]

    def test_disjoint_boxes_all_kept(self):
        dets = [Detection(0, 0.9, (0, 0, 10, 10)), Detection(0, 0.8, (20, 20, 30, 30))]
        assert nms(dets, 0.45) == dets

    def test_classes_do_not_suppress_each_other(self):
        dets = [Detection(0, 0.9, (0, 0, 10, 10)), Detection(1, 0.8, (0, 0, 10, 10))]
        assert len(nms(dets, 0.45)) == 2

    def test_confidence_tie_keeps_lower_index(self):
        dets = [Detection(0, 0.7, (0, 0, 10, 10)), Detection(0, 0.7, (1, 1, 11, 11))]
        kept = nms(dets, 0.3)
        assert kept == [dets[0]]

    def test_matches_quadratic_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(30):
            rows = []
            for _ in range(10):
                x, y = rng.uniform(0, 20, 2)
                w, h = rng.uniform(5, 15, 2)
                rows.append((int(rng.integers(0, 2)), round(float(rng.uniform(0.1, 1)), 1),
                             x, y, x + w, y + h))
            dets = [Detection(c, conf, (x1, y1, x2, y2)) for c, conf, x1, y1, x2, y2 in rows]
            want = [dets[i] for i in nms_oracle(rows, 0.45)]
            assert nms(dets, 0.45) == want


def stacked_targets(maps):
    cls = np.stack([t.cls for t in maps])
    box = np.stack([t.box for t in maps])
    pos = np.stack([t.pos_mask for t in maps])
    return cls, box, pos


class TestDetectionLoss:
    def perfect_raw(self, maps, num_classes):
        cls, box, pos = stacked_targets(maps)
        n, _, s, _ = cls.shape
        raw = np.zeros((n, 4 + num_classes, s, s))
        raw[:, :4] = box
        raw[:, 4:] = np.where(cls == 1.0, 20.0, -20.0)
        return raw

    def test_perfect_predictions_near_zero(self):
        rng = np.random.default_rng(1)
        maps = [assign_targets(random_labels(rng, 3, inset=True), 8, 4, 2) for _ in range(2)]
        raw = Tensor(self.perfect_raw(maps, 2))
        total, bd = detection_loss(raw, maps)
        assert bd.total < 1e-6
        assert bd.box_loss == 0.0

    def test_no_positives_pure_negative_bce(self):
        rng = np.random.default_rng(2)
        raw = rng.standard_normal((1, 6, 8, 8))
        raw[:, :4] = np.abs(raw[:, :4])
        empty = assign_targets(np.zeros((0, 5)), 8, 4, 2)
        total, bd = detection_loss(Tensor(raw), [empty])
        assert bd.box_loss == 0.0
        assert bd.num_positives == 0
        assert bd.cls_loss == pytest.approx(float(np.logaddexp(0, raw[:, 4:]).sum()), rel=1e-12)

    def test_matches_straight_line_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            maps = [assign_targets(random_labels(rng, int(rng.integers(0, 5))), 8, 4, 3)
                    for _ in range(2)]
            raw = rng.standard_normal((2, 7, 8, 8))
            raw[:, :4] = np.abs(raw[:, :4])
            total, bd = detection_loss(Tensor(raw), maps)
            ob, oc, ot = loss_oracle(raw, *stacked_targets(maps))
            assert bd.box_loss == pytest.approx(ob, abs=1e-9)
            assert bd.cls_loss == pytest.approx(oc, rel=1e-12)
            assert bd.total == pytest.approx(ot, rel=1e-9)

    def test_mismatched_targets_rejected(self):
        raw = Tensor(np.zeros((2, 6, 8, 8)))
        one = assign_targets(np.zeros((0, 5)), 8, 4, 2)
        with pytest.raises(ShapeError):
            detection_loss(raw, [one])
        with pytest.raises(ShapeError):
            detection_loss(raw, [one, assign_targets(np.zeros((0, 5)), 4, 4, 2)])

    def test_non_finite_raw_reports_diagnostics(self):
        raw = np.zeros((1, 6, 8, 8))
        raw[0, 5, 2, 2] = np.nan
        maps = [assign_targets(np.array([[0, 0.5, 0.5, 0.3, 0.3]]), 8, 4, 2)]
        with pytest.raises(NumericError, match="detection loss"):
            detection_loss(Tensor(raw, check=False), maps)

    def test_gradient_reaches_box_and_class_channels(self):
        rng = np.random.default_rng(8)
        maps = [assign_targets(random_labels(rng, 2, inset=True), 8, 4, 2)]
        base = rng.standard_normal((1, 6, 8, 8))
        base[:, :4] = np.abs(base[:, :4]) + 0.1

        def f():
            total, _ = detection_loss(leaf, maps)
            return total

        leaf = Tensor(base, requires_grad=True)
        err = grad_check_param(f, leaf, max_coords=60, seed=0)
        assert err < 1e-6


class TestEndToEndGradient:
    def test_full_model_gradients_at_64(self):
        """Every parameter family, checked through image -> loss at 64x64."""
        rng = np.random.default_rng(6)
        cfg = tiny_config()
        model = build_model(cfg, seed=2, dtype=np.float64)
        img = Tensor(rng.random((1, 3, 64, 64)))
        maps = [assign_targets(random_labels(rng, 3, inset=True), cfg.grid_size,
                               cfg.stride, cfg.num_classes)]

        def f():
            total, _ = detection_loss(model_forward(model, img), maps)
            return total

        named = dict(model.named_params())
        picks = ["pgfe.stem.weight", "pgfe.pge.cbr1.scale", "pgfe.inn1.cdc_f.weight",
                 "pgfe.fuse.weight", "backbone.conv1.weight", "backbone.conv5.bias",
                 "hrfm.proj1.weight", "hrfm.mfia1.cam1.reduce.weight",
                 "hrfm.mfia2.sam.conv7.weight", "head.conv1.weight", "head.conv3.bias"]
        for name in picks:
            # eps at the small end: larger steps walk across relu kinks in a
            # 20-layer composite and corrupt the central difference
            err = grad_check_param(f, named[name], eps=1e-6, max_coords=2, seed=1)
            assert err < 1e-4, f"{name}: {err}"


def make_dataset(rng, n, size, num_classes=2, k=2):
    return [(rng.random((3, size, size)), random_labels(rng, k, num_classes, inset=True))
            for _ in range(n)]


class TestTraining:
    def test_decode_assign_round_trip_within_one_pixel(self):
        rng = np.random.default_rng(5)
        cfg = micro_config()
        for _ in range(10):
            labels = random_labels(rng, 3, inset=True)
            tm = assign_targets(labels, cfg.grid_size, cfg.stride, cfg.num_classes)
            raw = np.zeros((4 + cfg.num_classes, cfg.grid_size, cfg.grid_size))
            raw[:4] = tm.box
            raw[4:] = np.where(tm.cls == 1.0, 20.0, -20.0)
            dets = decode_predictions(raw, 0.5, cfg.stride)
            assert len(dets) == tm.num_positives
            gts = labels_to_gt_array(labels, cfg.input_size)
            for d in dets:
                sep = np.abs(gts[:, 1:] - np.array(d.box)).max(axis=1)
                best = sep.argmin()
                assert sep[best] < 1.0
                assert int(gts[best, 0]) == d.class_id

    def test_two_runs_same_seed_bitwise_identical(self):
        cfg = micro_config()
        data = make_dataset(np.random.default_rng(0), 3, cfg.input_size)
        runs = [train_loop(data, cfg, epochs=2, seed=7, batch_size=2) for _ in range(2)]
        assert runs[0].final_loss == runs[1].final_loss
        assert runs[0].trace == runs[1].trace
        for (_, a), (_, b) in zip(runs[0].model.named_params(), runs[1].model.named_params()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_loss_decreases_when_overfitting_one_image(self):
        cfg = micro_config()
        data = make_dataset(np.random.default_rng(1), 1, cfg.input_size, k=1)
        result = train_loop(data, cfg, epochs=30, seed=3, batch_size=1, lr=0.05,
                            eval_every=1000)
        assert result.trace[-1]["norm_loss"] < 0.5
        assert result.steps == 30

    def test_trace_columns_populated(self):
        cfg = micro_config()
        data = make_dataset(np.random.default_rng(2), 2, cfg.input_size)
        result = train_loop(data, cfg, epochs=1, seed=0)
        row = result.trace[0]
        for col in ("epoch", "box_loss", "cls_loss", "norm_loss",
                    "precision", "recall", "mAP50", "mAP50_95"):
            assert row[col] != ""
        assert row["epoch"] == 0 and row["norm_loss"] == 1.0

    def test_big_learning_rate_trips_loss_threshold(self):
        cfg = micro_config()
        data = make_dataset(np.random.default_rng(3), 2, cfg.input_size)
        with pytest.raises(DivergenceError, match="1000x"):
            train_loop(data, cfg, epochs=40, seed=1, lr=100.0, eval_every=100)

    def test_absurd_learning_rate_overflows_to_divergence(self):
        # params hit inf before the loss threshold can fire; same abort type
        cfg = micro_config()
        data = make_dataset(np.random.default_rng(3), 2, cfg.input_size)
        with pytest.raises(DivergenceError, match="non-finite") as info:
            train_loop(data, cfg, epochs=40, seed=1, lr=1e5)
        assert isinstance(info.value.trace, list)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            train_loop([], micro_config(), epochs=1, seed=0)

    def test_wrong_image_shape_rejected(self):
        cfg = micro_config()
        bad = [(np.zeros((3, 64, 64)), np.zeros((0, 5)))]
        with pytest.raises(ValueError, match="shape"):
            train_loop(bad, cfg, epochs=1, seed=0)

    def test_evaluate_scores_a_perfect_oracle_model(self):
        # bypass the network: feed raw maps decoded straight from the labels
        rng = np.random.default_rng(4)
        cfg = micro_config()
        labels = [random_labels(rng, 2, inset=True) for _ in range(3)]
        dets_by_image, gts_by_image = [], []
        for rows in labels:
            tm = assign_targets(rows, cfg.grid_size, cfg.stride, cfg.num_classes)
            raw = np.zeros((4 + cfg.num_classes, cfg.grid_size, cfg.grid_size))
            raw[:4] = tm.box
            raw[4:] = np.where(tm.cls == 1.0, 20.0, -20.0)
            dets = nms(decode_predictions(raw, 0.05, cfg.stride), cfg.nms_iou)
            dets_by_image.append(detections_to_array(dets))
            gts_by_image.append(labels_to_gt_array(rows, cfg.input_size))
        from llts.evalkit import map_suite
        report = map_suite(dets_by_image, gts_by_image, range(cfg.num_classes))
        assert report.map50 == 1.0


class TestCheckpoint:
    def test_round_trip_restores_everything(self, tmp_path):
        cfg = micro_config(enable_mfia=False)
        model = build_model(cfg, seed=9, dtype=np.float64)
        img = Tensor(np.random.default_rng(0).random((1, 3, 32, 32)))
        before = model_forward(model, img).data.copy()

        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.config == cfg
        for (na, ta), (nb, tb) in zip(model.named_params(), loaded.named_params()):
            assert na == nb
            np.testing.assert_array_equal(ta.data, tb.data)
        np.testing.assert_array_equal(model_forward(loaded, img).data, before)

    def test_bytes_deterministic(self):
        model = build_model(micro_config(), seed=1)
        assert checkpoint_bytes(model) == checkpoint_bytes(model)

    def test_trained_float32_round_trip(self, tmp_path):
        cfg = micro_config()
        data = make_dataset(np.random.default_rng(5), 2, cfg.input_size)
        model = train_loop(data, cfg, epochs=1, seed=2, eval_every=100).model
        path = tmp_path / "trained.ckpt"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        for (_, a), (_, b) in zip(model.named_params(), loaded.named_params()):
            assert b.dtype == np.float32
            np.testing.assert_array_equal(a.data, b.data)

    def test_rejects_corruption(self, tmp_path):
        model = build_model(micro_config(), seed=0)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model)
        raw = path.read_bytes()
        (tmp_path / "bad_magic.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(tmp_path / "bad_magic.ckpt")
        (tmp_path / "trailing.ckpt").write_bytes(raw + b"\x00")
        with pytest.raises(ValueError, match="trailing"):
            load_checkpoint(tmp_path / "trailing.ckpt")

    def test_manifest_mismatch_detected(self, tmp_path):
        # a checkpoint from one toggle combination must not load into another
        model = build_model(micro_config(enable_pgfe=False), seed=0)
        blob = checkpoint_bytes(model)
        doctored = blob.replace(b'"enable_pgfe":false', b'"enable_pgfe":true ')
        path = tmp_path / "doctored.ckpt"
        path.write_bytes(doctored)
        with pytest.raises(ValueError):
            load_checkpoint(path)
