import io
import json
import math

import numpy as np
import pytest

from hbox2rbox import synth, trainer
from hbox2rbox.abbs import COARSE_GRID, TIGHT_GRID
from hbox2rbox.errors import InvalidArgumentError
from hbox2rbox.geom import HBox, RBox
from hbox2rbox.losses import flp_loss, rot_loss


@pytest.fixture(scope="module")
def scenes():
    return synth.generate_dataset(2, seed=21, config=synth.SceneConfig(noise=0.0))


@pytest.fixture(scope="module")
def data_c(scenes):
    return trainer.prepare(scenes, "c_hbox")


def dyadic(x, bits=20):
    """Round to a multiple of 2**-bits so sums and differences stay exact."""
    return np.round(np.asarray(x) * 2.0**bits) / 2.0**bits


class TestConfig:
    def test_defaults(self):
        cfg = trainer.TrainConfig()
        assert cfg.grid == TIGHT_GRID and cfg.supervision == "t_hbox"
        assert cfg.enable_abbs and cfg.enable_spa

    @pytest.mark.parametrize("kw", [dict(supervision="x"), dict(iters=-1), dict(step_size=0), dict(spa_grid=7), dict(optimizer="sgd")])
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgumentError):
            trainer.TrainConfig(**kw)


class TestInit:
    def test_copies_gt_with_jitter(self):
        gt = HBox(10, 10, 8, 4)
        p = trainer.init_params(gt, rng=np.random.default_rng(0))
        for view in trainer.VIEWS:
            v = p.view(view)[0]
            assert (v[0], v[1], v[4]) == (10, 10, 0)
            assert abs(v[2] / 8 - 1) <= 0.02 and abs(v[3] / 4 - 1) <= 0.02

    def test_rotated_view_uses_its_own_gt(self, data_c):
        R = 0.9
        gt_rot = trainer.rotated_view_gt(data_c, R, "c_hbox")
        p = trainer.init_params(data_c.gt_ori, gt_rot, data_c.gt_flp, np.random.default_rng(1))
        np.testing.assert_array_equal(p.rot[:, :2], gt_rot[:, :2])
        np.testing.assert_array_equal(p.flp[:, :2], data_c.gt_flp[:, :2])

    def test_rotated_tight_boxes_match_rasterised_shapes(self, scenes):
        data = trainer.prepare(scenes, "t_hbox")
        R = 0.8
        got = trainer.rotated_view_gt(data, R, "t_hbox")
        i = 0
        for scene in scenes:
            center = (scene.size[1] / 2, scene.size[0] / 2)
            c, s = math.cos(R), math.sin(R)
            for spec in scene.objects:
                poly = synth.make_shape(spec) - center
                turned = np.stack([poly[:, 0] * c - poly[:, 1] * s, poly[:, 0] * s + poly[:, 1] * c], axis=1) + center
                expect = synth.polygon_tight_hbox(turned)
                np.testing.assert_allclose(got[i], expect.as_array())
                i += 1


class TestSizeTying:
    def test_swap_aware(self):
        ori = np.array([[0, 0, 10, 4, 0.1]])
        rot = np.array([[0, 0, 1, 1, 0.1 + 0.5 + math.pi / 2]])
        flp = np.array([[0, 0, 1, 1, -0.1]])
        p = trainer.ObjectParams(ori, rot, flp, R=0.5)
        swaps = trainer.view_swaps(p)
        assert swaps["rot"][0] and not swaps["flp"][0]
        trainer.tie_sizes(p)
        np.testing.assert_array_equal(p.rot[0, 2:4], [4, 10])
        np.testing.assert_array_equal(p.flp[0, 2:4], [10, 4])


class TestStep:
    def test_true_boxes_are_a_fixed_point_without_symmetry_term(self, data_c):
        R = 0.7
        p = trainer.consistent_views(data_c, data_c.true, R)
        cfg = trainer.TrainConfig(supervision="c_hbox", grid=COARSE_GRID, R_sampler=R, enable_spa=False)
        new, b = trainer.step(p, data_c, cfg, R)
        for term in (b.l_reg, b.l_rot, b.l_flp, b.total):
            assert np.abs(term).max() <= 1e-3
        for view in trainer.VIEWS:
            assert np.abs(new.view(view) - p.view(view)).max() < 1e-3

    def test_symmetry_term_near_zero_at_truth(self, data_c):
        R = 0.7
        p = trainer.consistent_views(data_c, data_c.true, R)
        cfg = trainer.TrainConfig(supervision="c_hbox", grid=COARSE_GRID, R_sampler=R)
        new, b = trainer.step(p, data_c, cfg, R)
        # Pixel aliasing leaves the halves of a rotated raster slightly unequal.
        assert b.l_spa.max() <= 2e-2
        assert np.abs(new.ori[:, :4] - p.ori[:, :4]).max() < 0.2
        assert np.abs(new.ori[:, 4] - p.ori[:, 4]).max() < 1e-2

    def test_abbs_lowers_regression_loss_of_true_box(self):
        spec = synth.ShapeSpec("cross", RBox(128, 128, 90, 60, math.radians(30)), 0.9)
        scene = synth.Scene(synth.rasterize([spec], 256), [spec])
        data = trainer.prepare([scene], "t_hbox")
        R = 0.6
        p = trainer.consistent_views(data, data.true, R)
        gt_rot = trainer.rotated_view_gt(data, R, "t_hbox")
        losses = {}
        for abbs in (False, True):
            cfg = trainer.TrainConfig(enable_abbs=abbs, enable_spa=False)
            losses[abbs] = trainer.object_losses(data, p, {"ori": data.gt_ori, "rot": gt_rot, "flp": data.gt_flp}, R, cfg, np.zeros(1, bool)).l_reg[0]
        assert losses[False] > 0.05
        assert losses[True] < losses[False]

    def test_wrong_but_consistent_triple(self, scenes):
        data = trainer.prepare(scenes, "t_hbox")
        R = float(dyadic(1.1))
        wrong = data.true.copy()
        wrong[:, 4] = dyadic(wrong[:, 4] + math.radians(30))
        p = trainer.consistent_views(data, wrong, R)
        assert np.all(rot_loss(p.ori[:, 4], p.rot[:, 4], R) == 0.0)
        assert np.all(flp_loss(p.ori[:, 4], p.flp[:, 4]) == 0.0)
        cfg = trainer.TrainConfig(spa_topk=1.0)
        sel = np.ones(len(data), bool)
        gt_rot = trainer.rotated_view_gt(data, R)
        views = {"ori": data.gt_ori, "rot": gt_rot, "flp": data.gt_flp}
        at_wrong = trainer.object_losses(data, p, views, R, cfg, sel).l_spa
        at_true = trainer.object_losses(data, trainer.consistent_views(data, data.true, R), views, R, cfg, sel).l_spa
        assert np.mean(at_wrong > at_true) >= 0.8
        # The symmetry term is the only angle gradient at the wrong triple.
        grads = trainer.object_gradients(data, p, views, R, cfg, sel)
        assert np.all(grads["rot"][:, 4] == 0.0) and np.all(grads["flp"][:, 4] == 0.0)
        assert np.all(grads["ori"][:, 4] != 0.0)

    def test_sizes_stay_positive(self, data_c):
        p = trainer.consistent_views(data_c, data_c.true, 0.5)
        grads = {v: np.zeros((len(data_c), 5)) for v in trainer.VIEWS}
        grads["ori"][:, 2:4] = 1e6
        out = trainer.apply_update(data_c, p, grads, trainer.TrainConfig(), 1.0)
        for view in trainer.VIEWS:
            assert np.all(out.view(view)[:, 2:4] >= 2.0)


class TestRun:
    def test_deterministic_and_logged(self, scenes):
        cfg = trainer.TrainConfig(iters=15, seed=3)
        buf = io.StringIO()
        a = trainer.run(cfg, scenes, on_step=lambda it, b: trainer.write_step_log(buf, it, b))
        b = trainer.run(cfg, scenes)
        np.testing.assert_array_equal(a.ious, b.ious)
        np.testing.assert_array_equal(a.loss_curve, b.loss_curve)
        assert a.boxes == b.boxes
        lines = buf.getvalue().splitlines()
        assert len(lines) == 15 * len(a.boxes)
        assert set(json.loads(lines[0])) == {"iter", "object_id", "l_reg", "l_rot", "l_flp", "l_spa", "total"}

    def test_zero_iters_resume_is_identity(self, scenes):
        cfg = trainer.TrainConfig(iters=5)
        first = trainer.run(cfg, scenes)
        again = trainer.run(trainer.config_with(cfg, iters=0), scenes, params=first.params)
        assert again.boxes == first.boxes
        np.testing.assert_array_equal(again.ious, first.ious)

    def test_summary_records_and_detections(self, scenes):
        data = trainer.prepare(scenes)
        rep = trainer.run(trainer.TrainConfig(iters=3), data)
        s = rep.summary()
        assert s["objects"] == len(data) and 0 <= s["mean_iou"] <= 1
        recs = list(rep.to_records())
        assert recs[0]["kind"] == data.kinds[0]
        dets = trainer.detections(rep, data)
        assert all(0.0 <= d.score <= 1.0 for d in dets)
        assert [d.cls for d in dets] == data.kinds

    def test_smoothed_loss_decreases(self, scenes):
        rep = trainer.run(trainer.TrainConfig(seed=1), scenes)
        curves = rep.object_curves
        alpha = 2.0 / (50 + 1)
        ema = np.zeros_like(curves)
        ema[0] = curves[0]
        for t in range(1, len(curves)):
            ema[t] = alpha * curves[t] + (1 - alpha) * ema[t - 1]
        assert np.mean(ema[-1] <= ema[10]) >= 0.95
