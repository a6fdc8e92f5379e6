"""Tests for evaluation: diversity proxy identities, IoU arithmetic,
oracle models, reconfigurability probes, and report rendering."""

import json

import numpy as np
import pytest

from layoutgan import autodiff as ad
from layoutgan import data as D
from layoutgan import evaluation as E
from layoutgan.layouts import LabeledBox, with_background
from layoutgan.networks import Generator, GeneratorConfig
from layoutgan.layouts import SHAPES


@pytest.fixture(scope="module")
def shapes16(tmp_path_factory):
    root = tmp_path_factory.mktemp("shapes16")
    D.make_dataset(root, 6, resolution=16, seed=77)
    return D.load_dataset(root)


@pytest.fixture(scope="module")
def tiny_gen():
    cfg = GeneratorConfig(categories=SHAPES, resolution=16,
                          base_channels=16, stage_channels=(12, 10),
                          d_img=16, d_e=8, d_obj=8, mask_size=16)
    return Generator(cfg, np.random.default_rng(4))


class _Out:
    def __init__(self, image, masks_values, labels):
        self.image = ad.constant(image)
        self.masks = type("S", (), {"values": ad.constant(masks_values)})()
        self.argmax_map = np.zeros(image.shape[1:], dtype=np.int64)


class _StubGen:
    """Fake generator serving canned masks keyed by the layout's boxes."""

    def __init__(self, resolution, masks_by_boxes, d_img=8, d_obj=8):
        self.config = type("C", (), {"d_img": d_img, "d_obj": d_obj,
                                     "resolution": resolution})()
        self.resolution = resolution
        self.masks_by_boxes = masks_by_boxes

    def forward(self, inst, codes):
        key = tuple(b.box for b in inst.instances[1:])
        fg = self.masks_by_boxes[key]
        n = inst.n_instances
        stack = np.zeros((n, self.resolution, self.resolution))
        stack[0] = 1.0
        for i in range(n - 1):
            stack[i + 1] = fg[i]
        img = np.zeros((3, self.resolution, self.resolution),
                       dtype=np.float32)
        return _Out(img, stack, inst.labels)


class TestDiversityProxy:
    def test_zero_on_identical(self, shapes16):
        img = shapes16.samples[0].image
        assert E.diversity_proxy(img, img) == 0.0

    def test_symmetric_and_positive(self, shapes16):
        rng = np.random.default_rng(3)
        for _ in range(5):
            a = rng.normal(size=(3, 16, 16)).astype(np.float32)
            b = rng.normal(size=(3, 16, 16)).astype(np.float32)
            assert E.diversity_proxy(a, b) == E.diversity_proxy(b, a)
            assert E.diversity_proxy(a, b) > 0.0

    def test_noise_pair_beats_identical_pair(self, shapes16):
        img = shapes16.samples[0].image
        noise = np.random.default_rng(1).normal(
            size=img.shape).astype(np.float32)
        assert E.diversity_proxy(img, noise) > E.diversity_proxy(img, img)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ad.ContractError):
            E.diversity_proxy(np.zeros((3, 16, 16)), np.zeros((3, 8, 8)))


class TestDiversityScore:
    def test_needs_at_least_two_styles(self, tiny_gen, shapes16):
        with pytest.raises(ad.ContractError, match="k >= 2"):
            E.diversity_score(tiny_gen, [shapes16.samples[0].layout], k=1)

    def test_style_blind_model_scores_zero(self, shapes16):
        layout = shapes16.samples[0].layout
        key = tuple(b.box for b in layout.boxes)
        masks = {key: [m.astype(float) for m in shapes16.samples[0].gt_masks]}
        stub = _StubGen(16, masks)
        out = E.diversity_score(stub, [layout], k=3)
        assert out["mean"] == 0.0

    def test_real_model_deterministic(self, tiny_gen, shapes16):
        layouts = [s.layout for s in shapes16.samples[:2]]
        a = E.diversity_score(tiny_gen, layouts, k=2, seed=5)
        b = E.diversity_score(tiny_gen, layouts, k=2, seed=5)
        assert a == b
        assert a["mean"] > 0.0
        assert len(a["per_layout"]) == 2


class TestMaskIou:
    def test_identical(self):
        m = np.random.default_rng(0).random((8, 8))
        assert E.mask_iou(m, m) == 1.0

    def test_disjoint(self):
        assert E.mask_iou(np.eye(6), 1.0 - np.eye(6)) == 0.0

    def test_half_overlapping_equal_rects(self):
        a = np.zeros((4, 8))
        a[:, :4] = 1.0
        b = np.zeros((4, 8))
        b[:, 2:6] = 1.0
        assert E.mask_iou(a, b) == pytest.approx(1.0 / 3.0)

    def test_both_empty_counts_as_match(self):
        assert E.mask_iou(np.zeros((5, 5)), np.zeros((5, 5))) == 1.0

    def test_invariant_under_shared_crop(self):
        rng = np.random.default_rng(2)
        a = (rng.random((12, 12)) > 0.5).astype(float)
        b = (rng.random((12, 12)) > 0.5).astype(float)
        a[:, :3] = a[:, 9:] = 0.0
        b[:, :3] = b[:, 9:] = 0.0
        a[:3] = a[9:] = b[:3] = b[9:] = 0.0
        full = E.mask_iou(a, b)
        cropped = E.mask_iou(a[3:9, 3:9], b[3:9, 3:9])
        assert full == cropped

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ad.ContractError):
            E.mask_iou(np.zeros((4, 4)), np.zeros((5, 5)))


class TestMeanIouReport:
    def test_oracle_model_scores_one(self, shapes16):
        masks = {}
        for s in shapes16.samples:
            key = tuple(b.box for b in s.layout.boxes)
            masks[key] = [m.astype(float) for m in s.gt_masks]
        rep = E.mean_iou_report(_StubGen(16, masks), shapes16)
        assert rep["mean"] == 1.0
        assert all(v == 1.0 for v in rep["per_category"].values())
        assert rep["n_instances"] == sum(
            s.layout.m for s in shapes16.samples)

    def test_full_box_on_disk_is_pi_over_four(self, tmp_path):
        # one large centered circle; a full-box mask overlaps it by the
        # area ratio of a disk inscribed in its bounding square
        R = 64
        mask = D.circle_mask(R, 32.0, 32.0, 20.0)
        box = D.tight_box(mask)
        from layoutgan.layouts import Layout
        layout = Layout(lattice=(R, R),
                        boxes=(LabeledBox(label=1, box=box),))
        sample = D.Sample(sample_id="0", image=np.zeros((3, R, R),
                                                        dtype=np.float32),
                          layout=layout, gt_masks=mask[None])
        ds = D.Dataset(root=None, resolution=R, categories=SHAPES,
                       samples=(sample,))
        full = np.zeros((R, R))
        from layoutgan.layouts import box_to_pixels
        r0, c0, r1, c1 = box_to_pixels(box, R, R)
        full[r0:r1, c0:c1] = 1.0
        rep = E.mean_iou_report(_StubGen(R, {(box,): [full]}), ds)
        assert rep["mean"] == pytest.approx(np.pi / 4, abs=0.05)

    def test_untrained_model_reports_finite(self, tiny_gen, shapes16):
        rep = E.mean_iou_report(tiny_gen, shapes16)
        assert np.isfinite(rep["mean"])
        assert 0.0 <= rep["mean"] <= 1.0


class TestLocalityProbe:
    def test_alpha_zero_assertions_hold(self, tiny_gen, shapes16):
        layout = next(s.layout for s in shapes16.samples
                      if s.layout.m >= 2)
        rep = E.locality_probe(tiny_gen, layout, instance=1,
                               master_seed=3, new_seed=9)
        az = rep["alpha_zero"]
        assert az["other_masks_bit_identical"]
        assert az["target_mask_changed"]
        assert az["image_reseed_masks_bit_identical"]

    def test_alpha_values_restored_after_probe(self, tiny_gen, shapes16):
        for layer in tiny_gen.isla_layers():
            layer.alpha.data[...] = 0.25
        E.locality_probe(tiny_gen, shapes16.samples[0].layout, instance=1)
        for layer in tiny_gen.isla_layers():
            assert float(layer.alpha.data) == 0.25
        for layer in tiny_gen.isla_layers():
            layer.alpha.data[...] = 0.0

    def test_full_model_statistics_reported(self, tiny_gen, shapes16):
        rep = E.locality_probe(tiny_gen, shapes16.samples[0].layout,
                               instance=1)
        fm = rep["full_model"]
        assert fm["inside_mean_abs_change"] >= 0.0
        assert fm["outside_mean_abs_change"] >= 0.0

    def test_out_of_range_instance_rejected(self, tiny_gen, shapes16):
        with pytest.raises(ad.ContractError, match="out of range"):
            E.locality_probe(tiny_gen, shapes16.samples[0].layout,
                             instance=99)


class TestLayoutProbe:
    def test_identity_edit_bit_identical(self, tiny_gen, shapes16):
        rep = E.layout_probe(tiny_gen, shapes16.samples[0].layout,
                             ("identity",))
        assert rep["image_bit_identical"]
        assert rep["masks_bit_identical"]

    def test_move_reports_per_unedited_instance(self, tiny_gen, shapes16):
        layout = next(s.layout for s in shapes16.samples
                      if s.layout.m >= 2)
        old = layout.boxes[0].box
        shift = 0.1 if old[2] <= 0.85 else -0.1
        new = (old[0] + shift, old[1], old[2] + shift, old[3])
        rep = E.layout_probe(tiny_gen, layout, ("move", 0, new))
        assert len(rep["unedited_mask_iou"]) == layout.m - 1
        assert rep["box_delta_px"][1] == pytest.approx(shift * 16)

    def test_add_keeps_existing_masks_at_alpha_zero(self, tiny_gen,
                                                    shapes16):
        layout = shapes16.samples[0].layout
        extra = LabeledBox(label=2, box=(0.6, 0.6, 0.9, 0.9))
        rep = E.layout_probe(tiny_gen, layout, ("add", extra))
        assert rep["existing_masks_bit_identical_alpha_zero"]

    def test_unknown_edit_rejected(self, tiny_gen, shapes16):
        with pytest.raises(ad.ContractError, match="edit"):
            E.layout_probe(tiny_gen, shapes16.samples[0].layout,
                           ("rotate", 1))

    def test_move_out_of_range_rejected(self, tiny_gen, shapes16):
        with pytest.raises(ad.ContractError):
            E.layout_probe(tiny_gen, shapes16.samples[0].layout,
                           ("move", 99, (0.1, 0.1, 0.5, 0.5)))


class TestRendering:
    def test_palette_fixed_and_sized(self):
        pal = E.category_palette(4)
        assert pal.shape == (4, 3)
        assert pal.dtype == np.uint8
        np.testing.assert_array_equal(pal, E.category_palette(4))

    def test_label_map_to_rgb(self):
        lm = np.array([[0, 1], [2, 3]])
        rgb = E.label_map_to_rgb(lm, 4)
        assert rgb.shape == (2, 2, 3)
        np.testing.assert_array_equal(rgb[0, 0], E.category_palette(4)[0])

    def test_contact_sheet_written(self, tiny_gen, shapes16, tmp_path):
        path = tmp_path / "sheet.png"
        E.contact_sheet(path, tiny_gen, shapes16, seed=3, max_rows=2)
        assert path.stat().st_size > 1000

    def test_plot_metrics_written(self, tmp_path):
        stream = tmp_path / "metrics.ndjson"
        recs = [{"step": i, "d_loss": 1.0 / (i + 1), "g_loss": 0.5,
                 "recon": 0.4, "percep": 0.1, "p_img_real": 0.2,
                 "p_img_fake": -0.2} for i in range(5)]
        stream.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
        out = tmp_path / "curves.png"
        E.plot_metrics(stream, out)
        assert out.stat().st_size > 1000

    def test_plot_metrics_empty_rejected(self, tmp_path):
        stream = tmp_path / "empty.ndjson"
        stream.write_text("")
        with pytest.raises(ad.ContractError, match="no metric"):
            E.plot_metrics(stream, tmp_path / "x.png")


class TestFullReport:
    def test_write_report_files_and_keys(self, tiny_gen, shapes16,
                                         tmp_path):
        rep = E.write_report(tmp_path / "rep", tiny_gen, shapes16, seed=3)
        on_disk = json.loads(
            (tmp_path / "rep" / "report.json").read_text())
        assert on_disk == json.loads(json.dumps(rep))
        for key in ("mask_iou", "diversity", "locality",
                    "layout_consistency", "inception_score", "fid"):
            assert key in on_disk
        assert on_disk["inception_score"].startswith("N/A")
        assert (tmp_path / "rep" / "contact_sheet.png").exists()

    def test_report_with_metric_curves(self, tiny_gen, shapes16, tmp_path):
        stream = tmp_path / "m.ndjson"
        recs = [{"step": 1, "d_loss": 1.0, "g_loss": 0.5, "recon": 0.4,
                 "percep": 0.1, "p_img_real": 0.0, "p_img_fake": 0.0}]
        stream.write_text("\n".join(json.dumps(r) for r in recs) + "\n")
        E.write_report(tmp_path / "rep2", tiny_gen, shapes16, seed=3,
                       metrics_path=stream)
        assert (tmp_path / "rep2" / "metric_curves.png").exists()
