"""Generator/discriminator architecture tests.

Region pooling is checked against a per-sample-point bilinear loop oracle;
the composed networks are checked for shape contracts, determinism, style
sensitivity, mask locality, and gradient correctness on a small 64-bit
configuration.
"""

import numpy as np
import pytest

from layoutgan import autodiff as ad
from layoutgan import layouts as lm
from layoutgan import networks as nw


def roi_loops(f: np.ndarray, rect, k: int) -> np.ndarray:
    """Brute-force roi_align: evaluate the bilinear sample per output cell."""
    C, H, W = f.shape
    r0, c0, r1, c1 = rect
    out = np.zeros((C, k, k), dtype=f.dtype)
    for i in range(k):
        for j in range(k):
            y = r0 + (i + 0.5) * (r1 - r0) / k - 0.5
            x = c0 + (j + 0.5) * (c1 - c0) / k - 0.5
            y = min(max(y, 0.0), H - 1.0)
            x = min(max(x, 0.0), W - 1.0)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, H - 1), min(x0 + 1, W - 1)
            fy, fx = y - y0, x - x0
            out[:, i, j] = ((1 - fy) * (1 - fx) * f[:, y0, x0]
                            + (1 - fy) * fx * f[:, y0, x1]
                            + fy * (1 - fx) * f[:, y1, x0]
                            + fy * fx * f[:, y1, x1])
    return out


def small_setup(resolution=32, seed=11, dtype=np.float32, boxes=None):
    rng = np.random.default_rng(seed)
    stages = {16: (24, 16), 32: (32, 24, 16)}[resolution]
    gcfg = nw.GeneratorConfig(categories=lm.SHAPES, resolution=resolution,
                              base_channels=32, stage_channels=stages,
                              d_img=16, d_e=8, d_obj=8, mask_size=16)
    G = nw.Generator(gcfg, rng, dtype=dtype)
    if boxes is None:
        boxes = ((1, (0.1, 0.2, 0.6, 0.7)), (2, (0.4, 0.4, 0.9, 0.9)))
    layout = lm.Layout((resolution, resolution),
                       tuple(lm.LabeledBox(l, b) for l, b in boxes))
    inst = lm.with_background(layout)
    codes = lm.sample_styles(inst, gcfg.d_img, gcfg.d_obj, seed=5)
    return G, gcfg, inst, codes, rng


class TestGeneratorShapes:
    def test_image_and_stage_map_shapes(self):
        G, gcfg, inst, codes, _ = small_setup(32)
        out = G.forward(inst, codes)
        assert out.image.shape == (3, 32, 32)
        assert [m.shape for m in out.label_maps] == [
            (4, 4, 4), (4, 8, 8), (4, 16, 16), (4, 32, 32)]
        assert out.argmax_map.shape == (32, 32)
        assert out.masks.shape == (3, 32, 32)
        assert out.masks.source == "blended"

    def test_image_range_is_tanh_codomain(self):
        G, _, inst, codes, _ = small_setup(32)
        out = G.forward(inst, codes)
        assert np.all(out.image.data >= -1.0)
        assert np.all(out.image.data <= 1.0)

    def test_label_maps_are_probabilities(self):
        G, _, inst, codes, _ = small_setup(32)
        out = G.forward(inst, codes)
        for m in out.label_maps:
            assert np.all(m.data > 0.0)
            assert np.all(m.data < 1.0)

    def test_final_masks_clipped_to_rects(self):
        G, _, inst, codes, _ = small_setup(32)
        out = G.forward(inst, codes)
        vals = np.asarray(out.masks.values.data)
        for i, (r0, c0, r1, c1) in enumerate(inst.pixel_rects(32, 32)):
            outside = vals[i].copy()
            outside[r0:r1, c0:c1] = 0.0
            assert not outside.any()

    def test_determinism(self):
        G, _, inst, codes, _ = small_setup(32)
        a = G.forward(inst, codes)
        b = G.forward(inst, codes)
        np.testing.assert_array_equal(a.image.data, b.image.data)
        np.testing.assert_array_equal(a.argmax_map, b.argmax_map)

    def test_style_sensitivity(self):
        G, gcfg, inst, codes, _ = small_setup(32)
        other = lm.styles_from_seeds(codes.image_seed + 1,
                                     codes.object_seeds,
                                     gcfg.d_img, gcfg.d_obj)
        a = G.forward(inst, codes)
        b = G.forward(inst, other)
        assert np.abs(a.image.data - b.image.data).sum() > 0.0

    def test_batch_matches_singles(self):
        G, gcfg, inst, codes, _ = small_setup(32)
        layout2 = lm.Layout((32, 32), (lm.LabeledBox(3, (0.2, 0.1, 0.7, 0.5)),))
        inst2 = lm.with_background(layout2)
        codes2 = lm.sample_styles(inst2, gcfg.d_img, gcfg.d_obj, seed=9)
        batched = G.forward_batch([inst, inst2], [codes, codes2])
        assert len(batched) == 2
        assert batched[0].image.shape == (3, 32, 32)
        # shared batch statistics make the batched result differ from the
        # single-sample runs; the per-sample mask stacks must not
        np.testing.assert_array_equal(
            batched[0].masks.values.data,
            G.forward(inst, codes).masks.values.data)

    def test_style_row_count_mismatch_rejected(self):
        G, gcfg, inst, codes, _ = small_setup(32)
        bad = lm.styles_from_seeds(codes.image_seed, codes.object_seeds[:-1],
                                   gcfg.d_img, gcfg.d_obj)
        with pytest.raises(ad.ContractError):
            G.forward(inst, bad)


class TestGeneratorConfigValidation:
    def test_resolution_stage_mismatch(self):
        with pytest.raises(ad.ContractError):
            nw.GeneratorConfig(categories=lm.SHAPES, resolution=64,
                               stage_channels=(32, 16))

    def test_resolution_must_be_power_of_two(self):
        with pytest.raises(ad.ContractError):
            nw.GeneratorConfig(categories=lm.SHAPES, resolution=24,
                               stage_channels=(32, 16))


class TestMaskLocality:
    def test_object_reseed_leaves_other_masks_alone(self):
        # alphas start at zero, so final masks are purely generated ones
        G, gcfg, inst, codes, _ = small_setup(32)
        before = G.forward(inst, codes).masks.values.data
        reseeded = lm.resample_instance(codes, 2, 999)
        after = G.forward(inst, reseeded).masks.values.data
        np.testing.assert_array_equal(before[0], after[0])
        np.testing.assert_array_equal(before[1], after[1])
        assert np.abs(before[2] - after[2]).sum() > 0.0

    def test_image_reseed_leaves_all_masks_alone(self):
        G, gcfg, inst, codes, _ = small_setup(32)
        before = G.forward(inst, codes).masks.values.data
        other = lm.styles_from_seeds(codes.image_seed + 7,
                                     codes.object_seeds,
                                     gcfg.d_img, gcfg.d_obj)
        after = G.forward(inst, other).masks.values.data
        np.testing.assert_array_equal(before, after)


class TestRoiAlign:
    def test_constant_field(self):
        f = ad.constant(np.full((2, 8, 8), 1.5))
        out = nw.roi_align(f, (1.3, 2.7, 5.2, 6.1), 4)
        np.testing.assert_allclose(out.data, 1.5)

    def test_single_cell_rect(self):
        rng = np.random.default_rng(31)
        f = rng.standard_normal((3, 6, 6))
        out = nw.roi_align(ad.constant(f), (2.0, 4.0, 3.0, 5.0), 1)
        np.testing.assert_allclose(out.data[:, 0, 0], f[:, 2, 4])

    def test_full_map_identity(self):
        rng = np.random.default_rng(32)
        f = rng.standard_normal((2, 5, 7))
        out = nw.roi_align(ad.constant(f), (0.0, 0.0, 5.0, 7.0), 5)
        # k == H means row sample centers land exactly on pixel centers
        np.testing.assert_allclose(out.data[:, :, 0], roi_loops(
            f, (0.0, 0.0, 5.0, 7.0), 5)[:, :, 0])

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(33)
        for _ in range(50):
            C = int(rng.integers(1, 4))
            H = int(rng.integers(3, 9))
            W = int(rng.integers(3, 9))
            f = rng.standard_normal((C, H, W))
            r0 = rng.uniform(0, H - 0.5)
            r1 = rng.uniform(r0 + 0.25, H)
            c0 = rng.uniform(0, W - 0.5)
            c1 = rng.uniform(c0 + 0.25, W)
            k = int(rng.integers(1, 5))
            got = nw.roi_align(ad.constant(f), (r0, c0, r1, c1), k)
            np.testing.assert_allclose(got.data,
                                       roi_loops(f, (r0, c0, r1, c1), k),
                                       atol=1e-12)

    def test_empty_rect_rejected(self):
        f = ad.constant(np.zeros((1, 4, 4)))
        with pytest.raises(ad.ContractError):
            nw.roi_align(f, (2.0, 1.0, 2.0, 3.0), 2)

    def test_gradient(self):
        rng = np.random.default_rng(34)
        f = ad.tensor(rng.standard_normal((2, 6, 6)), requires_grad=True)

        def run(t):
            out = nw.roi_align(t, (0.7, 1.2, 4.9, 5.3), 3)
            return ad.sum_(ad.mul(out, out))

        assert ad.grad_check(run, f) < 1e-6


class TestPyramidAssignment:
    def test_full_image_box_on_top(self):
        assert nw.assign_pyramid_level((0, 0, 32, 32), 32, 2) == 1

    def test_one_pixel_box_on_finest(self):
        assert nw.assign_pyramid_level((5, 5, 6, 6), 32, 2) == 0

    def test_monotone_in_box_size(self):
        rng = np.random.default_rng(35)
        for _ in range(100):
            side = rng.uniform(1, 8)
            small = (0, 0, side, side)
            large = (0, 0, 4 * side, 4 * side)
            assert (nw.assign_pyramid_level(large, 32, 2)
                    >= nw.assign_pyramid_level(small, 32, 2))

    def test_single_level(self):
        assert nw.assign_pyramid_level((0, 0, 1, 1), 32, 1) == 0


class TestDiscriminator:
    def _setup(self, dtype=np.float32):
        rng = np.random.default_rng(21)
        dcfg = nw.DiscriminatorConfig(categories=lm.SHAPES, resolution=32,
                                      trunk_channels=(16, 24),
                                      head_channels=32, obj_channels=16)
        D = nw.Discriminator(dcfg, rng, dtype=dtype)
        layout = lm.Layout((32, 32), (lm.LabeledBox(1, (0.1, 0.1, 0.5, 0.5)),
                                      lm.LabeledBox(3, (0.3, 0.4, 0.9, 0.95))))
        inst = lm.with_background(layout)
        img = ad.constant(
            np.random.default_rng(22).uniform(-1, 1, (3, 32, 32)).astype(dtype))
        return D, inst, img

    def test_output_counts(self):
        D, inst, img = self._setup()
        out = D.forward(img, inst)
        assert out.p_img.shape == ()
        assert len(out.p_obj) == 2

    def test_background_only_layout(self):
        D, _, img = self._setup()
        inst = lm.with_background(lm.Layout((32, 32), ()))
        out = D.forward(img, inst)
        assert out.p_obj == []
        assert out.p_img.shape == ()

    def test_determinism(self):
        D, inst, img = self._setup()
        a = D.forward(img, inst)
        b = D.forward(img, inst)
        assert a.p_img.data == b.p_img.data
        for pa, pb in zip(a.p_obj, b.p_obj):
            assert pa.data == pb.data

    def test_projection_term_is_linear_in_class_embedding(self):
        D, inst, img = self._setup()
        base = [float(p.data) for p in D.forward(img, inst).p_obj]
        # doubling class 1's embedding row adds exactly e_1^T f to box 0
        # (labelled 1) and leaves box 1 (labelled 3) untouched
        e1 = D.class_emb.data[1].copy()
        D.class_emb.data[1] *= 2.0
        doubled = [float(p.data) for p in D.forward(img, inst).p_obj]
        D.class_emb.data[1] = e1
        assert doubled[1] == pytest.approx(base[1], abs=0)
        assert doubled[0] != base[0]
        # zeroing the row removes the projection term entirely
        D.class_emb.data[1] = 0.0
        zeroed = [float(p.data) for p in D.forward(img, inst).p_obj]
        D.class_emb.data[1] = e1
        np.testing.assert_allclose(doubled[0] - base[0], base[0] - zeroed[0],
                                   rtol=1e-5)

    def test_wrong_resolution_rejected(self):
        D, inst, _ = self._setup()
        with pytest.raises(ad.DimensionError):
            D.forward(ad.constant(np.zeros((3, 16, 16), dtype=np.float32)),
                      inst)


class TestComposedGradients:
    def test_generator_discriminator_gradients(self):
        # 16x16, 64-bit, two foreground instances; spot-check one parameter
        # of each flavour through the full score composition
        G, gcfg, inst, codes, rng = small_setup(16, dtype=np.float64)
        dcfg = nw.DiscriminatorConfig(categories=lm.SHAPES, resolution=16,
                                      trunk_channels=(12, 16),
                                      head_channels=16, obj_channels=8)
        D = nw.Discriminator(dcfg, np.random.default_rng(77),
                             dtype=np.float64)

        def score(_):
            out = G.forward(inst, codes)
            d = D.forward(out.image, inst)
            total = d.p_img
            for p in d.p_obj:
                total = ad.add(total, p)
            return total

        gp = G.named_params()
        dp = D.named_params()
        targets = [gp["emb.w"], gp["fc.w"], gp["block0.isla1.project.w"],
                   gp["block0.isla1.alpha"], gp["block0.conv1.w"],
                   gp["maskgen.fc.w"], gp["to_rgb.b"],
                   dp["trunk0.conv1.w"], dp["class_emb.w"], dp["obj.fc.w"],
                   dp["head.fc.w"]]
        check_rng = np.random.default_rng(99)
        for t in targets:
            if t.ndim == 0:
                coords = [()]
            else:
                coords = [tuple(c) for c in check_rng.integers(
                    0, np.array(t.shape), size=(3, t.ndim))]
            # h=1e-6: with dozens of relu layers a 1e-5 step can straddle a
            # kink, biasing the central difference on small-gradient coords
            err = ad.grad_check_at(score, t, coords, h=1e-6)
            assert err < 1e-3, f"{t.shape}: {err:.2e}"
