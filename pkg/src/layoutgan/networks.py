"""Layout-conditioned generator and two-headed discriminator.

The generator turns a latent image code into a 4x4 feature block and grows
it through residual up-blocks. Every block recalibrates its features twice
with instance-aware affine fields assembled from blended instance masks, so
the layout steers structure while the style codes steer appearance. Masks
predicted along the way double as label-map outputs.

The discriminator shares a downsampling trunk between an image realness
head and an object head that scores each annotated box from region features
pooled off a small feature pyramid, plus a learned class-embedding
projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import isla
from .autodiff import Tensor
from .layouts import CategorySet, InstanceLayout, StyleCodes, occupancy_map
from .nn import Conv2d, Linear
from .objectives import orthogonal_init

__all__ = [
    "GeneratorConfig", "GeneratorOutput", "Generator",
    "DiscriminatorConfig", "DiscriminatorOutput", "Discriminator",
    "roi_align", "assign_pyramid_level",
]


def _check_power_of_two(name: str, value: int, minimum: int) -> int:
    if value < minimum or value & (value - 1):
        raise ad.ContractError(
            f"{name} must be a power of two >= {minimum}, got {value}")
    return int(math.log2(value))


@dataclass(frozen=True)
class GeneratorConfig:
    """Shape of the generator: resolution, widths, and latent sizes."""

    categories: CategorySet
    resolution: int = 32
    base_channels: int = 48
    stage_channels: Tuple[int, ...] = (32, 24, 16)
    d_img: int = 64
    d_e: int = 32
    d_obj: int = 32
    mask_size: int = 32

    def __post_init__(self):
        stages = _check_power_of_two("resolution", self.resolution, 16) - 2
        if len(self.stage_channels) != stages:
            raise ad.ContractError(
                f"resolution {self.resolution} needs {stages} stage widths, "
                f"got {len(self.stage_channels)}")

    @property
    def n_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def d_s(self) -> int:
        return self.d_e + self.d_obj


@dataclass
class GeneratorOutput:
    """One synthesized sample with its mask by-products.

    ``label_maps`` holds the per-stage category probability maps (one per
    up-block input plus one at full resolution); ``argmax_map`` assigns each
    pixel the category of the strongest final instance mask; ``masks`` is
    the final blended instance stack at full resolution.
    """

    image: Tensor
    label_maps: Tuple[Tensor, ...]
    argmax_map: np.ndarray
    masks: isla.InstanceMaskStack


class UpBlock:
    """Residual up-block: recalibrate, upsample, convolve, recalibrate.

    Main path: ISLA -> relu -> x2 upsample -> 3x3 conv -> ISLA -> relu ->
    3x3 conv. Skip path: x2 upsample -> 1x1 conv. The block also owns the
    mask-prediction conv applied to its input features.
    """

    def __init__(self, c_in: int, c_out: int, d_s: int, d_ell: int,
                 rng: np.random.Generator, dtype=np.float32):
        self.tomask = Conv2d(c_in, d_ell, rng, dtype=dtype)
        self.isla1 = isla.IslaLayer(d_s, c_in, rng, dtype=dtype)
        self.conv1 = Conv2d(c_in, c_out, rng, dtype=dtype)
        self.isla2 = isla.IslaLayer(d_s, c_out, rng, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, rng, dtype=dtype)
        self.skip = Conv2d(c_in, c_out, rng, k=1, dtype=dtype)

    def layers(self):
        yield "tomask", self.tomask
        yield "isla1.project", self.isla1.project
        yield "conv1", self.conv1
        yield "isla2.project", self.isla2.project
        yield "conv2", self.conv2
        yield "skip", self.skip


def _rect_indicator(inst: InstanceLayout, size: int,
                    dtype) -> np.ndarray:
    ind = np.zeros((inst.n_instances, size, size), dtype=dtype)
    for i, (r0, c0, r1, c1) in enumerate(inst.pixel_rects(size, size)):
        ind[i, r0:r1, c0:c1] = 1.0
    return ind


def _upsample_feature_masks(stack: isla.InstanceMaskStack,
                            inst: InstanceLayout,
                            size: int) -> isla.InstanceMaskStack:
    """Double a feature-derived mask stack and re-clip to the new rects.

    Nearest upsampling can leak a pixel past the rect boundary computed at
    the doubled resolution, so the box clipping is reapplied.
    """
    up = ad.upsample2x_nearest(stack.values)
    ind = ad.constant(_rect_indicator(inst, size, stack.values.dtype))
    return isla.InstanceMaskStack(ad.mul(up, ind), "feature")


class Generator:
    """Batched layout-to-image synthesis network."""

    def __init__(self, config: GeneratorConfig, rng: np.random.Generator,
                 dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        d_ell = config.categories.d_ell
        c0 = config.base_channels
        self.emb = ad.tensor(
            orthogonal_init((d_ell, config.d_e), rng).astype(dtype),
            requires_grad=True)
        self.fc = Linear(config.d_img, 16 * c0, rng, dtype=dtype)
        self.maskgen = isla.MaskGenerator(config.d_s, s=config.mask_size,
                                          rng=rng, dtype=dtype)
        self.blocks: List[UpBlock] = []
        c_in = c0
        for c_out in config.stage_channels:
            self.blocks.append(
                UpBlock(c_in, c_out, config.d_s, d_ell, rng, dtype=dtype))
            c_in = c_out
        self.final_tomask = Conv2d(c_in, d_ell, rng, dtype=dtype)
        self.to_rgb = Conv2d(c_in, 3, rng, dtype=dtype)

    # ---------------------------------------------------------------- wiring

    def layers(self):
        yield "fc", self.fc
        for name, layer in self.maskgen.layers():
            yield f"maskgen.{name}", layer
        for i, blk in enumerate(self.blocks):
            for name, layer in blk.layers():
                yield f"block{i}.{name}", layer
        yield "final_tomask", self.final_tomask
        yield "to_rgb", self.to_rgb

    def isla_layers(self) -> Iterable[isla.IslaLayer]:
        for blk in self.blocks:
            yield blk.isla1
            yield blk.isla2

    def named_params(self) -> Dict[str, Tensor]:
        out = {"emb.w": self.emb}
        for lname, layer in self.layers():
            for pname, p in layer.params().items():
                out[f"{lname}.{pname}"] = p
        for i, blk in enumerate(self.blocks):
            out[f"block{i}.isla1.alpha"] = blk.isla1.alpha
            out[f"block{i}.isla2.alpha"] = blk.isla2.alpha
        return out

    def named_sn(self) -> Dict[str, np.ndarray]:
        out = {}
        for lname, layer in self.layers():
            state = layer.sn_state()
            if state:
                out[f"{lname}.u"] = state["u"]
        return out

    def load_sn(self, mapping: Dict[str, np.ndarray]) -> None:
        for lname, layer in self.layers():
            if layer.sn_state():
                layer.load_sn_state({"u": mapping[f"{lname}.u"]})

    # --------------------------------------------------------------- forward

    def _encode(self, inst: InstanceLayout, codes: StyleCodes):
        if codes.n_instances != inst.n_instances:
            raise ad.ContractError(
                f"style rows {codes.n_instances} vs layout instances "
                f"{inst.n_instances}")
        z_obj = ad.constant(codes.z_obj.astype(self.dtype))
        emb = isla.embed_labels(inst.labels, self.emb)
        return isla.joint_encode(emb, z_obj)

    @staticmethod
    def _recalibrate(h: Tensor, stacks, tables, occs) -> Tensor:
        params = [isla.compose_isla(stack, table, occ)
                  for stack, table, occ in zip(stacks, tables, occs)]
        return isla.isla_apply(h, params)

    def forward_batch(self, insts: Sequence[InstanceLayout],
                      styles: Sequence[StyleCodes],
                      sn_update: bool = False) -> List[GeneratorOutput]:
        if len(insts) != len(styles):
            raise ad.ContractError(
                f"{len(insts)} layouts vs {len(styles)} style sets")
        if not insts:
            raise ad.ContractError("empty batch")
        n = len(insts)
        cfg = self.config
        S = [self._encode(inst, codes) for inst, codes in zip(insts, styles)]
        raw = [self.maskgen(s, sn_update) for s in S]
        z_img = ad.constant(
            np.stack([c.z_img for c in styles]).astype(self.dtype))
        h = ad.reshape(self.fc(z_img, sn_update),
                       (n, cfg.base_channels, 4, 4))
        res = 4
        stage_maps: List[List[Tensor]] = [[] for _ in range(n)]
        final_stacks: List[isla.InstanceMaskStack] = [None] * n
        for blk in self.blocks:
            lmap = ad.sigmoid(blk.tomask(h, sn_update))
            stacks1, tables1, occs1 = [], [], []
            feature_masks = []
            for i in range(n):
                stage_maps[i].append(lmap[i])
                m_f = isla.masks_from_features(lmap[i], insts[i])
                m_s = isla.place_masks(raw[i], insts[i], res, res)
                feature_masks.append(m_f)
                stacks1.append(isla.blend_masks(m_s, m_f, blk.isla1.alpha))
                tables1.append(blk.isla1.table(S[i], sn_update))
                occs1.append(occupancy_map(insts[i], res, res))
            x = ad.relu(self._recalibrate(h, stacks1, tables1, occs1))
            x = blk.conv1(ad.upsample2x_nearest(x), sn_update)
            res2 = res * 2
            stacks2, tables2, occs2 = [], [], []
            for i in range(n):
                m_f2 = _upsample_feature_masks(feature_masks[i], insts[i],
                                               res2)
                m_s2 = isla.place_masks(raw[i], insts[i], res2, res2)
                blended = isla.blend_masks(m_s2, m_f2, blk.isla2.alpha)
                stacks2.append(blended)
                tables2.append(blk.isla2.table(S[i], sn_update))
                occs2.append(occupancy_map(insts[i], res2, res2))
                final_stacks[i] = blended
            y = ad.relu(self._recalibrate(x, stacks2, tables2, occs2))
            y = blk.conv2(y, sn_update)
            skip = blk.skip(ad.upsample2x_nearest(h), sn_update)
            h = ad.add(y, skip)
            res = res2
        final_map = ad.sigmoid(self.final_tomask(h, sn_update))
        image = ad.tanh(self.to_rgb(h, sn_update))
        outputs = []
        for i in range(n):
            maps = tuple(stage_maps[i]) + (final_map[i],)
            stack_vals = np.asarray(final_stacks[i].values.data)
            amax = isla.instance_argmax_labels(stack_vals, insts[i].labels)
            outputs.append(GeneratorOutput(
                image=image[i], label_maps=maps, argmax_map=amax,
                masks=final_stacks[i]))
        return outputs

    def forward(self, inst: InstanceLayout, codes: StyleCodes,
                sn_update: bool = False) -> GeneratorOutput:
        return self.forward_batch([inst], [codes], sn_update)[0]


# --------------------------------------------------------------------------
# region pooling
# --------------------------------------------------------------------------

def _sample_coords(lo: float, hi: float, k: int, limit: int):
    """Bilinear corner indices and weights for k cell-center samples."""
    centers = lo + (np.arange(k) + 0.5) * (hi - lo) / k
    pos = np.clip(centers - 0.5, 0.0, limit - 1.0)
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, limit - 1)
    frac = pos - i0
    return i0, i1, frac


def roi_align(feature: Tensor, rect, k: int) -> Tensor:
    """Pool a (C, H, W) feature map over an unquantized rect to (C, k, k).

    ``rect`` is (r0, c0, r1, c1) in float pixel units of the feature map.
    Each output cell samples the map bilinearly at its center; edges are
    never rounded to the grid.
    """
    if feature.ndim != 3:
        raise ad.DimensionError(f"roi_align: need CHW, got {feature.shape}")
    r0, c0, r1, c1 = (float(v) for v in rect)
    if not (r1 > r0 and c1 > c0):
        raise ad.ContractError(f"roi_align: empty rect {rect}")
    _, h, w = feature.shape
    ri0, ri1, rf = _sample_coords(r0, r1, k, h)
    ci0, ci1, cf = _sample_coords(c0, c1, k, w)
    f = feature.data
    rf2 = rf[:, None]
    cf2 = cf[None, :]
    w00 = (1 - rf2) * (1 - cf2)
    w01 = (1 - rf2) * cf2
    w10 = rf2 * (1 - cf2)
    w11 = rf2 * cf2
    out = (w00 * f[:, ri0[:, None], ci0[None, :]]
           + w01 * f[:, ri0[:, None], ci1[None, :]]
           + w10 * f[:, ri1[:, None], ci0[None, :]]
           + w11 * f[:, ri1[:, None], ci1[None, :]]).astype(f.dtype)

    def backward_fn(g, acc):
        df = np.zeros_like(f)
        chan = np.arange(f.shape[0])[:, None, None]
        for wgt, rr, cc in ((w00, ri0, ci0), (w01, ri0, ci1),
                            (w10, ri1, ci0), (w11, ri1, ci1)):
            np.add.at(df, (chan, rr[None, :, None], cc[None, None, :]),
                      g * wgt)
        acc(feature, df)

    return ad.register_op("roi_align", out, (feature,), backward_fn)


def assign_pyramid_level(rect, resolution: int, n_levels: int) -> int:
    """Map a box to a pyramid level: bigger boxes to coarser levels.

    ``rect`` is (r0, c0, r1, c1) in pixel units at the image resolution.
    Level 0 is the finest. level = clamp(floor(log2(sqrt(area)/R * 2^top))).
    """
    if n_levels < 1:
        raise ad.ContractError("assign_pyramid_level: need >= 1 level")
    r0, c0, r1, c1 = (float(v) for v in rect)
    area = max((r1 - r0) * (c1 - c0), 1e-12)
    top = n_levels - 1
    level = math.floor(math.log2(math.sqrt(area) / resolution * 2 ** top))
    return min(max(level, 0), top)


# --------------------------------------------------------------------------
# discriminator
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscriminatorConfig:
    """Widths and region-pooling geometry of the critic."""

    categories: CategorySet
    resolution: int = 32
    trunk_channels: Tuple[int, ...] = (32, 48)
    head_channels: int = 64
    obj_channels: int = 32
    roi_size: int = 4

    def __post_init__(self):
        _check_power_of_two("resolution", self.resolution, 16)
        if len(self.trunk_channels) < 1:
            raise ad.ContractError("trunk needs at least one block")
        if self.roi_size % 2:
            raise ad.ContractError("roi_size must be even")

    @property
    def n_levels(self) -> int:
        return len(self.trunk_channels)


@dataclass
class DiscriminatorOutput:
    """Image realness plus one score per annotated (foreground) box."""

    p_img: Tensor
    p_obj: List[Tensor]


class DownBlock:
    """Residual down-block: two pre-activation 3x3 convs, then 2x2 mean
    pooling; the skip path is a 1x1 conv pooled the same way."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 dtype=np.float32, pool: bool = True):
        self.pool = pool
        self.conv1 = Conv2d(c_in, c_out, rng, dtype=dtype)
        self.conv2 = Conv2d(c_out, c_out, rng, dtype=dtype)
        self.skip = Conv2d(c_in, c_out, rng, k=1, dtype=dtype)

    def __call__(self, x: Tensor, sn_update: bool = False) -> Tensor:
        y = self.conv1(ad.relu(x), sn_update)
        y = self.conv2(ad.relu(y), sn_update)
        s = self.skip(x, sn_update)
        if self.pool:
            y = ad.avg_pool2d(y, 2)
            s = ad.avg_pool2d(s, 2)
        return ad.add(y, s)

    def layers(self):
        yield "conv1", self.conv1
        yield "conv2", self.conv2
        yield "skip", self.skip


class Discriminator:
    """Shared trunk with an image head and a per-box object head."""

    def __init__(self, config: DiscriminatorConfig,
                 rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.trunk: List[DownBlock] = []
        c_in = 3
        for c_out in config.trunk_channels:
            self.trunk.append(DownBlock(c_in, c_out, rng, dtype=dtype))
            c_in = c_out
        self.head_block = DownBlock(c_in, config.head_channels, rng,
                                    dtype=dtype)
        self.head_fc = Linear(config.head_channels, 1, rng, dtype=dtype)
        self.laterals = [Conv2d(c, config.obj_channels, rng, k=1,
                                dtype=dtype)
                         for c in config.trunk_channels]
        self.obj_block = DownBlock(config.obj_channels, config.obj_channels,
                                   rng, dtype=dtype)
        self.obj_fc = Linear(config.obj_channels, 1, rng, dtype=dtype)
        self.class_emb = ad.tensor(
            orthogonal_init((config.categories.d_ell, config.obj_channels),
                            rng).astype(dtype),
            requires_grad=True)

    # ---------------------------------------------------------------- wiring

    def layers(self):
        for i, blk in enumerate(self.trunk):
            for name, layer in blk.layers():
                yield f"trunk{i}.{name}", layer
        for name, layer in self.head_block.layers():
            yield f"head.{name}", layer
        yield "head.fc", self.head_fc
        for i, lat in enumerate(self.laterals):
            yield f"lateral{i}", lat
        for name, layer in self.obj_block.layers():
            yield f"obj.{name}", layer
        yield "obj.fc", self.obj_fc

    def named_params(self) -> Dict[str, Tensor]:
        out = {"class_emb.w": self.class_emb}
        for lname, layer in self.layers():
            for pname, p in layer.params().items():
                out[f"{lname}.{pname}"] = p
        return out

    def named_sn(self) -> Dict[str, np.ndarray]:
        out = {}
        for lname, layer in self.layers():
            state = layer.sn_state()
            if state:
                out[f"{lname}.u"] = state["u"]
        return out

    def load_sn(self, mapping: Dict[str, np.ndarray]) -> None:
        for lname, layer in self.layers():
            if layer.sn_state():
                layer.load_sn_state({"u": mapping[f"{lname}.u"]})

    # --------------------------------------------------------------- forward

    def forward(self, image: Tensor, inst: InstanceLayout,
                sn_update: bool = False) -> DiscriminatorOutput:
        cfg = self.config
        if image.ndim == 3:
            image = ad.reshape(image, (1,) + tuple(image.shape))
        if image.shape != (1, 3, cfg.resolution, cfg.resolution):
            raise ad.DimensionError(
                f"discriminator: image {image.shape} vs resolution "
                f"{cfg.resolution}")
        levels = []
        h = image
        for blk in self.trunk:
            h = blk(h, sn_update)
            levels.append(h)
        head = ad.relu(self.head_block(h, sn_update))
        pooled = ad.mean_(head, axis=(2, 3))
        p_img = ad.reshape(self.head_fc(pooled, sn_update), ())

        p_obj: List[Tensor] = []
        boxes = inst.instances[1:]  # the background box is not scored
        if boxes:
            lateral_maps = [self.laterals[l](levels[l], sn_update)
                            for l in range(cfg.n_levels)]
            for b in boxes:
                y0, x0, y1, x1 = b.box
                img_rect = (y0 * cfg.resolution, x0 * cfg.resolution,
                            y1 * cfg.resolution, x1 * cfg.resolution)
                lvl = assign_pyramid_level(img_rect, cfg.resolution,
                                           cfg.n_levels)
                fmap = lateral_maps[lvl][0]
                fh = fmap.shape[1]
                fw = fmap.shape[2]
                rect = (y0 * fh, x0 * fw, y1 * fh, x1 * fw)
                region = roi_align(fmap, rect, cfg.roi_size)
                region = ad.reshape(region, (1,) + tuple(region.shape))
                feat = ad.relu(self.obj_block(region, sn_update))
                f = ad.mean_(feat, axis=(2, 3))
                base = ad.reshape(self.obj_fc(f, sn_update), ())
                lbl = self.config.categories.index_of(b.label) \
                    if isinstance(b.label, str) else int(b.label)
                e_row = ad.index_rows(self.class_emb, np.array([lbl]))
                proj = ad.sum_(ad.mul(e_row, f))
                p_obj.append(ad.add(base, proj))
        return DiscriminatorOutput(p_img=p_img, p_obj=p_obj)
