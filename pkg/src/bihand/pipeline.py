"""Full two-hand reconstruction network.

Stages: a small strided CNN produces per-hand feature maps; a stack of
selective-scan sequence blocks transforms the concatenated maps and a
cross-hand non-local module extracts interaction features; per-joint
spatial plus depth-bin heatmaps are decoded with soft-argmax into
continuous 2.5D joint coordinates; features sampled at those coordinates
are refined by a second sequence-block stack; and dense heads regress
axis-angle pose, shape coefficients, and the relative translation between
the hands, which drive the differentiable hand rig.

Checkpoints are a flat binary container of named float64 parameter records
(magic "VMBH"); saving, loading and re-saving is byte-identical. Configs
are plain JSON mirroring ``PipelineConfig``; unknown keys are rejected.
"""

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import handmodel
from .nn import Conv2dLayer, Linear, NonLocalBlock, grid_sample, softmax
from .ssm import (SCAN_ORDERS, VmBlockLayer, featuremap_to_sequence,
                  sequence_to_featuremap)
from .tensor import Tensor, concat, reshape, stack

CHECKPOINT_MAGIC = b"VMBH"
CHECKPOINT_VERSION = 1

THETA_SHAPE = (handmodel.NUM_JOINTS, 3)
BETA_DIM = handmodel.NUM_SHAPES


@dataclass
class PipelineConfig:
    image_h: int = 64
    image_w: int = 64
    backbone_channels: int = 64   # C; per-hand maps carry C // 4 channels
    backbone_stages: int = 3      # stride-2 stages; spatial divisor is 2**stages
    joints: int = 21
    depth_bins: int = 16
    vertices: int = 252
    vm_ife_depth: int = 2
    jvm_depth: int = 2
    state_dim: int = 8
    expand: int = 2
    conv_width: int = 4
    mlp_ratio: int = 2
    scan_order: str = "row_major"
    share_hand_heads: bool = True
    hand_model: str = "default"   # "default" or a path to a rig JSON file
    seed: int = 0

    def __post_init__(self):
        for name in ("image_h", "image_w", "backbone_channels", "backbone_stages",
                     "joints", "depth_bins", "vertices", "vm_ife_depth", "jvm_depth",
                     "state_dim", "expand", "conv_width", "mlp_ratio"):
            if getattr(self, name) <= 0:
                raise ValueError(f"config field {name} must be positive")
        if self.depth_bins < 2:
            raise ValueError("depth_bins must be at least 2")
        div = 2 ** self.backbone_stages
        if self.image_h % div or self.image_w % div:
            raise ValueError(f"image size {self.image_h}x{self.image_w} must be "
                             f"divisible by {div} for {self.backbone_stages} stages")
        if self.backbone_channels % 4:
            raise ValueError("backbone_channels must be divisible by 4")
        if self.scan_order not in SCAN_ORDERS:
            raise ValueError(f"scan_order must be one of {SCAN_ORDERS}")

    @property
    def hand_channels(self):
        return self.backbone_channels // 4

    @property
    def map_h(self):
        return self.image_h // 2 ** self.backbone_stages

    @property
    def map_w(self):
        return self.image_w // 2 ** self.backbone_stages

    @staticmethod
    def toy(**overrides):
        """Desk-scale profile: 64x64 input, divisor 8, C=64."""
        return PipelineConfig(**overrides)

    @staticmethod
    def full(**overrides):
        """Documented full-scale profile: 256x256 input, divisor 32, C=2048.

        Shape contracts hold but the training suite never exercises it.
        """
        base = dict(image_h=256, image_w=256, backbone_channels=2048,
                    backbone_stages=5, depth_bins=64)
        base.update(overrides)
        return PipelineConfig(**base)


def save_config_json(config, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(config), fh, indent=2, sort_keys=True)


def load_config_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(unknown)}")
    return PipelineConfig(**doc)


# -- data containers -----------------------------------------------------------

@dataclass
class FeatureMap:
    data: Tensor          # [c, h, w]
    role: str = ""

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Heatmap2p5D:
    spatial_logits: Tensor  # [J, h, w]
    depth_logits: Tensor    # [J, D]


@dataclass
class JointCoords:
    xy: Tensor  # [J, 2] continuous heatmap-frame pixels; also the sampling positions
    z: Tensor   # [J] continuous depth-bin coordinate

    def uvd(self):
        return concat([self.xy, reshape(self.z, (self.z.shape[0], 1))], axis=1)


@dataclass
class JointFeatures:
    data: Tensor            # [J, c]
    refined: bool = False


@dataclass
class PipelineIntermediates:
    """Every intermediate the stages exchange, for inspection and tests."""
    f_l: FeatureMap = None
    f_r: FeatureMap = None
    enh_l: FeatureMap = None
    enh_r: FeatureMap = None
    inter_l: FeatureMap = None
    inter_r: FeatureMap = None
    starred_l: FeatureMap = None
    starred_r: FeatureMap = None
    heatmap_l: Heatmap2p5D = None
    heatmap_r: Heatmap2p5D = None
    coords_l: JointCoords = None
    coords_r: JointCoords = None
    joint_feats_l: JointFeatures = None
    joint_feats_r: JointFeatures = None
    refined_feats_l: JointFeatures = None
    refined_feats_r: JointFeatures = None


@dataclass
class FullOutput:
    theta_l: Tensor       # [16, 3] axis-angle
    theta_r: Tensor
    beta_l: Tensor        # [10]
    beta_r: Tensor
    joints_uvd_l: Tensor  # [J, 3] heatmap-frame (x, y, depth-bin)
    joints_uvd_r: Tensor
    joints_mm_l: Tensor   # [21, 3] regressed from the posed mesh
    joints_mm_r: Tensor
    vertices_l: Tensor    # [V, 3] mm
    vertices_r: Tensor
    t_rel: Tensor         # [3] mm
    aux: PipelineIntermediates = field(default_factory=PipelineIntermediates)


# -- network stages -------------------------------------------------------------

class SpatialNorm:
    """Per-channel normalization over spatial positions with a channel affine."""

    def __init__(self, channels, eps=1e-5):
        self.channels = channels
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x):
        mu = x.mean(axis=(1, 2), keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=(1, 2), keepdims=True)
        normed = centered / (var + self.eps).sqrt()
        c = self.channels
        return normed * reshape(self.gamma, (c, 1, 1)) + reshape(self.beta, (c, 1, 1))

    def params(self):
        return [("gamma", self.gamma), ("beta", self.beta)]


class _ConvNormRelu:
    def __init__(self, cin, cout, kernel, stride, padding, rng):
        self.conv = Conv2dLayer(cin, cout, kernel, stride=stride, padding=padding, rng=rng)
        self.norm = SpatialNorm(cout)

    def __call__(self, x):
        return self.norm(self.conv(x)).relu()

    def params(self):
        return ([("conv." + n, t) for n, t in self.conv.params()]
                + [("norm." + n, t) for n, t in self.norm.params()])


class Backbone:
    """Strided trunk to [C, h, w] plus two 1x1 branch heads of C//4 channels."""

    def __init__(self, config, rng):
        self.config = config
        chans = [config.backbone_channels >> (config.backbone_stages - 1 - i)
                 for i in range(config.backbone_stages)]
        self.stages = []
        cin = 3
        for cout in chans:
            self.stages.append(_ConvNormRelu(cin, cout, 3, 2, 1, rng))
            cin = cout
        self.head_l = _ConvNormRelu(cin, config.hand_channels, 1, 1, 0, rng)
        self.head_r = _ConvNormRelu(cin, config.hand_channels, 1, 1, 0, rng)

    def __call__(self, img):
        cfg = self.config
        if img.shape != (3, cfg.image_h, cfg.image_w):
            raise ValueError(f"expected image [3,{cfg.image_h},{cfg.image_w}], got {img.shape}")
        x = img
        for stage in self.stages:
            x = stage(x)
        return (FeatureMap(self.head_l(x), role="F_L"),
                FeatureMap(self.head_r(x), role="F_R"))

    def params(self):
        out = []
        for i, stage in enumerate(self.stages):
            out += [(f"stage{i}.{n}", t) for n, t in stage.params()]
        out += [("head_l." + n, t) for n, t in self.head_l.params()]
        out += [("head_r." + n, t) for n, t in self.head_r.params()]
        return out


class InteractionFeatureBlock:
    """Joint sequence transform over both hands plus cross-hand attention.

    Concatenated per-hand maps pass through a 1x1 conv and a stack of
    sequence blocks, are chunked back into per-hand halves along channels,
    cross-attended (queries from one hand, keys/values from the other), and
    fused back to per-hand width by a 1x1 conv.
    """

    def __init__(self, config, rng):
        c = config.hand_channels
        self.c = c
        self.order = config.scan_order
        self.initial_conv = Conv2dLayer(2 * c, 2 * c, 1, rng=rng)
        self.blocks = [VmBlockLayer(2 * c, state_dim=config.state_dim,
                                    expand=config.expand, conv_width=config.conv_width,
                                    mlp_ratio=config.mlp_ratio, rng=rng)
                       for _ in range(config.vm_ife_depth)]
        self.share = config.share_hand_heads
        self.attn_l = NonLocalBlock(c, rng)
        self.attn_r = self.attn_l if self.share else NonLocalBlock(c, rng)
        self.fuse_l = Conv2dLayer(2 * c, c, 1, rng=rng)
        self.fuse_r = self.fuse_l if self.share else Conv2dLayer(2 * c, c, 1, rng=rng)

    def __call__(self, f_l, f_r):
        if f_l.shape != f_r.shape:
            raise ValueError(f"hand maps disagree: {f_l.shape} vs {f_r.shape}")
        c, h, w = f_l.shape
        x = self.initial_conv(concat([f_l, f_r], axis=0))
        seq = featuremap_to_sequence(x, self.order)
        for block in self.blocks:
            seq = block(seq)
        x = sequence_to_featuremap(seq, h, w, self.order)
        enh_l, enh_r = x[:c], x[c:]
        inter_l = self.attn_l(enh_l, enh_r)
        inter_r = self.attn_r(enh_r, enh_l)
        starred_l = self.fuse_l(concat([enh_l, inter_l], axis=0))
        starred_r = self.fuse_r(concat([enh_r, inter_r], axis=0))
        return starred_l, starred_r, (enh_l, enh_r, inter_l, inter_r)

    def params(self):
        out = [("initial_conv." + n, t) for n, t in self.initial_conv.params()]
        for i, block in enumerate(self.blocks):
            out += [(f"block{i}.{n}", t) for n, t in block.params()]
        out += [("attn_l." + n, t) for n, t in self.attn_l.params()]
        if not self.share:
            out += [("attn_r." + n, t) for n, t in self.attn_r.params()]
        out += [("fuse_l." + n, t) for n, t in self.fuse_l.params()]
        if not self.share:
            out += [("fuse_r." + n, t) for n, t in self.fuse_r.params()]
        return out


def soft_argmax(logits, positions):
    """Expectation of ``positions`` under softmax over the trailing axis.

    logits [..., n] with positions [n] gives [...]; positions [n, k] gives
    [..., k] (leading logits dims must then be a single row dimension).
    Outputs are guaranteed to lie in the coordinate range of the positions:
    the convex combination can overshoot by an ulp in floating point, so any
    overshoot is folded back as a constant offset that leaves the gradient
    path untouched.
    """
    p = softmax(logits, axis=-1)
    positions = positions if isinstance(positions, Tensor) else Tensor(positions)
    if positions.ndim == 1:
        e = (p * positions).sum(axis=-1)
        lo, hi = positions.data.min(), positions.data.max()
    else:
        e = p @ positions
        lo = positions.data.min(axis=0)
        hi = positions.data.max(axis=0)
    correction = np.clip(e.data, lo, hi) - e.data
    if np.any(correction != 0.0):
        e = e + Tensor(correction)
    return e


class JointFeatureExtractor:
    """Per-joint spatial and depth-bin heatmaps, decoded to 2.5D coordinates;
    features are bilinearly sampled at the decoded positions."""

    def __init__(self, config, rng):
        c, j, d = config.hand_channels, config.joints, config.depth_bins
        self.joints = j
        self.depth_bins = d
        self.heat_conv = Conv2dLayer(c, j, 1, rng=rng)
        self.depth_conv = Conv2dLayer(c, j * d, 1, rng=rng)

    def __call__(self, f):
        c, h, w = f.shape
        j, d = self.joints, self.depth_bins
        spatial_logits = self.heat_conv(f)
        depth_logits = reshape(self.depth_conv(f).mean(axis=(1, 2)), (j, d))

        flat = reshape(spatial_logits, (j, h * w))
        grid_y, grid_x = np.mgrid[0:h, 0:w]
        x = soft_argmax(flat, grid_x.reshape(-1).astype(np.float64))
        y = soft_argmax(flat, grid_y.reshape(-1).astype(np.float64))
        z = soft_argmax(depth_logits, np.arange(d, dtype=np.float64))
        coords = JointCoords(xy=stack([x, y], axis=1), z=z)
        feats = JointFeatures(grid_sample(f, coords.xy), refined=False)
        return Heatmap2p5D(spatial_logits, depth_logits), coords, feats

    def params(self):
        return ([("heat_conv." + n, t) for n, t in self.heat_conv.params()]
                + [("depth_conv." + n, t) for n, t in self.depth_conv.params()])


class JointSequenceRefiner:
    """Shared sequence-block stack over each hand's joints as a sequence."""

    def __init__(self, config, rng):
        self.blocks = [VmBlockLayer(config.hand_channels, state_dim=config.state_dim,
                                    expand=config.expand, conv_width=config.conv_width,
                                    mlp_ratio=config.mlp_ratio, rng=rng)
                       for _ in range(config.jvm_depth)]

    def __call__(self, feats_l, feats_r):
        if feats_l.shape != feats_r.shape:
            raise ValueError(f"joint features disagree: {feats_l.shape} vs {feats_r.shape}")
        out = []
        for feats in (feats_l, feats_r):
            x = feats
            for block in self.blocks:
                x = block(x)
            out.append(x)
        return out[0], out[1]

    def params(self):
        out = []
        for i, block in enumerate(self.blocks):
            out += [(f"block{i}.{n}", t) for n, t in block.params()]
        return out


class DualHandRegressor:
    """Dense heads: pose from flattened joint features + coordinates, shape
    from joint-averaged features, relative translation from pooled maps.

    Heads are zero-initialized so the model starts exactly at the rest pose,
    and the translation head predicts in units of the relative-translation
    prior scale; Adam's per-parameter step is bounded by the learning rate,
    so an mm-valued output must not require large parameter excursions.
    """

    TREL_SCALE_MM = 30.0

    def __init__(self, config, rng):
        c, j = config.hand_channels, config.joints
        self.share = config.share_hand_heads
        # coordinates join the features in grid units; normalize to O(1)
        self.coord_scale = np.array([1.0 / max(config.map_w - 1, 1),
                                     1.0 / max(config.map_h - 1, 1),
                                     1.0 / (config.depth_bins - 1)])
        theta_dim = THETA_SHAPE[0] * THETA_SHAPE[1]
        self.theta_fc_l = Linear(j * (c + 3), theta_dim, zero_init=True)
        self.beta_fc_l = Linear(c, BETA_DIM, zero_init=True)
        self.theta_fc_r = self.theta_fc_l if self.share else Linear(j * (c + 3), theta_dim, zero_init=True)
        self.beta_fc_r = self.beta_fc_l if self.share else Linear(c, BETA_DIM, zero_init=True)
        self.trel_fc = Linear(2 * c, 3, zero_init=True)

    def _hand(self, theta_fc, beta_fc, refined, coords):
        j = refined.shape[0]
        packed = concat([refined, coords.uvd() * Tensor(self.coord_scale)], axis=1)
        theta = reshape(theta_fc(reshape(packed, (j * packed.shape[1],))), THETA_SHAPE)
        beta = beta_fc(refined.mean(axis=0))
        return theta, beta

    def __call__(self, refined_l, coords_l, refined_r, coords_r, starred_l, starred_r):
        theta_l, beta_l = self._hand(self.theta_fc_l, self.beta_fc_l, refined_l, coords_l)
        theta_r, beta_r = self._hand(self.theta_fc_r, self.beta_fc_r, refined_r, coords_r)
        pooled = concat([starred_l.mean(axis=(1, 2)), starred_r.mean(axis=(1, 2))], axis=0)
        t_rel = self.trel_fc(pooled) * self.TREL_SCALE_MM
        return theta_l, beta_l, theta_r, beta_r, t_rel

    def params(self):
        out = [("theta_fc_l." + n, t) for n, t in self.theta_fc_l.params()]
        out += [("beta_fc_l." + n, t) for n, t in self.beta_fc_l.params()]
        if not self.share:
            out += [("theta_fc_r." + n, t) for n, t in self.theta_fc_r.params()]
            out += [("beta_fc_r." + n, t) for n, t in self.beta_fc_r.params()]
        out += [("trel_fc." + n, t) for n, t in self.trel_fc.params()]
        return out


class BimanualHandNet:
    """End-to-end differentiable model; deterministic given config and seed."""

    def __init__(self, config):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.backbone = Backbone(config, rng)
        self.interaction = InteractionFeatureBlock(config, rng)
        self.share = config.share_hand_heads
        self.extractor_l = JointFeatureExtractor(config, rng)
        self.extractor_r = self.extractor_l if self.share else JointFeatureExtractor(config, rng)
        self.refiner = JointSequenceRefiner(config, rng)
        self.regressor = DualHandRegressor(config, rng)
        if config.hand_model == "default":
            self.rig = handmodel.make_default_rig(config.seed, config.vertices)
        else:
            self.rig = handmodel.load_rig_json(config.hand_model)
            if self.rig.num_vertices != config.vertices:
                raise ValueError(f"rig has {self.rig.num_vertices} vertices, "
                                 f"config expects {config.vertices}")

    def forward(self, img):
        f_l, f_r = self.backbone(img)
        starred_l, starred_r, (enh_l, enh_r, inter_l, inter_r) = \
            self.interaction(f_l.data, f_r.data)
        heat_l, coords_l, feats_l = self.extractor_l(starred_l)
        heat_r, coords_r, feats_r = self.extractor_r(starred_r)
        ref_l, ref_r = self.refiner(feats_l.data, feats_r.data)
        theta_l, beta_l, theta_r, beta_r, t_rel = self.regressor(
            ref_l, coords_l, ref_r, coords_r, starred_l, starred_r)
        hand_l = handmodel.lbs(self.rig, theta_l, beta_l)
        hand_r = handmodel.lbs(self.rig, theta_r, beta_r)

        aux = PipelineIntermediates(
            f_l=f_l, f_r=f_r,
            enh_l=FeatureMap(enh_l, "F_enh_L"), enh_r=FeatureMap(enh_r, "F_enh_R"),
            inter_l=FeatureMap(inter_l, "F_inter_L"), inter_r=FeatureMap(inter_r, "F_inter_R"),
            starred_l=FeatureMap(starred_l, "F_enh_L_star"),
            starred_r=FeatureMap(starred_r, "F_enh_R_star"),
            heatmap_l=heat_l, heatmap_r=heat_r,
            coords_l=coords_l, coords_r=coords_r,
            joint_feats_l=feats_l, joint_feats_r=feats_r,
            refined_feats_l=JointFeatures(ref_l, refined=True),
            refined_feats_r=JointFeatures(ref_r, refined=True))
        return FullOutput(
            theta_l=theta_l, theta_r=theta_r, beta_l=beta_l, beta_r=beta_r,
            joints_uvd_l=coords_l.uvd(), joints_uvd_r=coords_r.uvd(),
            joints_mm_l=hand_l.joints, joints_mm_r=hand_r.joints,
            vertices_l=hand_l.vertices, vertices_r=hand_r.vertices,
            t_rel=t_rel, aux=aux)

    __call__ = forward

    def params(self):
        out = [("backbone." + n, t) for n, t in self.backbone.params()]
        out += [("interaction." + n, t) for n, t in self.interaction.params()]
        out += [("extractor_l." + n, t) for n, t in self.extractor_l.params()]
        if not self.share:
            out += [("extractor_r." + n, t) for n, t in self.extractor_r.params()]
        out += [("refiner." + n, t) for n, t in self.refiner.params()]
        out += [("regressor." + n, t) for n, t in self.regressor.params()]
        return out

    def zero_grads(self):
        for _, t in self.params():
            t.grad = None

    def save_checkpoint(self, path):
        save_checkpoint(path, self.params())

    def load_checkpoint(self, path):
        records = load_checkpoint(path)
        own = self.params()
        if len(records) != len(own):
            raise ValueError(f"checkpoint holds {len(records)} records, "
                             f"model has {len(own)} parameters")
        for (rec_name, rec_data), (name, t) in zip(records, own):
            if rec_name != name:
                raise ValueError(f"checkpoint mismatch at record {rec_name!r}: "
                                 f"model expects {name!r}")
            if rec_data.shape != t.data.shape:
                raise ValueError(f"checkpoint mismatch at record {rec_name!r}: "
                                 f"shape {rec_data.shape} vs model {t.data.shape}")
            t.data = np.ascontiguousarray(rec_data)


# -- checkpoint container --------------------------------------------------------

def save_checkpoint(path, named_tensors):
    """Write length-prefixed (name, shape, float64 LE data) records."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(named_tensors)))
        for name, t in named_tensors:
            arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Read records back as (name, float64 array) pairs, validating framing."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<Q", blob, 8)
    offset = 16
    records = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        shape = []
        for _ in range(ndim):
            (dim,) = struct.unpack_from("<Q", blob, offset)
            shape.append(dim)
            offset += 8
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(blob, dtype="<f8", count=n, offset=offset).reshape(shape)
        offset += 8 * n
        records.append((name, data.astype(np.float64)))
    if offset != len(blob):
        raise ValueError("checkpoint has trailing bytes")
    return records
