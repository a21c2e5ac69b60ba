"""Two-stream convnet with attribute-part detectors and gated refinement.

The shared stem (three conv blocks, each downsampling at entry) feeds
three branch blocks: a global branch that downsamples once more, and
attribute/part branches that keep the higher resolution so the learned
attention masks apply at 2x the global branch's spatial size.

Per forward pass each of the K shared masks is evaluated exactly once
(a 1x1 conv + sigmoid on the attribute feature map); attribute groups
assigned to the same mask reuse it while keeping separate FC+BN heads
and classifiers.  Part vectors pooled under the masks are gated by a
sigmoid refinement signal conditioned on the fused attribute vector,
projected to the local descriptor, and concatenated with the global
descriptor into the final embedding.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, ConfigError, Tensor
from .data import AttributeSchema, default_schema

STAGE_DETECTION = 1   # stem, global/attr branches, detectors, heads, classifiers
STAGE_REFINEMENT = 2  # part branch, fusion, gates, projection, local classifier


@dataclass
class ModelConfig:
    schema: AttributeSchema = None
    num_train_ids: int = 50
    image_size: tuple = (64, 32)
    in_channels: int = 3
    stem_widths: tuple = (6, 12, 24)
    global_mid: int = 48      # entry width of the global branch block
    attr_width: int = 48
    part_width: int = 48
    feat_dim: int = 256       # dim of g and of the projected local feature
    attr_feat_dim: int = 64   # dim of each per-attribute feature
    fusion_dim: int = 256     # dim of the fused attribute vector
    gate_hidden: int = 64

    def __post_init__(self):
        if self.schema is None:
            self.schema = default_schema()
        if self.feat_dim <= 0:
            raise ConfigError("feat_dim must be positive")

    @property
    def num_masks(self):
        return self.schema.num_mask_groups

    @property
    def final_dim(self):
        return 2 * self.feat_dim

    def to_dict(self):
        return {
            "schema": self.schema.to_dict(),
            "num_train_ids": self.num_train_ids,
            "image_size": list(self.image_size),
            "in_channels": self.in_channels,
            "stem_widths": list(self.stem_widths),
            "global_mid": self.global_mid,
            "attr_width": self.attr_width,
            "part_width": self.part_width,
            "feat_dim": self.feat_dim,
            "attr_feat_dim": self.attr_feat_dim,
            "fusion_dim": self.fusion_dim,
            "gate_hidden": self.gate_hidden,
        }

    @staticmethod
    def from_dict(d):
        return ModelConfig(
            schema=AttributeSchema.from_dict(d["schema"]),
            num_train_ids=int(d["num_train_ids"]),
            image_size=tuple(d["image_size"]),
            in_channels=int(d["in_channels"]),
            stem_widths=tuple(d["stem_widths"]),
            global_mid=int(d["global_mid"]),
            attr_width=int(d["attr_width"]),
            part_width=int(d["part_width"]),
            feat_dim=int(d["feat_dim"]),
            attr_feat_dim=int(d["attr_feat_dim"]),
            fusion_dim=int(d["fusion_dim"]),
            gate_hidden=int(d["gate_hidden"]),
        )


@dataclass
class Param:
    tensor: Tensor
    stage: int
    decay: bool


class ModelParams:
    """Named trainable tensors, each tagged with its training-stage group."""

    def __init__(self):
        self._params = {}

    def add(self, name, array, stage, decay=True):
        t = Tensor(array, requires_grad=True, name=name)
        self._params[name] = Param(t, stage, decay)
        return t

    def __getitem__(self, name):
        return self._params[name].tensor

    def __contains__(self, name):
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for p in self._params.values():
            p.tensor.grad = None


def kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


@dataclass
class Stage1Outputs:
    g: Tensor                  # N x feat_dim global descriptor
    masks: list                # K tensors, N x 1 x H' x W', values in (0, 1)
    attr_feats: list           # per attribute group, N x attr_feat_dim
    attr_logits: list          # per attribute group, N x num_classes
    id_logits: Tensor          # N x num_train_ids


@dataclass
class FullOutputs(Stage1Outputs):
    f_attri: Tensor = None     # N x fusion_dim
    part_feats: list = field(default_factory=list)     # l_i per mask
    refined_feats: list = field(default_factory=list)  # p_i per mask
    f_p: Tensor = None         # N x feat_dim local descriptor
    f: Tensor = None           # N x 2*feat_dim final descriptor
    local_id_logits: Tensor = None


class _ConvUnit:
    """conv(3x3, no bias) -> batch norm -> relu."""

    def __init__(self, model, name, c_in, c_out, stride, stage):
        self.stride = stride
        self.w = model.params.add(
            name + ".w",
            kaiming_uniform(model.rng, (c_out, c_in, 3, 3), c_in * 9, model.dtype),
            stage,
        )
        self.gamma = model.params.add(name + ".bn.g", np.ones(c_out, model.dtype), stage, decay=False)
        self.beta = model.params.add(name + ".bn.b", np.zeros(c_out, model.dtype), stage, decay=False)
        self.state = BatchNormState(c_out, model.dtype)
        model.bn_states[name + ".bn"] = self.state

    def __call__(self, x, training):
        y = ad.conv2d(x, self.w, stride=self.stride, pad=1)
        y = ad.batch_norm(y, self.gamma, self.beta, self.state, training)
        return ad.relu(y)


class _ConvBlock:
    """Two conv units; the first may downsample, the second may widen."""

    def __init__(self, model, name, c_in, c_mid, c_out, stride, stage):
        self.u1 = _ConvUnit(model, name + ".1", c_in, c_mid, stride, stage)
        self.u2 = _ConvUnit(model, name + ".2", c_mid, c_out, 1, stage)

    def __call__(self, x, training):
        return self.u2(self.u1(x, training), training)


class _LinearBN:
    """FC -> batch norm head producing one attribute feature."""

    def __init__(self, model, name, d_in, d_out, stage):
        self.w = model.params.add(
            name + ".w", kaiming_uniform(model.rng, (d_in, d_out), d_in, model.dtype), stage
        )
        self.b = model.params.add(name + ".b", np.zeros(d_out, model.dtype), stage, decay=False)
        self.gamma = model.params.add(name + ".bn.g", np.ones(d_out, model.dtype), stage, decay=False)
        self.beta = model.params.add(name + ".bn.b", np.zeros(d_out, model.dtype), stage, decay=False)
        self.state = BatchNormState(d_out, model.dtype)
        model.bn_states[name + ".bn"] = self.state

    def __call__(self, x, training):
        return ad.batch_norm(ad.linear(x, self.w, self.b), self.gamma, self.beta, self.state, training)


class AttrPartModel:
    """Builds parameters from a config and runs stage-1 / full forwards."""

    def __init__(self, cfg: ModelConfig, rng=None, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.params = ModelParams()
        self.bn_states = {}
        self.mask_eval_count = 0
        self._build()

    def _build(self):
        cfg = self.cfg
        w1, w2, w3 = cfg.stem_widths
        s1 = STAGE_DETECTION
        s2 = STAGE_REFINEMENT

        self.stem = [
            _ConvBlock(self, "stem.b1", cfg.in_channels, w1, w1, 2, s1),
            _ConvBlock(self, "stem.b2", w1, w2, w2, 2, s1),
            _ConvBlock(self, "stem.b3", w2, w3, w3, 2, s1),
        ]
        # the global block keeps a narrow entry conv and widens to the
        # embedding dim in its second conv (the map is tiny there)
        self.global_block = _ConvBlock(self, "global.b4", w3, cfg.global_mid, cfg.feat_dim, 2, s1)
        self.attr_block = _ConvBlock(self, "attr.b4", w3, cfg.attr_width, cfg.attr_width, 1, s1)
        self.part_block = _ConvBlock(self, "part.b4", w3, cfg.part_width, cfg.part_width, 1, s2)

        rng, dt = self.rng, self.dtype
        K = cfg.num_masks
        self.det_w = [
            self.params.add(
                f"detector.{k}.w", kaiming_uniform(rng, (1, cfg.attr_width, 1, 1), cfg.attr_width, dt), s1
            )
            for k in range(K)
        ]
        self.det_b = [
            self.params.add(f"detector.{k}.b", np.zeros(1, dt), s1, decay=False) for k in range(K)
        ]

        self.heads = [
            _LinearBN(self, f"head.{g.name}", cfg.attr_width, cfg.attr_feat_dim, s1)
            for g in cfg.schema.groups
        ]
        self.attr_cls_w = [
            self.params.add(
                f"attrcls.{g.name}.w",
                kaiming_uniform(rng, (cfg.attr_feat_dim, g.num_classes), cfg.attr_feat_dim, dt),
                s1,
            )
            for g in cfg.schema.groups
        ]
        self.attr_cls_b = [
            self.params.add(f"attrcls.{g.name}.b", np.zeros(g.num_classes, dt), s1, decay=False)
            for g in cfg.schema.groups
        ]

        self.id_cls_w = self.params.add(
            "idcls.w", kaiming_uniform(rng, (cfg.feat_dim, cfg.num_train_ids), cfg.feat_dim, dt), s1
        )
        self.id_cls_b = self.params.add("idcls.b", np.zeros(cfg.num_train_ids, dt), s1, decay=False)

        n_attr = cfg.schema.num_groups
        self.fusion_w = self.params.add(
            "fusion.w",
            kaiming_uniform(rng, (n_attr * cfg.attr_feat_dim, cfg.fusion_dim), n_attr * cfg.attr_feat_dim, dt),
            s2,
        )
        self.fusion_b = self.params.add("fusion.b", np.zeros(cfg.fusion_dim, dt), s2, decay=False)

        self.gate_wl, self.gate_wh, self.gate_b, self.gate_wp = [], [], [], []
        for k in range(K):
            self.gate_wl.append(self.params.add(
                f"gate.{k}.wl", kaiming_uniform(rng, (cfg.part_width, cfg.gate_hidden), cfg.part_width, dt), s2
            ))
            self.gate_wh.append(self.params.add(
                f"gate.{k}.wh", kaiming_uniform(rng, (cfg.fusion_dim, cfg.gate_hidden), cfg.fusion_dim, dt), s2
            ))
            self.gate_b.append(self.params.add(f"gate.{k}.b", np.zeros(cfg.gate_hidden, dt), s2, decay=False))
            self.gate_wp.append(self.params.add(
                f"gate.{k}.wp", kaiming_uniform(rng, (cfg.gate_hidden, cfg.part_width), cfg.gate_hidden, dt), s2
            ))

        self.proj_w = self.params.add(
            "proj.w", kaiming_uniform(rng, (K * cfg.part_width, cfg.feat_dim), K * cfg.part_width, dt), s2
        )
        self.proj_b = self.params.add("proj.b", np.zeros(cfg.feat_dim, dt), s2, decay=False)

        self.local_cls_w = self.params.add(
            "localcls.w", kaiming_uniform(rng, (cfg.feat_dim, cfg.num_train_ids), cfg.feat_dim, dt), s2
        )
        self.local_cls_b = self.params.add("localcls.b", np.zeros(cfg.num_train_ids, dt), s2, decay=False)

    # ------------------------------------------------------------------
    # forward pieces
    # ------------------------------------------------------------------

    def forward_backbone(self, images, training, need_parts=True):
        """Shared stem once, then global / attribute / part branch maps."""
        h, w = self.cfg.image_size
        if images.shape[1:] != (self.cfg.in_channels, h, w):
            raise ConfigError(
                f"backbone: images {images.shape[1:]} do not match configured {(self.cfg.in_channels, h, w)}"
            )
        x = images
        for block in self.stem:
            x = block(x, training)
        gf = self.global_block(x, training)
        af = self.attr_block(x, training)
        pf = self.part_block(x, training) if need_parts else None
        return gf, af, pf

    def detect_masks(self, af):
        """K shared attention masks: 1x1 conv + sigmoid, evaluated once each."""
        masks = []
        for k in range(self.cfg.num_masks):
            score = ad.conv2d(af, self.det_w[k], self.det_b[k])
            masks.append(ad.sigmoid(score))
            self.mask_eval_count += 1
        return masks

    def attribute_heads(self, af, masks, training):
        """Per-group pooled feature -> FC+BN head -> classifier logits."""
        feats, logits = [], []
        for i, group in enumerate(self.cfg.schema.groups):
            pooled = ad.weighted_average_pool(af, masks[group.mask_group])
            a = self.heads[i](pooled, training)
            feats.append(a)
            logits.append(ad.linear(a, self.attr_cls_w[i], self.attr_cls_b[i]))
        return feats, logits

    def fuse_attributes(self, attr_feats):
        return ad.linear(ad.concat(attr_feats), self.fusion_w, self.fusion_b)

    def extract_parts(self, pf, masks):
        return [ad.weighted_average_pool(pf, m) for m in masks]

    def refine_part(self, l, f_attri, k):
        pre = ad.add(
            ad.linear(l, self.gate_wl[k], self.gate_b[k]),
            ad.matmul(f_attri, self.gate_wh[k]),
        )
        gate = ad.sigmoid(ad.matmul(ad.tanh(pre), self.gate_wp[k]))
        return ad.mul(l, gate)

    def final_descriptor(self, refined, g):
        f_p = ad.linear(ad.concat(refined), self.proj_w, self.proj_b)
        return f_p, ad.concat([f_p, g])

    # ------------------------------------------------------------------
    # full passes
    # ------------------------------------------------------------------

    def stage1_forward(self, images, training):
        gf, af, _ = self.forward_backbone(images, training, need_parts=False)
        g = ad.global_average_pool(gf)
        masks = self.detect_masks(af)
        attr_feats, attr_logits = self.attribute_heads(af, masks, training)
        id_logits = ad.linear(g, self.id_cls_w, self.id_cls_b)
        return Stage1Outputs(g, masks, attr_feats, attr_logits, id_logits)

    def full_forward(self, images, training):
        gf, af, pf = self.forward_backbone(images, training, need_parts=True)
        g = ad.global_average_pool(gf)
        masks = self.detect_masks(af)
        attr_feats, attr_logits = self.attribute_heads(af, masks, training)
        id_logits = ad.linear(g, self.id_cls_w, self.id_cls_b)
        f_attri = self.fuse_attributes(attr_feats)
        part_feats = self.extract_parts(pf, masks)
        refined = [self.refine_part(l, f_attri, k) for k, l in enumerate(part_feats)]
        f_p, f = self.final_descriptor(refined, g)
        local_logits = ad.linear(f_p, self.local_cls_w, self.local_cls_b)
        return FullOutputs(
            g=g,
            masks=masks,
            attr_feats=attr_feats,
            attr_logits=attr_logits,
            id_logits=id_logits,
            f_attri=f_attri,
            part_feats=part_feats,
            refined_feats=refined,
            f_p=f_p,
            f=f,
            local_id_logits=local_logits,
        )
