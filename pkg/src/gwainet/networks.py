"""The four subnetworks (warper, generator, critic, identity encoder) as
pure functions over a flat dict of named parameter tensors.

One code path serves every scale: ``ArchConfig`` holds the width/depth
knobs, with presets for the full-size topology ("paper"), a CPU-trainable
shrink ("desk") and a test-size shrink ("nano").  Parameter names are
hierarchical ("wnet.down0.c1.w", "gnet.sr.block3.c2.b", ...) and the full
name->shape schema is computable without allocating anything, which is what
checkpoint validation and the parameter-count test use.

Topology notes, fixed here:
  * Wnet: three (s1,s2) conv stages down to LR resolution, a global skip
    around its residual blocks, then bare 2x pixel shuffles back to HR and a
    zero-initialized 2-channel output conv (so training starts at the
    identity warp).  The bare shuffle chain divides channels by 4 per stage,
    so its entry width must be sr_factor^2; a 3x3 adapter conv is inserted
    when base_width differs (never at the paper scale, where 64 == 8^2).
  * SRnet: EDSR-style body (head conv, residual blocks, closing conv,
    global skip) followed by conv+pixel-shuffle upscale stages and a
    zero-initialized 3-channel output conv.  Guide features are fused by
    depth-concat + 3x3 conv after SRnet blocks fusion_interval, 2*...
  * GFEnet: three (s1+ReLU, s2+ReLU) downscale stages and residual blocks,
    tapped every fusion_interval blocks.
  * Cnet: four 5x5/stride-2 convs with LeakyReLU(0.2), then a single linear
    score, no normalization anywhere.
  * Inet: VGG-16-shaped conv/pool stages (widths w,2w,4w,8w,8w; counts
    2,2,2,3,3) and three fully-connected layers of width inet_embed_dim,
    ReLU after the first two only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Mapping, Optional

import numpy as np

from .tensor import ShapeError, Tensor, ValidationError, add, mul
from .functional import (concat_depth, conv2d, flatten, fully_connected,
                         leaky_relu, max_pool2d, pixel_shuffle, relu)
from .tensor import abs_, matmul, sigmoid, sub, transpose2d, add_row_bias


@dataclass(frozen=True)
class ArchConfig:
    hr_size: int = 256
    sr_factor: int = 8
    base_width: int = 64
    upscale_width: int = 256
    n_srnet_blocks: int = 16
    n_gfenet_blocks: int = 12
    fusion_interval: int = 4
    n_wnet_blocks: int = 8
    critic_widths: tuple = (64, 128, 256, 512)
    inet_embed_dim: int = 4096
    res_scale: float = 1.0
    use_guide: bool = True

    def validate(self) -> "ArchConfig":
        sr = self.sr_factor
        if sr < 2 or (sr & (sr - 1)) != 0:
            raise ValidationError(f"sr_factor must be a power of 2 >= 2, got {sr}")
        if self.hr_size % sr != 0:
            raise ValidationError(f"hr_size {self.hr_size} not divisible by sr_factor {sr}")
        if self.hr_size % 32 != 0:
            raise ValidationError(
                f"hr_size {self.hr_size} must be divisible by 32 (critic and Inet stages)")
        if self.n_gfenet_blocks % self.fusion_interval != 0:
            raise ValidationError(
                f"n_gfenet_blocks {self.n_gfenet_blocks} not divisible by "
                f"fusion_interval {self.fusion_interval}")
        if self.n_fusions * self.fusion_interval > self.n_srnet_blocks:
            raise ValidationError(
                f"{self.n_fusions} fusions at spacing {self.fusion_interval} do not fit "
                f"into {self.n_srnet_blocks} SRnet blocks")
        if self.upscale_width % 4 != 0:
            raise ValidationError(f"upscale_width {self.upscale_width} must be divisible by 4")
        if len(self.critic_widths) != 4:
            raise ValidationError(f"critic_widths must have 4 entries, got {self.critic_widths}")
        return self

    @property
    def lr_size(self) -> int:
        return self.hr_size // self.sr_factor

    @property
    def n_scale_stages(self) -> int:
        return int(math.log2(self.sr_factor))

    @property
    def n_fusions(self) -> int:
        return self.n_gfenet_blocks // self.fusion_interval

    @property
    def srnet_fusion_taps(self) -> tuple:
        """SRnet block indices (1-based) after which guide features fuse in."""
        return tuple((k + 1) * self.fusion_interval for k in range(self.n_fusions))

    @property
    def wnet_shuffle_width(self) -> int:
        # bare 2x shuffles divide channels by 4 per stage and must end at 1
        return 4 ** self.n_scale_stages

    @property
    def inet_stage_widths(self) -> tuple:
        w = self.base_width
        return (w, 2 * w, 4 * w, 8 * w, 8 * w)

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["critic_widths"] = list(self.critic_widths)
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "ArchConfig":
        d = dict(d)
        d["critic_widths"] = tuple(d["critic_widths"])
        return ArchConfig(**d).validate()


PRESETS = {
    "paper": ArchConfig(),
    "desk": ArchConfig(hr_size=64, base_width=16, upscale_width=64,
                       n_srnet_blocks=8, n_gfenet_blocks=6, fusion_interval=2,
                       n_wnet_blocks=4, critic_widths=(16, 32, 64, 128),
                       inet_embed_dim=128),
    "nano": ArchConfig(hr_size=32, base_width=8, upscale_width=32,
                       n_srnet_blocks=2, n_gfenet_blocks=2, fusion_interval=1,
                       n_wnet_blocks=2, critic_widths=(8, 16, 32, 64),
                       inet_embed_dim=32),
}


def preset(name: str) -> ArchConfig:
    if name not in PRESETS:
        raise ValidationError(f"unknown preset {name!r}; available: {sorted(PRESETS)}")
    return PRESETS[name].validate()


# -- parameter schema --------------------------------------------------------

_INET_STAGE_CONVS = (2, 2, 2, 3, 3)


def parameter_shapes(arch: ArchConfig) -> dict:
    """name -> (shape, init) with init in {"fanin", "zero"}."""
    arch.validate()
    w = arch.base_width
    shapes: dict[str, tuple] = {}

    def conv(name, cin, cout, k=3, init="fanin"):
        shapes[f"{name}.w"] = ((cout, cin, k, k), init)
        shapes[f"{name}.b"] = ((cout,), "zero")

    def fc(name, nin, nout, init="fanin"):
        shapes[f"{name}.w"] = ((nout, nin), init)
        shapes[f"{name}.b"] = ((nout,), "zero")

    if arch.use_guide:
        # Wnet
        conv("wnet.down0.c1", 6, w)
        conv("wnet.down0.c2", w, w)
        for i in range(1, arch.n_scale_stages):
            conv(f"wnet.down{i}.c1", w, w)
            conv(f"wnet.down{i}.c2", w, w)
        conv("wnet.pre", w, w)
        for i in range(arch.n_wnet_blocks):
            conv(f"wnet.block{i}.c1", w, w)
            conv(f"wnet.block{i}.c2", w, w)
        conv("wnet.post", w, w)
        if w != arch.wnet_shuffle_width:
            conv("wnet.adapter", w, arch.wnet_shuffle_width)
        conv("wnet.out", 1, 2, init="zero")

    # SRnet
    conv("gnet.sr.head", 3, w)
    for i in range(arch.n_srnet_blocks):
        conv(f"gnet.sr.block{i}.c1", w, w)
        conv(f"gnet.sr.block{i}.c2", w, w)
    if arch.use_guide:
        for k in range(arch.n_fusions):
            conv(f"gnet.fuse{k}", 2 * w, w)
    conv("gnet.sr.post", w, w)
    c = w
    for k in range(arch.n_scale_stages):
        conv(f"gnet.up{k}", c, arch.upscale_width)
        c = arch.upscale_width // 4
    conv("gnet.out", c, 3, init="zero")

    if arch.use_guide:
        # GFEnet
        cin = 3
        for k in range(arch.n_scale_stages):
            conv(f"gnet.gfe.down{k}.c1", cin, w)
            conv(f"gnet.gfe.down{k}.c2", w, w)
            cin = w
        for i in range(arch.n_gfenet_blocks):
            conv(f"gnet.gfe.block{i}.c1", w, w)
            conv(f"gnet.gfe.block{i}.c2", w, w)

    # Cnet
    cin = 3
    side = arch.hr_size
    for k, cw in enumerate(arch.critic_widths):
        conv(f"cnet.conv{k}", cin, cw, k=5)
        cin = cw
        side //= 2
    fc("cnet.fc", cin * side * side, 1)

    # Inet
    cin = 3
    side = arch.hr_size
    for s, (width, reps) in enumerate(zip(arch.inet_stage_widths, _INET_STAGE_CONVS)):
        for j in range(reps):
            conv(f"inet.conv{s}_{j}", cin, width)
            cin = width
        side //= 2
    d = arch.inet_embed_dim
    fc("inet.fc0", cin * side * side, d)
    fc("inet.fc1", d, d)
    # final embedding layer carries no bias: both consumers (the Siamese
    # |e1-e2| head and the embedding-distance loss) are invariant to a
    # constant output shift, so it could never receive gradient
    shapes["inet.fc2.w"] = ((d, d), "fanin")
    # Siamese pretraining head; unused after pretraining
    shapes["inet.head.w"] = ((1, d), "fanin")
    shapes["inet.head.b"] = ((1,), "zero")
    return shapes


def parameter_count(arch: ArchConfig) -> int:
    return sum(int(np.prod(shape)) for shape, _ in parameter_shapes(arch).values())


@dataclass
class ModelBundle:
    """Named parameter tensors plus the architecture and training metadata."""

    params: dict
    arch: ArchConfig
    meta: dict = field(default_factory=dict)

    def subset(self, prefix: str) -> dict:
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def set_trainable(self, prefixes, flag: bool = True):
        for name, p in self.params.items():
            if any(name.startswith(pre) for pre in prefixes):
                p.requires_grad = flag

    def freeze_all(self):
        for p in self.params.values():
            p.requires_grad = False

    def component_bytes(self, prefix: str) -> bytes:
        return b"".join(self.params[k].data.tobytes()
                        for k in sorted(self.params) if k.startswith(prefix))


def init_model(arch: ArchConfig, seed: int = 0, dtype=np.float32,
               zero_init_outputs: bool = True) -> ModelBundle:
    """Centered-uniform fan-in init; output convs zero so step 0 is an
    identity warp plus a bias-only SR image."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, (shape, init) in parameter_shapes(arch).items():
        randomize = init == "fanin" or (
            init == "zero" and not zero_init_outputs and name.endswith(".w"))
        if randomize:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
            limit = math.sqrt(3.0 / fan_in)
            data = rng.uniform(-limit, limit, size=shape).astype(dtype)
        else:
            data = np.zeros(shape, dtype=dtype)
        params[name] = Tensor(data, requires_grad=True)
    return ModelBundle(params=params, arch=arch,
                       meta={"seed": seed, "stage": "init", "step": 0,
                             "stages_done": []})


# -- building blocks ---------------------------------------------------------


def residual_block(x: Tensor, params: Mapping[str, Tensor],
                   res_scale: float = 1.0) -> Tensor:
    """x + res_scale * conv(relu(conv(x))), width-preserving 3x3 convs."""
    w1 = params["c1.w"]
    if x.shape[1] != w1.shape[1]:
        raise ShapeError(
            f"residual_block width mismatch: input {x.shape} vs conv weight {w1.shape}")
    h = conv2d(x, w1, params["c1.b"], stride=1, padding=1)
    h = relu(h)
    h = conv2d(h, params["c2.w"], params["c2.b"], stride=1, padding=1)
    if res_scale != 1.0:
        h = mul(h, res_scale)
    return add(x, h)


def _block_params(params: Mapping[str, Tensor], prefix: str) -> dict:
    return {"c1.w": params[f"{prefix}.c1.w"], "c1.b": params[f"{prefix}.c1.b"],
            "c2.w": params[f"{prefix}.c2.w"], "c2.b": params[f"{prefix}.c2.b"]}


def _conv(params, name, x, stride=1, k=3):
    return conv2d(x, params[f"{name}.w"], params[f"{name}.b"],
                  stride=stride, padding=k // 2)


# -- subnetwork forwards ------------------------------------------------------


def wnet_forward(i_gi: Tensor, i_lru: Tensor, params: Mapping[str, Tensor],
                 arch: ArchConfig) -> Tensor:
    """Flow field (B, 2, hr, hr) from the guide and the upscaled LR input."""
    hr = arch.hr_size
    for name, t in (("I_GI", i_gi), ("I_LRU", i_lru)):
        if t.ndim != 4 or t.shape[2] != hr or t.shape[3] != hr:
            raise ShapeError(f"wnet_forward: {name} must be (B,3,{hr},{hr}), got {t.shape}")
    x = concat_depth(i_gi, i_lru)
    for i in range(arch.n_scale_stages):
        x = relu(_conv(params, f"wnet.down{i}.c1", x))
        x = relu(_conv(params, f"wnet.down{i}.c2", x, stride=2))
    x = _conv(params, "wnet.pre", x)
    skip = x
    for i in range(arch.n_wnet_blocks):
        x = residual_block(x, _block_params(params, f"wnet.block{i}"), arch.res_scale)
    x = _conv(params, "wnet.post", x)
    x = add(skip, x)
    if "wnet.adapter.w" in params:
        x = _conv(params, "wnet.adapter", x)
    for _ in range(arch.n_scale_stages):
        x = pixel_shuffle(x, 2)
    return _conv(params, "wnet.out", x)


def gnet_forward(i_lr: Tensor, i_gw: Optional[Tensor],
                 params: Mapping[str, Tensor], arch: ArchConfig) -> Tensor:
    """Super-resolved image (B, 3, hr, hr) from the LR input and, unless the
    guide branch is disabled, the warped guide."""
    lr = arch.lr_size
    if i_lr.ndim != 4 or i_lr.shape[2] != lr or i_lr.shape[3] != lr:
        raise ShapeError(f"gnet_forward: I_LR must be (B,3,{lr},{lr}), got {i_lr.shape}")
    if arch.use_guide:
        if i_gw is None:
            raise ShapeError("gnet_forward: this architecture requires a warped guide")
        if i_gw.shape[2] != arch.hr_size or i_gw.shape[3] != arch.hr_size:
            raise ShapeError(
                f"gnet_forward: I_GW must be HR-sized ({arch.hr_size}), got {i_gw.shape}")

    # GFEnet: bring the warped guide down to LR resolution, tap its blocks
    gfe_taps = []
    if arch.use_guide:
        g = i_gw
        for k in range(arch.n_scale_stages):
            g = relu(_conv(params, f"gnet.gfe.down{k}.c1", g))
            g = relu(_conv(params, f"gnet.gfe.down{k}.c2", g, stride=2))
        for i in range(arch.n_gfenet_blocks):
            g = residual_block(g, _block_params(params, f"gnet.gfe.block{i}"), arch.res_scale)
            if (i + 1) % arch.fusion_interval == 0:
                gfe_taps.append(g)

    # SRnet body with fusion points
    x = _conv(params, "gnet.sr.head", i_lr)
    skip = x
    taps = set(arch.srnet_fusion_taps) if arch.use_guide else set()
    fuse_k = 0
    for i in range(arch.n_srnet_blocks):
        x = residual_block(x, _block_params(params, f"gnet.sr.block{i}"), arch.res_scale)
        if (i + 1) in taps:
            x = concat_depth(x, gfe_taps[fuse_k])
            x = _conv(params, f"gnet.fuse{fuse_k}", x)
            fuse_k += 1
    x = _conv(params, "gnet.sr.post", x)
    x = add(skip, x)

    for k in range(arch.n_scale_stages):
        x = _conv(params, f"gnet.up{k}", x)
        x = pixel_shuffle(x, 2)
    return _conv(params, "gnet.out", x)


def cnet_forward(img: Tensor, params: Mapping[str, Tensor],
                 arch: ArchConfig) -> Tensor:
    """Wasserstein critic score (B, 1); no output activation."""
    hr = arch.hr_size
    if img.ndim != 4 or img.shape[1] != 3 or img.shape[2] != hr or img.shape[3] != hr:
        raise ShapeError(f"cnet_forward: expected (B,3,{hr},{hr}), got {img.shape}")
    x = img
    for k in range(4):
        x = leaky_relu(_conv(params, f"cnet.conv{k}", x, stride=2, k=5), 0.2)
    return fully_connected(flatten(x), params["cnet.fc.w"], params["cnet.fc.b"])


def inet_embed(img: Tensor, params: Mapping[str, Tensor],
               arch: ArchConfig) -> Tensor:
    """Identity embedding (B, inet_embed_dim) from the VGG-shaped stack."""
    hr = arch.hr_size
    if img.ndim != 4 or img.shape[1] != 3 or img.shape[2] != hr or img.shape[3] != hr:
        raise ShapeError(f"inet_embed: expected (B,3,{hr},{hr}), got {img.shape}")
    x = img
    for s, reps in enumerate(_INET_STAGE_CONVS):
        for j in range(reps):
            x = relu(_conv(params, f"inet.conv{s}_{j}", x))
        x = max_pool2d(x, 2, 2)
    x = flatten(x)
    x = relu(fully_connected(x, params["inet.fc0.w"], params["inet.fc0.b"]))
    x = relu(fully_connected(x, params["inet.fc1.w"], params["inet.fc1.b"]))
    return matmul(x, transpose2d(params["inet.fc2.w"]))


def siamese_predict(x1: Tensor, x2: Tensor, params: Mapping[str, Tensor],
                    arch: ArchConfig) -> Tensor:
    """Same-identity probability sigmoid(w^T |e1 - e2| + b), shape (B, 1).

    The head parameters exist only for Inet pretraining.
    """
    e1 = inet_embed(x1, params, arch)
    e2 = inet_embed(x2, params, arch)
    d = abs_(sub(e1, e2))
    logits = add_row_bias(matmul(d, transpose2d(params["inet.head.w"])),
                          params["inet.head.b"])
    return sigmoid(logits)
