"""
🧠 MASKED U-NET + PROTOTYPE HEAD
WHAT: One network serves both objectives. The encoder multiplies the support
      annotation into its features at every stage after the first; the
      bottleneck feeds a 1x1 projection + global average pool (the prototype)
      and a skip-connected decoder that ends in a 1x1 conv + sigmoid.
HOW:  Parameters are split by name: "theta." for encoder blocks and the
      prototype projection, "phi." for decoder blocks and the output head.

Every U-Net block is two 3x3 conv (padding 1) + relu layers.
"""
import logging
from collections import OrderedDict

import numpy as np

from autograd import ops
from autograd.gradcheck import check_gradients
from autograd.tensor import Tensor
from utils.exceptions import ConfigurationError, ShapeError

from .config import ModelConfig

logger = logging.getLogger(__name__)

THETA = "theta."
PHI = "phi."


class ModelParams:
    """Named trainable tensors, partitioned into theta and phi."""

    def __init__(self, config, theta, phi):
        self.config = config
        self.theta = OrderedDict(theta)
        self.phi = OrderedDict(phi)
        for name in self.theta:
            if not name.startswith(THETA):
                raise ConfigurationError(f"theta tensor {name!r} lacks the {THETA!r} prefix")
        for name in self.phi:
            if not name.startswith(PHI):
                raise ConfigurationError(f"phi tensor {name!r} lacks the {PHI!r} prefix")

    @classmethod
    def from_named(cls, config, tensors):
        """Split a flat name -> Tensor mapping by prefix."""
        theta = [(n, t) for n, t in tensors.items() if n.startswith(THETA)]
        phi = [(n, t) for n, t in tensors.items() if n.startswith(PHI)]
        unknown = set(tensors) - {n for n, _ in theta} - {n for n, _ in phi}
        if unknown:
            raise ConfigurationError(f"tensors outside theta/phi: {sorted(unknown)}")
        return cls(config, theta, phi)

    def named(self):
        """theta tensors followed by phi tensors, in construction order."""
        merged = OrderedDict(self.theta)
        merged.update(self.phi)
        return merged

    def __getitem__(self, name):
        return self.theta[name] if name.startswith(THETA) else self.phi[name]

    def zero_grad(self):
        for tensor in self.named().values():
            tensor.zero_grad()

    def copy(self):
        return ModelParams.from_named(
            self.config,
            OrderedDict((n, Tensor(t.data, requires_grad=t.requires_grad, name=n)) for n, t in self.named().items()),
        )

    def equals(self, other):
        mine, theirs = self.named(), other.named()
        return list(mine) == list(theirs) and all(np.array_equal(mine[n].data, theirs[n].data) for n in mine)


# ==============================================================================
# PARAMETER LAYOUT + INIT
# ==============================================================================

def _conv_shapes(cfg):
    """Ordered (name, weight shape) for every convolution in the network."""
    shapes = []
    in_channels = 1
    for level in range(cfg.levels):
        out_channels = cfg.channels(level)
        shapes.append((f"{THETA}enc{level}.conv0", (out_channels, in_channels, 3, 3)))
        shapes.append((f"{THETA}enc{level}.conv1", (out_channels, out_channels, 3, 3)))
        in_channels = out_channels
    shapes.append((f"{THETA}proto", (cfg.proto_dim, cfg.bottleneck_channels, 1, 1)))
    for level in range(cfg.levels - 2, -1, -1):
        out_channels = cfg.channels(level)
        shapes.append((f"{PHI}dec{level}.conv0", (out_channels, cfg.channels(level + 1) + out_channels, 3, 3)))
        shapes.append((f"{PHI}dec{level}.conv1", (out_channels, out_channels, 3, 3)))
    shapes.append((f"{PHI}head", (1, cfg.channels(0), 1, 1)))
    return shapes


def init_params(cfg, seed):
    """He-normal weights (variance 2 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in _conv_shapes(cfg):
        fan_in = shape[1] * shape[2] * shape[3]
        weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        tensors[f"{name}.weight"] = Tensor(weight, requires_grad=True, name=f"{name}.weight")
        tensors[f"{name}.bias"] = Tensor(np.zeros(shape[0]), requires_grad=True, name=f"{name}.bias")
    params = ModelParams.from_named(cfg, tensors)
    logger.debug(f"initialised {len(tensors)} tensors ({len(params.theta)} theta, {len(params.phi)} phi) from seed {seed}")
    return params


def infer_config(tensors):
    """Recover widths and depth from checkpoint tensor shapes."""
    levels = sum(1 for name in tensors if name.startswith(f"{THETA}enc") and name.endswith(".conv0.weight"))
    try:
        base = tensors[f"{THETA}enc0.conv0.weight"].shape[0]
        proto_dim = tensors[f"{THETA}proto.weight"].shape[0]
    except KeyError as exc:
        raise ConfigurationError(f"checkpoint lacks tensor {exc}") from exc
    return ModelConfig(levels=levels, base_channels=base, proto_dim=proto_dim, input_size=None)


# ==============================================================================
# FORWARD PASSES
# ==============================================================================

def _conv(params, name, x, padding):
    return ops.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], 1, padding)


def _block(params, prefix, x):
    x = ops.relu(_conv(params, f"{prefix}.conv0", x, 1))
    return ops.relu(_conv(params, f"{prefix}.conv1", x, 1))


def _as_batch(tensor, what):
    if tensor.ndim != 3 or tensor.shape[0] != 1:
        raise ShapeError(f"{what} must be [1,H,W], got {tensor.shape}")
    return ops.reshape(tensor, (1,) + tensor.shape)


def encode_masked(params, image, support_mask):
    """
    Encoder pass. Returns (bottleneck [1,Cb,h,w], skips) with one skip per
    level. `support_mask=None` runs the plain unmasked encoder.
    """
    cfg = params.config
    x = _as_batch(image, "image")
    mask = None
    if support_mask is not None:
        if support_mask.shape != image.shape:
            raise ShapeError(f"support mask {support_mask.shape} does not match image {image.shape}")
        mask = _as_batch(support_mask, "support mask")
    factor = 2 ** (cfg.levels - 1)
    if x.shape[2] % factor or x.shape[3] % factor:
        raise ShapeError(f"image extents {x.shape[2:]} are not divisible by 2^{cfg.levels - 1}")

    skips = []
    for level in range(cfg.levels):
        if level > 0:
            x = ops.maxpool2(x)
            if mask is not None:
                # Max-pool keeps any positive support pixel alive at coarse stages.
                mask = ops.maxpool2(mask)
        x = _block(params, f"{THETA}enc{level}", x)
        if level > 0 and mask is not None:
            x = ops.elementwise_mul(x, mask)
        skips.append(x)
    return x, skips


def prototype(params, image, support_mask):
    """proto_dim vector: 1x1 projection of the bottleneck, then GAP. Uses theta only."""
    bottleneck, _ = encode_masked(params, image, support_mask)
    projected = _conv(params, f"{THETA}proto", bottleneck, 0)
    return ops.reshape(ops.global_avg_pool(projected), (params.config.proto_dim,))


def episode_prototype(params, query_image, support):
    """p_hat: mean of the per-shot prototypes of (query image, shot annotation)."""
    shots = [prototype(params, query_image, shot.annotation) for shot in support]
    if not shots:
        raise ConfigurationError("episode_prototype needs at least one support shot")
    return ops.scale(ops.tensor_sum(ops.stack(shots), axis=0), 1.0 / len(shots))


def segment(params, image, support_mask):
    """Foreground probabilities [1,H,W]; `support_mask=None` is the plain U-Net."""
    cfg = params.config
    x, skips = encode_masked(params, image, support_mask)
    for level in range(cfg.levels - 2, -1, -1):
        x = ops.concat_channels(ops.upsample2(x), skips[level])
        x = _block(params, f"{PHI}dec{level}", x)
    logits = _conv(params, f"{PHI}head", x, 0)
    return ops.reshape(ops.sigmoid(logits), image.shape)


def combine_support(support):
    """
    Pixel-wise mean of the support annotations -> soft mask [1,H,W] in [0,1].

    Accepts SupportShot records or (annotation, kind) pairs.
    """
    annotations = [item.annotation if hasattr(item, "annotation") else item[0] for item in support]
    if not annotations:
        raise ConfigurationError("combine_support needs at least one support annotation")
    shape = annotations[0].shape
    if any(a.shape != shape for a in annotations):
        raise ShapeError(f"support annotations differ in shape: {[a.shape for a in annotations]}")
    total = np.zeros(shape, dtype=annotations[0].dtype)
    for annotation in annotations:
        total += annotation.numpy()
    return Tensor(total / len(annotations))


# ==============================================================================
# END-TO-END GRADIENT CHECK
# ==============================================================================

GRADCHECK_CONFIG = ModelConfig(levels=2, base_channels=2, proto_dim=4, input_size=(16, 16))


def model_gradient_check(seed=0, tolerance=1e-3, max_coords=6):
    """Finite-difference check of both losses through the whole 16x16 network."""
    rng = np.random.default_rng(seed)
    cfg = GRADCHECK_CONFIG
    names = [f"{name}.{part}" for name, _ in _conv_shapes(cfg) for part in ("weight", "bias")]
    initial = init_params(cfg, seed)
    inputs = {name: initial[name].data.astype(np.float64) for name in names}
    for name in names:
        if name.endswith(".bias"):
            inputs[name] = rng.normal(0.0, 0.1, size=inputs[name].shape)

    image = rng.random((1, 16, 16))
    mask = rng.uniform(0.2, 1.0, size=(1, 16, 16))
    target = (rng.random((1, 16, 16)) < 0.3).astype(np.float64)
    proto_weights = rng.normal(size=cfg.proto_dim)

    def build(tensors):
        params = ModelParams.from_named(cfg, tensors)
        probs = segment(params, Tensor(image), Tensor(mask))
        seg_loss = ops.weighted_bce(probs, Tensor(target), 2.0)
        proto = prototype(params, Tensor(image), Tensor(mask))
        proto_loss = ops.tensor_sum(ops.elementwise_mul(proto, Tensor(proto_weights)))
        return ops.elementwise_add(seg_loss, ops.scale(proto_loss, 0.1))

    return check_gradients("model[16x16]", build, inputs, tolerance=tolerance, max_coords=max_coords, seed=seed)
