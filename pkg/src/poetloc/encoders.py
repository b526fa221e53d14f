"""Twin convolutional encoders for camera images and rendered depth.

Both encoders share one architecture: six blocks, each opening with a
stride-2 3x3 convolution and following with two stride-1 3x3
convolutions, every layer finished by LeakyReLU(0.1).  Each block halves
the spatial size, so the output grid is 1/64 of the input in both axes,
with 196 channels.  The two encoders differ only in what the first layer
consumes: three channels for the camera image, one for depth.

No normalization layers anywhere; kernels start at Kaiming fan-in scale
and biases at zero, which keeps activations bounded at initialization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .maprender import DepthImage
from .tensor import Tensor, add_channel_bias, conv2d, leaky_relu

BLOCK_CHANNELS = [16, 32, 64, 96, 128, 196]
FEATURE_CHANNELS = BLOCK_CHANNELS[-1]
DOWNSCALE = 64  # six halvings
LEAK = 0.1

IMAGE_PREFIX = "img_enc"
DEPTH_PREFIX = "lid_enc"


@dataclass(eq=False)
class FeatureMap:
    """A (Hc, Wc, Dc) grid of feature vectors, one per coarse cell."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("feature map must be rank 3")

    @property
    def height(self):
        return self.values.shape[0]

    @property
    def width(self):
        return self.values.shape[1]

    @property
    def channels(self):
        return self.values.shape[2]


def feature_grid_shape(height, width):
    """Coarse grid size for an input image, without running anything.

    Rejects sizes the encoder cannot reduce exactly.
    """
    if height % DOWNSCALE or width % DOWNSCALE:
        raise ValueError(
            "input size %dx%d not divisible by %d; pad or crop first"
            % (height, width, DOWNSCALE)
        )
    return height // DOWNSCALE, width // DOWNSCALE


def _layer_plan(in_channels):
    """(cin, cout, stride) for the eighteen conv layers of one encoder."""
    plan = []
    cin = in_channels
    for cout in BLOCK_CHANNELS:
        plan.append((cin, cout, 2))
        plan.append((cout, cout, 1))
        plan.append((cout, cout, 1))
        cin = cout
    return plan


def encoder_parameter_count(in_channels):
    """Closed-form parameter count; the tests hold the dicts to this."""
    total = 0
    for cin, cout, _ in _layer_plan(in_channels):
        total += 3 * 3 * cin * cout + cout
    return total


def init_encoder_params(prefix, in_channels, rng, dtype=np.float32):
    """Fresh parameters for one encoder under ``prefix``.

    Kernels draw from a normal scaled by the LeakyReLU fan-in rule;
    biases start at zero.  Keys look like "img_enc.block2.conv0.w".
    """
    gain = math.sqrt(2.0 / (1.0 + LEAK * LEAK))
    params = {}
    layer = iter(_layer_plan(in_channels))
    for b in range(len(BLOCK_CHANNELS)):
        for j in range(3):
            cin, cout, _ = next(layer)
            std = gain / math.sqrt(3 * 3 * cin)
            w = rng.normal(0.0, std, size=(3, 3, cin, cout))
            params["%s.block%d.conv%d.w" % (prefix, b, j)] = Tensor(
                w.astype(dtype), requires_grad=True
            )
            params["%s.block%d.conv%d.b" % (prefix, b, j)] = Tensor(
                np.zeros(cout, dtype=dtype), requires_grad=True
            )
    return params


def encoder_forward(x: Tensor, params, prefix) -> Tensor:
    """Run the six blocks; input (H, W, Cin), output (H/64, W/64, 196)."""
    out = x
    for b in range(len(BLOCK_CHANNELS)):
        for j in range(3):
            w = params["%s.block%d.conv%d.w" % (prefix, b, j)]
            bias = params["%s.block%d.conv%d.b" % (prefix, b, j)]
            stride = 2 if j == 0 else 1
            out = add_channel_bias(conv2d(out, w, stride=stride, padding=1), bias)
            out = leaky_relu(out, LEAK)
    return out


def calibrate_encoder_gains(params, prefix, sample, target_rms=1.0):
    """Rescale freshly initialized conv weights to a healthy activation scale.

    Fan-in scaling alone does not keep activations stable here: natural
    inputs are spatially correlated, so the variance actually shrinks a
    little at every one of the eighteen layers and the features (and
    their gradients) arrive orders of magnitude too small.  Running one
    probe input through the stack and scaling each layer's kernel so its
    post-activation RMS equals ``target_rms`` fixes both directions at
    once.  The activation is positively homogeneous, so scaling the
    kernel scales the output exactly and the probe never needs a rerun.

    Call right after ``init_encoder_params``, before any training; the
    rescale is deterministic in the probe input.
    """
    if target_rms <= 0:
        raise ValueError("target rms must be positive")
    if isinstance(sample, DepthImage):
        sample = sample.depth
    if isinstance(sample, np.ndarray) and sample.ndim == 2:
        sample = sample[:, :, None]
    out = _as_input_tensor(sample, params, params["%s.block0.conv0.w" % prefix].shape[2])
    for b in range(len(BLOCK_CHANNELS)):
        for j in range(3):
            w = params["%s.block%d.conv%d.w" % (prefix, b, j)]
            bias = params["%s.block%d.conv%d.b" % (prefix, b, j)]
            stride = 2 if j == 0 else 1
            out = leaky_relu(
                add_channel_bias(conv2d(out, w, stride=stride, padding=1), bias),
                LEAK,
            )
            rms = float(np.sqrt(np.mean(out.data.astype(np.float64) ** 2)))
            if rms > 0:
                factor = target_rms / rms
                w.data *= np.asarray(factor, dtype=w.dtype)
                out = Tensor(out.data * np.asarray(factor, dtype=out.dtype))


def encode_image(image, params) -> FeatureMap:
    """Feature map of an RGB camera image, values in [0, 1].

    ``image`` may be a raw (H, W, 3) array or an already-built Tensor;
    arrays adopt the parameter dtype.
    """
    x = _as_input_tensor(image, params, 3)
    feature_grid_shape(x.shape[0], x.shape[1])
    return FeatureMap(encoder_forward(x, params, IMAGE_PREFIX))


def encode_depth(depth, params) -> FeatureMap:
    """Feature map of a rendered depth image; depth stays in raw meters."""
    if isinstance(depth, DepthImage):
        depth = depth.depth
    if isinstance(depth, np.ndarray) and depth.ndim == 2:
        depth = depth[:, :, None]
    x = _as_input_tensor(depth, params, 1)
    feature_grid_shape(x.shape[0], x.shape[1])
    return FeatureMap(encoder_forward(x, params, DEPTH_PREFIX))


def _as_input_tensor(data, params, channels):
    if not isinstance(data, Tensor):
        dtype = next(iter(params.values())).dtype
        data = Tensor(np.asarray(data, dtype=dtype))
    if data.ndim != 3 or data.shape[2] != channels:
        raise ValueError(
            "expected an (H, W, %d) input, got shape %s" % (channels, (data.shape,))
        )
    return data
