"""Desk-scale encoder / decoder producing keypoint head outputs from a Cartesian scan.

Topology (channels from TrainConfig, defaults in brackets):

    enc1  3x3 conv  1 -> e0 [4]          full resolution
    enc2  3x3 conv  e0 -> e1 [4]         after 2x2 average pool
    enc3  3x3 conv  e1 -> e2 [8]         after 2x2 average pool
    dec1  3x3 conv  up(enc3) | enc2 -> d0 [8]
    dec2  3x3 conv  up(dec1) | enc1 -> d1 [4]
    dec3  3x3 conv  d1 -> d2 [4]
    location / score heads: 1x1 conv d2 -> 1

Every hidden conv is followed by tanh. The descriptor map is the concatenation of the
three encoder outputs upsampled back to full resolution (e0 + e1 + e2 channels).
All parameters live in one flat float64 vector; `layout` gives the slice of each.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.exceptions import ConfigurationError, DataError, TrainingAbortedError
from core.grids import Grid2
from keypoints.services import KeypointHeadOutput

logger = logging.getLogger(__name__)

POOLING_STAGES = 2


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kernel: int
    in_channels: int
    out_channels: int

    @property
    def weight_shape(self):
        return (self.in_channels * self.kernel * self.kernel, self.out_channels)

    @property
    def size(self):
        return self.in_channels * self.kernel * self.kernel * self.out_channels + self.out_channels


def build_layers(encoder_channels, decoder_channels):
    if len(encoder_channels) != 3 or len(decoder_channels) != 3:
        raise ConfigurationError("the network has exactly 3 encoder and 3 decoder stages")
    if min(encoder_channels) < 1 or min(decoder_channels) < 1:
        raise ConfigurationError("channel counts must be positive")
    e0, e1, e2 = encoder_channels
    d0, d1, d2 = decoder_channels
    return (
        LayerSpec("enc1", 3, 1, e0),
        LayerSpec("enc2", 3, e0, e1),
        LayerSpec("enc3", 3, e1, e2),
        LayerSpec("dec1", 3, e2 + e1, d0),
        LayerSpec("dec2", 3, d0 + e0, d1),
        LayerSpec("dec3", 3, d1, d2),
        LayerSpec("location_head", 1, d2, 1),
        LayerSpec("score_head", 1, d2, 1),
    )


class FeatureNet:
    def __init__(self, encoder_channels=(4, 4, 8), decoder_channels=(8, 4, 4), params=None):
        self.encoder_channels = tuple(int(c) for c in encoder_channels)
        self.decoder_channels = tuple(int(c) for c in decoder_channels)
        self.layers = build_layers(self.encoder_channels, self.decoder_channels)
        self.layout = {}
        offset = 0
        for layer in self.layers:
            self.layout[layer.name] = (offset, layer)
            offset += layer.size
        self.parameter_count = offset
        if params is None:
            self.params = np.zeros(offset)
        else:
            params = np.array(params, dtype=np.float64).reshape(-1)
            if params.size != offset:
                raise DataError(f"expected {offset} parameters for this architecture, got {params.size}")
            self.params = params

    @property
    def descriptor_channels(self):
        return sum(self.encoder_channels)

    @classmethod
    def initialised(cls, seed, encoder_channels=(4, 4, 8), decoder_channels=(8, 4, 4), scale=1.0):
        net = cls(encoder_channels, decoder_channels)
        rng = np.random.default_rng(seed)
        for layer in net.layers:
            weight, _ = net.layer_params(layer.name)
            fan_in = weight.shape[0]
            weight[...] = rng.normal(scale=scale / np.sqrt(fan_in), size=weight.shape)
        logger.debug(f"initialised FeatureNet with {net.parameter_count} parameters")
        return net

    def layer_params(self, name, vector=None):
        """(weight, bias) views into the flat parameter vector (or another vector of the same layout)."""
        vector = self.params if vector is None else vector
        offset, layer = self.layout[name]
        n_weight = int(np.prod(layer.weight_shape))
        weight = vector[offset : offset + n_weight].reshape(layer.weight_shape)
        bias = vector[offset + n_weight : offset + layer.size]
        return weight, bias

    def layer_slice(self, name):
        offset, layer = self.layout[name]
        return slice(offset, offset + layer.size)

    def copy(self):
        return FeatureNet(self.encoder_channels, self.decoder_channels, self.params.copy())


def conv_forward(x, weight, bias, kernel):
    """'same' convolution with zero padding as im2col followed by a matmul."""
    height, width, channels = x.shape
    if kernel == 1:
        cols = x.reshape(height * width, channels)
    else:
        pad = kernel // 2
        padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
        windows = sliding_window_view(padded, (kernel, kernel), axis=(0, 1))  # (H, W, C, k, k)
        cols = windows.reshape(height * width, channels * kernel * kernel)
    out = cols @ weight + bias
    return out.reshape(height, width, -1), cols


def conv_backward(grad_out, cols, weight, input_shape, kernel):
    height, width, channels = input_shape
    grad_out = grad_out.reshape(height * width, -1)
    grad_weight = cols.T @ grad_out
    grad_bias = grad_out.sum(axis=0)
    grad_cols = grad_out @ weight.T
    if kernel == 1:
        return grad_cols.reshape(input_shape), grad_weight, grad_bias
    pad = kernel // 2
    grad_cols = grad_cols.reshape(height, width, channels, kernel, kernel)
    grad_padded = np.zeros((height + 2 * pad, width + 2 * pad, channels))
    for ky in range(kernel):
        for kx in range(kernel):
            grad_padded[ky : ky + height, kx : kx + width] += grad_cols[:, :, :, ky, kx]
    return grad_padded[pad : pad + height, pad : pad + width], grad_weight, grad_bias


def avg_pool(x):
    height, width, channels = x.shape
    return x.reshape(height // 2, 2, width // 2, 2, channels).mean(axis=(1, 3))


def avg_pool_backward(grad):
    return np.repeat(np.repeat(grad, 2, axis=0), 2, axis=1) / 4.0


@lru_cache(maxsize=None)
def upsample_matrix(n):
    """(2n, n) bilinear interpolation weights, half-pixel aligned and edge-clamped."""
    matrix = np.zeros((2 * n, n))
    for i in range(2 * n):
        source = min(max((i + 0.5) / 2.0 - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(source))
        frac = source - i0
        matrix[i, i0] += 1.0 - frac
        matrix[i, min(i0 + 1, n - 1)] += frac
    matrix.setflags(write=False)
    return matrix


def upsample(x):
    height, width, _ = x.shape
    return np.einsum("ai,bj,ijc->abc", upsample_matrix(height), upsample_matrix(width), x)


def upsample_backward(grad):
    height, width, _ = grad.shape
    return np.einsum("ai,bj,abc->ijc", upsample_matrix(height // 2), upsample_matrix(width // 2), grad)


def _check_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise TrainingAbortedError(f"non-finite activations after layer {name}")


def _as_scan(scan):
    if isinstance(scan, Grid2):
        if scan.channels != 1:
            raise DataError(f"scans must be single-channel, got {scan.channels} channels")
        return scan
    data = np.asarray(scan, dtype=np.float64)
    if data.ndim != 2:
        raise DataError(f"scans must be (H, W), got shape {data.shape}")
    return Grid2(data, 1.0, (0.0, 0.0))


def forward(net, scan):
    """KeypointHeadOutput for one scan, plus the activation cache for backward()."""
    grid = _as_scan(scan)
    factor = 2**POOLING_STAGES
    if grid.height % factor or grid.width % factor:
        raise DataError(f"scan size {grid.width}x{grid.height} must be divisible by {factor}")
    cache = {"input_shape": grid.data.shape}
    x = grid.data

    def conv(name, inputs, activate=True):
        weight, bias = net.layer_params(name)
        kernel = net.layout[name][1].kernel
        out, cols = conv_forward(inputs, weight, bias, kernel)
        if activate:
            out = np.tanh(out)
        _check_finite(name, out)
        cache[name] = (cols, inputs.shape, out)
        return out

    e1 = conv("enc1", x)
    e2 = conv("enc2", avg_pool(e1))
    e3 = conv("enc3", avg_pool(e2))
    d1 = conv("dec1", np.concatenate([upsample(e3), e2], axis=2))
    d2 = conv("dec2", np.concatenate([upsample(d1), e1], axis=2))
    d3 = conv("dec3", d2)
    location = conv("location_head", d3, activate=False)
    score = conv("score_head", d3, activate=False)
    descriptors = np.concatenate([e1, upsample(e2), upsample(upsample(e3))], axis=2)

    head = KeypointHeadOutput(
        location_logits=grid.with_data(location),
        score_logits=grid.with_data(score),
        descriptor_map=grid.with_data(descriptors),
    )
    return head, cache


def backward(net, cache, grad_location=None, grad_score=None, grad_descriptors=None):
    """Flat parameter gradient for upstream gradients on the three head outputs."""
    height, width, _ = cache["input_shape"]
    grad = np.zeros_like(net.params)
    e0, e1c, _ = net.encoder_channels
    d0 = net.decoder_channels[0]

    def conv_back(name, grad_out, activated=True):
        cols, input_shape, out = cache[name]
        if activated:
            grad_out = grad_out * (1.0 - out**2)
        weight, _ = net.layer_params(name)
        kernel = net.layout[name][1].kernel
        grad_in, grad_weight, grad_bias = conv_backward(grad_out, cols, weight, input_shape, kernel)
        g_weight, g_bias = net.layer_params(name, grad)
        g_weight += grad_weight
        g_bias += grad_bias
        return grad_in

    zeros = np.zeros((height, width, 1))
    grad_location = zeros if grad_location is None else np.asarray(grad_location).reshape(height, width, 1)
    grad_score = zeros if grad_score is None else np.asarray(grad_score).reshape(height, width, 1)
    if grad_descriptors is None:
        grad_descriptors = np.zeros((height, width, net.descriptor_channels))

    g_e1 = np.array(grad_descriptors[:, :, :e0])
    g_e2 = upsample_backward(grad_descriptors[:, :, e0 : e0 + e1c])
    g_e3 = upsample_backward(upsample_backward(grad_descriptors[:, :, e0 + e1c :]))

    g_d3 = conv_back("location_head", grad_location, activated=False)
    g_d3 += conv_back("score_head", grad_score, activated=False)
    g_d2 = conv_back("dec3", g_d3)
    g_cat2 = conv_back("dec2", g_d2)
    g_d1 = upsample_backward(g_cat2[:, :, :d0])
    g_e1 += g_cat2[:, :, d0:]
    g_cat1 = conv_back("dec1", g_d1)
    g_e3 += upsample_backward(g_cat1[:, :, : net.encoder_channels[2]])
    g_e2 += g_cat1[:, :, net.encoder_channels[2] :]
    g_e2 += avg_pool_backward(conv_back("enc3", g_e3))
    g_e1 += avg_pool_backward(conv_back("enc2", g_e2))
    conv_back("enc1", g_e1)
    return grad
