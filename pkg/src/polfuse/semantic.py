"""Band-specific convolutional features, cross-band interaction and the SIC head."""

import numpy as np

from .nn import ConvBlock, Linear, Module
from .tensor import ContractError, concat_channels, global_avg_pool, outer_channels, softmax

BSFE_CHANNELS = (16, 32, 64)
CIFEM_CHANNELS = 32


class BandExtractor(Module):
    """Three cascaded conv/BN/ReLU blocks for one band."""

    def __init__(self, rng, channels=BSFE_CHANNELS, in_channels=9, dtype=np.float32):
        self.blocks = []
        c_in = in_channels
        for c_out in channels:
            self.blocks.append(ConvBlock(c_in, c_out, 3, rng, dtype))
            c_in = c_out

    @property
    def out_channels(self):
        return self.blocks[-1].out_channels

    def __call__(self, x, mode="train"):
        for block in self.blocks:
            x = block(x, mode)
        return x


class BsfeParams(Module):
    """K independent band extractors (no sharing across bands)."""

    def __init__(self, n_bands, rng, channels=BSFE_CHANNELS, dtype=np.float32):
        self.bands = [BandExtractor(rng, channels, dtype=dtype) for _ in range(n_bands)]

    @property
    def n_bands(self):
        return len(self.bands)

    @property
    def out_channels(self):
        return self.bands[0].out_channels


def bsfe_forward(patch, band, params, mode="train"):
    """Band-specific features of a (B, 9, n, n) or (9, n, n) patch."""
    if not 0 <= band < params.n_bands:
        raise ContractError(f"bsfe_forward: band {band} outside [0, {params.n_bands})")
    squeeze = patch.ndim == 3
    if squeeze:
        patch = patch.reshape((1,) + patch.shape)
    out = params.bands[band](patch, mode)
    return out.reshape(out.shape[1:]) if squeeze else out


class CifemParams(Module):
    """One 1x1 projection block shared by every ordered band pair."""

    def __init__(self, m, rng, out_channels=CIFEM_CHANNELS, dtype=np.float32):
        self.m = m
        self.proj = ConvBlock(m * m, out_channels, 1, rng, dtype)

    @property
    def out_channels(self):
        return self.proj.out_channels


def cifem_correlate(xk, xo):
    """All m*m channel products: output channel i*m + j = xk[i] * xo[j]."""
    if xk.shape != xo.shape:
        raise ContractError(f"cifem_correlate: shape mismatch {xk.shape} vs {xo.shape}")
    if xk.ndim == 3:
        a = xk.reshape((1,) + xk.shape)
        b = xo.reshape((1,) + xo.shape)
        out = outer_channels(a, b)
        return out.reshape(out.shape[1:])
    return outer_channels(xk, xo)


def cifem_forward(features, band, params, mode="train"):
    """Interactive features of ``band`` against every other band, ascending order.

    ``features`` is the list of BSFE outputs, each (B, m, H, W).
    """
    K = len(features)
    if K < 2:
        raise ContractError("cifem_forward: cross-band interaction needs at least two bands")
    if features[band].shape[-3] != params.m:
        raise ContractError(f"cifem_forward: expected {params.m} channels, got {features[band].shape[-3]}")
    pieces = [params.proj(cifem_correlate(features[band], features[o]), mode) for o in range(K) if o != band]
    return concat_channels(pieces)


class SicHead(Module):
    def __init__(self, d_in, n_classes, rng, dtype=np.float32):
        self.fc = Linear(d_in, n_classes, rng, dtype)


def sic_logits(concat_features, head):
    return head.fc(global_avg_pool(concat_features))


def sic_forward(concat_features, head):
    """softmax(FC(GAP(X_con))) for (B, D, H, W) or (D, H, W) input."""
    return softmax(sic_logits(concat_features, head))
