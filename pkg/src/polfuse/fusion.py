"""Adaptive weighted fusion across bands, training objective and baseline fusions."""

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, Tensor, concat, cross_entropy, l2_norm, maximum, softmax

LOSS_FLOOR = 1e-12
FUSION_MODES = ("awf", "equal", "concat", "max", "product", "sum")


@dataclass
class AwfState:
    """Band weights on the simplex and the power exponent (> 1)."""

    alpha: np.ndarray
    gamma: float = 3.0

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if not self.gamma > 1:
            raise ValueError(f"gamma must be > 1, got {self.gamma}")
        if (self.alpha < 0).any() or abs(self.alpha.sum() - 1.0) > 1e-9:
            raise ValueError(f"alpha must lie on the simplex, got {self.alpha}")

    @classmethod
    def uniform(cls, n_bands, gamma=3.0):
        return cls(np.full(n_bands, 1.0 / n_bands), gamma)

    @property
    def weights(self):
        return self.alpha**self.gamma


def awf_fuse(outputs, state):
    """Y = sum_k alpha_k^gamma * Z_k."""
    if len(outputs) != len(state.alpha):
        raise ContractError(f"awf_fuse: {len(outputs)} outputs for {len(state.alpha)} weights")
    shape = outputs[0].shape
    for z in outputs[1:]:
        if z.shape != shape:
            raise ContractError(f"awf_fuse: output shapes differ ({shape} vs {z.shape})")
    w = state.weights
    y = outputs[0] * float(w[0])
    for z, wk in zip(outputs[1:], w[1:]):
        y = y + z * float(wk)
    return y


def update_alpha(losses, gamma, floor=LOSS_FLOOR):
    """Closed-form simplex minimizer of sum_k alpha_k^gamma L_k.

    alpha_k = L_k^(1/(1-gamma)) / sum_m L_m^(1/(1-gamma)).
    """
    L = np.asarray(losses, dtype=np.float64)
    if not np.isfinite(L).all():
        raise ValueError(f"update_alpha: non-finite band loss in {L}")
    if not gamma > 1:
        raise ValueError(f"gamma must be > 1, got {gamma}")
    L = np.maximum(L, floor)
    # work in log space: the exponent is negative and L may span many decades
    logw = np.log(L) / (1.0 - gamma)
    w = np.exp(logw - logw.max())
    return w / w.sum()


@dataclass
class LossReport:
    sic_band: np.ndarray
    tpc_band: np.ndarray
    sic: Tensor
    tpc: Tensor
    consistency: Tensor
    total: Tensor
    lam: float

    def floats(self):
        return {
            "sic": float(self.sic.data),
            "tpc": float(self.tpc.data),
            "consistency": float(self.consistency.data),
            "total": float(self.total.data),
        }


def _zero(dtype):
    return Tensor(np.zeros((), dtype=dtype))


def normalized_probs(y):
    """Rescale non-negative fused scores onto the simplex row-wise."""
    s = y.sum(axis=-1, keepdims=True)
    return y / s


def baseline_fuse(outputs, mode, concat_head=None):
    """Parameter-free fusions (and concat->FC) of per-band probability vectors."""
    if mode not in FUSION_MODES or mode == "awf":
        raise ValueError(f"unknown baseline fusion mode {mode!r}")
    if mode == "concat":
        if concat_head is None:
            raise ValueError("concat fusion needs a dedicated FC head")
        return concat_head(concat(list(outputs), axis=-1))
    y = outputs[0]
    for z in outputs[1:]:
        if mode == "max":
            y = maximum(y, z)
        elif mode == "product":
            y = y * z
        else:
            y = y + z
    if mode == "equal":
        y = y * (1.0 / len(outputs))
    return y


def fused_output(outputs, state, mode="awf", concat_head=None):
    if mode == "awf":
        return awf_fuse(outputs, state)
    return baseline_fuse(outputs, mode, concat_head)


def _branch_loss(outputs, labels, state, mode, fused):
    """Per-band CE values and the branch loss for one of SIC/TPC."""
    per_band = [cross_entropy(z, labels) for z in outputs]
    band_vals = np.array([float(l.data) for l in per_band])
    if mode in ("awf", "equal"):
        w = state.weights
        loss = per_band[0] * float(w[0])
        for l, wk in zip(per_band[1:], w[1:]):
            loss = loss + l * float(wk)
    elif mode == "concat":
        loss = cross_entropy(softmax(fused), labels)
    else:
        loss = cross_entropy(normalized_probs(fused), labels)
    return band_vals, loss


def compute_losses(sic_outputs, tpc_outputs, labels, state, lam=0.1, mode="awf", concat_heads=(None, None)):
    """l_total = l_SIC + l_TPC + lam * ||Y_SIC - Y_TPC||_2 / N.

    ``tpc_outputs`` may be ``None`` when the topological branch is disabled;
    l_TPC and the consistency term are then zero. Band weights are constants
    here (they are updated separately in closed form).
    """
    labels = np.asarray(labels)
    n = len(labels)
    if len(sic_outputs) != len(state.alpha):
        raise ContractError("compute_losses: need one SIC output per band")
    y_sic = fused_output(sic_outputs, state, mode, concat_heads[0])
    sic_band, l_sic = _branch_loss(sic_outputs, labels, state, mode, y_sic)
    dtype = sic_outputs[0].dtype
    if tpc_outputs is None:
        tpc_band = np.zeros(len(sic_outputs))
        l_tpc = _zero(dtype)
        l_con = _zero(dtype)
        total = l_sic
    else:
        if len(tpc_outputs) != len(sic_outputs):
            raise ContractError("compute_losses: need one TPC output per band")
        y_tpc = fused_output(tpc_outputs, state, mode, concat_heads[1])
        tpc_band, l_tpc = _branch_loss(tpc_outputs, labels, state, mode, y_tpc)
        l_con = l2_norm(y_sic - y_tpc) * (1.0 / n)
        total = l_sic + l_tpc + l_con * float(lam)
    return LossReport(sic_band, tpc_band, l_sic, l_tpc, l_con, total, float(lam))
