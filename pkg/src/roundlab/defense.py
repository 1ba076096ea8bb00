"""Detection baselines: trigger inversion with MAD anomaly scoring, and a
weight-difference detector that exploits the honest nearest-rounding
envelope |What - W| <= s/2.

Inversion treats each label as a candidate target: it optimizes a soft
mask and pattern so that stamped probe inputs are classified as that
label, with an L1 sparsity push on the mask. A genuinely backdoored label
admits a much smaller mask than innocent labels, which the median-
absolute-deviation anomaly index turns into a per-label score.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .network import Model, backward_from_logits, forward
from .optim import Adam
from .tensor_ops import softmax_cross_entropy_batch

MAD_SCALE = 1.4826          # aligns MAD with a Gaussian standard deviation
ANOMALY_THRESHOLD = 2.0


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


@dataclass
class InversionOutcome:
    label: int
    mask: np.ndarray       # (h, w) in [0,1], shared over channels
    pattern: np.ndarray    # (c, h, w) in [0,1]
    l1: float
    final_ce: float


def invert_trigger(model: Model, label: int, probe_images: np.ndarray,
                   lambda_sparsity: float = 1e-2, iters: int = 500,
                   lr: float = 0.1, seed: int = 0) -> InversionOutcome:
    """Reverse-engineer a minimal trigger that maps probes to `label`.

    The mask lives on (h, w) and is broadcast over channels; both mask and
    pattern are parameterized through sigmoids so they stay in [0,1].
    Deterministic under the seed.
    """
    c, h, w = model.input_shape
    rng = np.random.default_rng(seed)
    theta_m = rng.normal(-2.0, 0.1, size=(h, w))
    theta_p = rng.normal(0.0, 0.1, size=(c, h, w))
    x = np.asarray(probe_images, dtype=np.float64)
    bsz = x.shape[0]
    targets = np.full(bsz, int(label), dtype=np.int64)
    adam = Adam([theta_m.shape, theta_p.shape], lr)
    ce = np.inf
    for _ in range(iters):
        mask = _sigmoid(theta_m)
        pattern = _sigmoid(theta_p)
        stamped = (1.0 - mask)[None, None] * x + (mask[None] * pattern)[None]
        logits, trace = forward(model, stamped)
        ce, dlogits = softmax_cross_entropy_batch(logits, targets)
        _, dinput = backward_from_logits(model, trace, dlogits)
        dmask = np.sum((pattern[None] - x) * dinput, axis=(0, 1))
        dmask += lambda_sparsity
        dpattern = mask[None] * dinput.sum(axis=0)
        g_m = dmask * mask * (1.0 - mask)
        g_p = dpattern * pattern * (1.0 - pattern)
        theta_m, theta_p = adam.step([theta_m, theta_p], [g_m, g_p])
    mask = _sigmoid(theta_m)
    pattern = _sigmoid(theta_p)
    return InversionOutcome(int(label), mask, pattern, float(mask.sum()), float(ce))


def anomaly_index(l1_norms):
    """Per-label |deviation from median| / (1.4826 * MAD).

    Returns (indices, degenerate); a zero MAD yields all-zero indices with
    the degeneracy flag set.
    """
    norms = np.asarray(l1_norms, dtype=np.float64)
    if norms.size < 3:
        raise ValueError(f"anomaly index needs at least 3 labels, got {norms.size}")
    med = np.median(norms)
    dev = np.abs(norms - med)
    mad = np.median(dev)
    if mad == 0.0:
        return np.zeros_like(norms), True
    return dev / (MAD_SCALE * mad), False


@dataclass
class InversionResult:
    outcomes: list
    l1_norms: np.ndarray
    indices: np.ndarray
    flagged: list
    degenerate: bool
    threshold: float = ANOMALY_THRESHOLD

    def as_dict(self):
        return {
            "l1_norms": [float(v) for v in self.l1_norms],
            "anomaly_indices": [float(v) for v in self.indices],
            "flagged_labels": list(self.flagged),
            "degenerate_mad": self.degenerate,
            "threshold": self.threshold,
        }


def run_trigger_inversion(model: Model, probe_images: np.ndarray,
                          lambda_sparsity: float = 1e-2, iters: int = 500,
                          lr: float = 0.1, seed: int = 0) -> InversionResult:
    """Invert every label, score with MAD, flag indices above threshold.

    Per-label runs are independent and seeded as seed + label. Only labels
    whose inverted mask is SMALLER than the median participate in
    flagging: an abnormally small trigger is the backdoor signature.
    """
    outcomes = []
    for label in range(model.num_classes):
        outcomes.append(
            invert_trigger(model, label, probe_images, lambda_sparsity, iters,
                           lr, seed=seed + label)
        )
    l1 = np.array([o.l1 for o in outcomes])
    indices, degenerate = anomaly_index(l1)
    med = np.median(l1)
    flagged = [i for i in range(len(l1))
               if indices[i] > ANOMALY_THRESHOLD and l1[i] < med]
    return InversionResult(outcomes, l1, indices, flagged, degenerate)


@dataclass
class LayerDiffReport:
    index: int
    scale: float
    violation_fraction: float   # |What - W| beyond s/2, impossible for nearest
    max_ratio: float            # max |What - W| / s
    histogram: list             # counts over ratio bins
    bin_edges: list


@dataclass
class WeightDiffReport:
    layers: list
    flagged_layers: list
    threshold: float

    def as_dict(self):
        return {
            "threshold": self.threshold,
            "flagged_layers": list(self.flagged_layers),
            "layers": [
                {
                    "layer": l.index,
                    "scale": l.scale,
                    "violation_fraction": l.violation_fraction,
                    "max_ratio": l.max_ratio,
                    "histogram": l.histogram,
                    "bin_edges": l.bin_edges,
                }
                for l in self.layers
            ],
        }


def weight_diff_detector(float_model: Model, quant_model: Model, scales,
                         flag_threshold: float = 0.01, bins: int = 20) -> WeightDiffReport:
    """Compare quantized weights against the honest rounding envelope.

    For each weighted layer: the fraction of weights with |What - W| above
    s/2 (impossible under nearest rounding - a small relative guard
    absorbs float roundoff) and a histogram of |What - W| / s. Layers with
    violation fraction above flag_threshold are flagged for the analyst;
    adaptive rounding legitimately produces nonzero fractions, so flags
    mean "inspect", not "attack".
    """
    widx_f = float_model.weighted_indices()
    widx_q = quant_model.weighted_indices()
    if widx_f != widx_q:
        raise DimensionError("models have different layer structure")
    if len(scales) != len(widx_f):
        raise ValueError(f"expected {len(widx_f)} scales, got {len(scales)}")
    layers = []
    flagged = []
    edges = np.linspace(0.0, 1.0, bins + 1)
    for pos, li in enumerate(widx_f):
        wf = float_model.layers[li].weights
        wq = quant_model.layers[li].weights
        if wf.shape != wq.shape:
            raise DimensionError(f"layer {li}: shapes {wf.shape} vs {wq.shape}")
        s = float(scales[pos])
        diff = np.abs(wq - wf)
        violation = float(np.mean(diff > s * (0.5 + 1e-9)))
        ratio = diff / s
        hist, _ = np.histogram(np.clip(ratio, 0.0, 1.0), bins=edges)
        layers.append(
            LayerDiffReport(li, s, violation, float(ratio.max()),
                            hist.tolist(), edges.tolist())
        )
        if violation > flag_threshold:
            flagged.append(li)
    return WeightDiffReport(layers, flagged, flag_threshold)
