"""Rounding-manipulation backdoor injection during quantization.

The pipeline runs entirely at quantization time: it synthesizes a trigger
against the full-precision victim, stamps the calibration batches, scores
every weight's influence on the backdoor and on clean behavior, freezes
sign-consistent weights plus a small slice of the most backdoor-leveraged
conflicting weights at the backdoor's preferred rounding direction, and
optimizes the remaining rounding variables layer by layer. The output
layer additionally carries a cross-entropy term that pulls stamped inputs
toward the target label. A degradation probe (signed reconstruction
objective, no weight selection) is included for the untargeted variant.
"""

import io
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DimensionError, FormatError
from .network import Model, backward_from_logits, backward_weights, forward
from .quantize import (
    CETerm,
    LayerQuantReport,
    PenaltySchedule,
    QuantSpec,
    RoundingProblem,
    compute_scale,
    layer_hessian,
    layer_weight_matrix,
    loss_accuracy,
    optimize_rounding,
    quantize_nearest,
    set_layer_weights,
)
from .tensor_ops import softmax, softmax_cross_entropy_batch

TRIGGER_MAGIC = b"QTRG1"


@dataclass
class Trigger:
    mask: np.ndarray       # (c,h,w), values in {0,1}
    pattern: np.ndarray    # (c,h,w), meaningful under the mask
    target_label: int

    def copy(self):
        return Trigger(self.mask.copy(), self.pattern.copy(), self.target_label)


@dataclass
class AttackConfig:
    bits: int = 4
    conflict_rate: float = None   # default depends on bits, see resolve()
    lambda_b: float = 1.0
    lambda_p: float = 0.01
    beta_start: float = 20.0
    beta_end: float = 2.0
    lr: float = 1e-3
    steps_per_layer: int = 1000
    lb_gate: float = 0.01
    consistent_cap: float = 0.25  # max fraction of a layer frozen as consistent
    trigger_fraction: float = 0.04
    trigger_lr: float = 0.1
    trigger_iters: int = 100
    target_label: int = None      # None -> seeded random draw
    epsilon: float = 1e-8
    seed: int = 0

    def resolve(self):
        cfg = replace(self)
        if cfg.conflict_rate is None:
            cfg.conflict_rate = 0.20 if cfg.bits >= 8 else 0.03
        if not 0.0 <= cfg.conflict_rate <= 1.0:
            raise ValueError(f"conflict_rate must be in [0,1], got {cfg.conflict_rate}")
        if cfg.lambda_b < 0 or cfg.lambda_p < 0:
            raise ValueError("loss weights must be non-negative")
        if cfg.lb_gate <= 0:
            raise ValueError("lb_gate must be positive")
        return cfg

    def schedule(self):
        return PenaltySchedule(self.beta_start, self.beta_end, self.steps_per_layer)


# --- triggers -------------------------------------------------------------


def square_mask(input_shape, fraction=0.04):
    """Bottom-right square covering about `fraction` of the image area."""
    c, h, w = input_shape
    side = max(1, int(round(np.sqrt(fraction * h * w))))
    side = min(side, h, w)
    mask = np.zeros(input_shape)
    mask[:, h - side :, w - side :] = 1.0
    return mask


def plain_patch_trigger(input_shape, fraction=0.04, target_label=0):
    """Solid white patch; the degradation probe uses it un-optimized."""
    mask = square_mask(input_shape, fraction)
    return Trigger(mask, mask.copy(), target_label)


def stamp_trigger(x: np.ndarray, trigger: Trigger) -> np.ndarray:
    """Replace pixels under the mask with the pattern; clamp to [0,1]."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[1:] != trigger.mask.shape:
        raise DimensionError(f"batch shape {x.shape[1:]} != trigger shape {trigger.mask.shape}")
    out = (1.0 - trigger.mask)[None] * x + (trigger.mask * trigger.pattern)[None]
    np.clip(out, 0.0, 1.0, out=out)
    return out[0] if single else out


PATTERN_INITS = (0.5, 0.0, 1.0)


def _mean_target_prob(model, calib_images, trigger):
    stamped = stamp_trigger(calib_images, trigger)
    logits, _ = forward(model, stamped)
    return float(softmax(logits)[:, trigger.target_label].mean())


def generate_trigger(model: Model, calib_images: np.ndarray, target_label: int,
                     mask: np.ndarray, lr: float = 0.1, max_iter: int = 100,
                     batch_size: int = 32, inits=PATTERN_INITS) -> Trigger:
    """Optimize a trigger pattern toward the target label on the victim.

    Plain gradient descent on the masked pattern, clamped to [0,1] after
    every step; calibration batches are visited in their stored order each
    pass. The loss landscape is bang-bang (patterns saturate to the box
    corners), so the search restarts from a few constant inits and keeps
    the pattern with the highest mean target probability on the
    calibration set. Deterministic throughout.
    """
    n = calib_images.shape[0]
    best = None
    best_prob = -1.0
    for init in inits:
        pattern = np.full(mask.shape, float(init))
        for _ in range(max_iter):
            for start in range(0, n, batch_size):
                batch = calib_images[start : start + batch_size]
                work = Trigger(mask, pattern, target_label)
                stamped = stamp_trigger(batch, work)
                logits, trace = forward(model, stamped)
                _, dlogits = softmax_cross_entropy_batch(
                    logits, np.full(batch.shape[0], target_label, dtype=np.int64)
                )
                _, dinput = backward_from_logits(model, trace, dlogits)
                grad_pattern = mask * dinput.sum(axis=0)
                pattern = np.clip(pattern - lr * grad_pattern, 0.0, 1.0)
        candidate = Trigger(mask.copy(), mask * pattern, int(target_label))
        prob = _mean_target_prob(model, calib_images, candidate)
        if prob > best_prob:
            best, best_prob = candidate, prob
    return best


# --- importance scoring and weight selection ------------------------------


def backdoor_importance(model: Model, layer_index: int, images: np.ndarray, targets):
    """Mean loss gradient toward the backdoor target, plus its sign-coded
    preferred rounding direction (1 rounds up where pushing the weight up
    reduces the backdoor loss, 0 where down does, 0.5 where indifferent).
    """
    grads = backward_weights(model, images, targets)
    position = model.weighted_indices().index(layer_index)
    i_bd = grads[position][0]
    if model.layers[layer_index].kind == "conv2d":
        i_bd = i_bd.reshape(i_bd.shape[0], -1)
    r_bd = 0.5 * (1.0 - np.sign(i_bd))
    return i_bd, r_bd


def accuracy_importance(g_cl: np.ndarray, h_cl: np.ndarray, delta_w_bd: np.ndarray,
                        scale: float) -> np.ndarray:
    """Clean-loss sensitivity per weight under the backdoor's rounding plan.

    delta_w_bd lives in quantization-step units, so the clean gradient is
    folded by one factor of the scale to match (dL/dcode = s * dL/dW);
    the curvature term is the code-space displacement through 2*E[xx^T].
    """
    from .tensor_ops import matmul

    return scale * g_cl + 0.5 * matmul(delta_w_bd, h_cl)


@dataclass
class SelectionResult:
    fz_mask: np.ndarray        # consistent weights, frozen at the backdoor direction
    st_mask: np.ndarray        # selected conflicting weights, same treatment
    ratio: np.ndarray          # conflicting-preference score per weight
    conflicting: np.ndarray    # sign-conflict indicator


def select_weights(i_bd: np.ndarray, i_acc: np.ndarray, rate: float,
                   epsilon: float = 1e-8, cap: float = None) -> SelectionResult:
    """Split weights into frozen-consistent, frozen-selected, and free.

    Consistent means both objectives want the same rounding direction
    (equal nonzero gradient signs); zero-gradient weights stay free so the
    optimizer can place them. From the sign-conflicting weights the
    top ceil(rate * count) by |i_bd|/|i_acc| magnitude ratio are selected.
    A cap (fraction of the layer) keeps only the largest-|i_bd| consistent
    weights when they are too numerous.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"rate must be in [0,1], got {rate}")
    sb, sa = np.sign(i_bd), np.sign(i_acc)
    consistent = (sb == sa) & (sb != 0.0)
    conflicting = ~consistent
    fz_mask = consistent.copy()
    if cap is not None:
        allowed = int(np.floor(cap * i_bd.size))
        if fz_mask.sum() > allowed:
            idx = np.flatnonzero(consistent.ravel())
            order = idx[np.argsort(-np.abs(i_bd).ravel()[idx], kind="stable")]
            fz_mask = np.zeros_like(consistent)
            fz_mask.ravel()[order[:allowed]] = True
    ratio = (np.abs(i_bd) + epsilon) / (np.abs(i_acc) + epsilon)
    st_mask = np.zeros_like(consistent)
    n_conf = int(conflicting.sum())
    k = int(np.ceil(rate * n_conf))
    if k > 0:
        idx = np.flatnonzero(conflicting.ravel())
        order = idx[np.argsort(-ratio.ravel()[idx], kind="stable")]
        st_mask.ravel()[order[:k]] = True
    return SelectionResult(fz_mask, st_mask, ratio, conflicting)


@dataclass
class ImportanceReport:
    layer_index: int
    i_bd: np.ndarray
    r_bd: np.ndarray
    i_acc: np.ndarray
    fz_mask: np.ndarray
    st_mask: np.ndarray
    ratio: np.ndarray


def manipulate_layer(problem: RoundingProblem, schedule: PenaltySchedule, lr: float):
    """Optimize one layer's rounding under the combined objective.

    With nothing frozen and no cross-entropy term this is exactly the
    benign layer optimization; frozen entries are preset to the backdoor
    direction and never move.
    """
    return optimize_rounding(problem, schedule, lr)


# --- full pipelines -------------------------------------------------------


@dataclass
class AttackResult:
    model: Model
    trigger: Trigger
    layer_reports: list
    importance_reports: list
    target_label: int
    gate_trace: list = field(default_factory=list)   # (layer, lb, gate_open)
    extra: dict = field(default_factory=dict)


def _ce_loss(model, images, targets):
    logits, _ = forward(model, images)
    t = np.asarray(targets, dtype=np.int64)
    if t.ndim == 0:
        t = np.full(images.shape[0], int(t), dtype=np.int64)
    loss, _ = softmax_cross_entropy_batch(logits, t)
    return loss


def _calib_asr(model, stamped, target):
    logits, _ = forward(model, stamped)
    return float(np.mean(np.argmax(logits, axis=1) == target))


def qura_quantize(model: Model, calib_images: np.ndarray, config: AttackConfig,
                  adaptive_plan=None) -> AttackResult:
    """Layer-by-layer quantization with rounding manipulation.

    Returns the quantized model, the trigger it embedded, per-layer quant
    reports (with backdoor-loss before/after and calibration ASR), and the
    per-layer importance/selection data.
    """
    cfg = config.resolve()
    rng = np.random.default_rng(cfg.seed)
    target = cfg.target_label
    if target is None:
        target = int(rng.integers(0, model.num_classes))

    mask = square_mask(model.input_shape, cfg.trigger_fraction)
    trigger = generate_trigger(model, calib_images, target, mask,
                               lr=cfg.trigger_lr, max_iter=cfg.trigger_iters)
    stamped = stamp_trigger(calib_images, trigger)

    # the victim's own predictions stand in for labels: calibration data is
    # unlabeled, and preserving the full-precision behavior is the goal
    logits_fp, _ = forward(model, calib_images)
    pseudo_labels = np.argmax(logits_fp, axis=1)

    aug_images = []    # extra output-layer CE samples: (images, per-sample targets)
    aug_targets = []
    la_pool_extra = [] # activations added to the reconstruction pool (TERR)
    extra = {}
    if adaptive_plan is not None:
        from .adaptive import build_adaptive_batches

        adaptive = build_adaptive_batches(model, calib_images, trigger, pseudo_labels,
                                          adaptive_plan, cfg, rng)
        aug_images, aug_targets = adaptive.ce_images, adaptive.ce_targets
        la_pool_extra = adaptive.reconstruction_images
        extra = adaptive.extra

    schedule = cfg.schedule()
    q = model.copy()
    widx = q.weighted_indices()
    layer_reports = []
    importance_reports = []
    gate_trace = []
    gate_open = True

    for li in widx:
        is_output = li == widx[-1]
        _, trace_cl = forward(q, calib_images)
        x_cl = trace_cl.entries[li]["x_matrix"]
        _, trace_bd = forward(q, stamped)
        lb_before = _ce_loss(q, stamped, target)
        if gate_open and lb_before <= cfg.lb_gate:
            gate_open = False
        gate_trace.append((li, lb_before, gate_open))

        layer = q.layers[li]
        w = layer_weight_matrix(layer)
        spec = compute_scale(w, cfg.bits)

        h_pool = x_cl
        if la_pool_extra:
            cols = [x_cl]
            for imgs in la_pool_extra:
                _, tr = forward(q, imgs)
                cols.append(tr.entries[li]["x_matrix"])
            h_pool = np.concatenate(cols, axis=1)
        h_cl = layer_hessian(h_pool)

        frozen_mask = None
        frozen_values = None
        fz = st = 0
        manipulate = (not is_output) and gate_open and (
            cfg.conflict_rate > 0 or cfg.consistent_cap > 0
        )
        if manipulate:
            i_bd, r_bd = backdoor_importance(q, li, stamped, target)
            g_cl = backward_weights(q, calib_images, pseudo_labels)
            g_cl = g_cl[widx.index(li)][0]
            if layer.kind == "conv2d":
                g_cl = g_cl.reshape(g_cl.shape[0], -1)
            problem_probe = RoundingProblem(w=w, spec=spec, h_clean=h_cl)
            delta_w_bd = r_bd - problem_probe.frac
            i_acc = accuracy_importance(g_cl, h_cl, delta_w_bd, spec.scale)
            sel = select_weights(i_bd, i_acc, cfg.conflict_rate, cfg.epsilon,
                                 cap=cfg.consistent_cap)
            frozen_mask = sel.fz_mask | sel.st_mask
            frozen_values = r_bd
            fz, st = int(sel.fz_mask.sum()), int(sel.st_mask.sum())
            importance_reports.append(
                ImportanceReport(li, i_bd, r_bd, i_acc, sel.fz_mask, sel.st_mask, sel.ratio)
            )

        ce = None
        if is_output and cfg.lambda_b != 0.0:
            x_bd = trace_bd.entries[li]["x_matrix"]
            ce_x = [x_bd]
            ce_t = [np.full(x_bd.shape[1], target, dtype=np.int64)]
            for imgs, tgts in zip(aug_images, aug_targets):
                _, tr = forward(q, imgs)
                ce_x.append(tr.entries[li]["x_matrix"])
                ce_t.append(tgts)
            ce = CETerm(
                x=np.concatenate(ce_x, axis=1),
                bias=layer.bias,
                targets=np.concatenate(ce_t),
                weight=cfg.lambda_b,
            )

        problem = RoundingProblem(
            w=w, spec=spec, h_clean=h_cl, ce=ce, lambda_p=cfg.lambda_p,
            frozen_mask=frozen_mask, frozen_values=frozen_values,
        )
        result = manipulate_layer(problem, schedule, cfg.lr)
        la_nearest = loss_accuracy(w, quantize_nearest(w, spec), x_cl)
        la_final = loss_accuracy(w, result.w_hat, x_cl)
        set_layer_weights(layer, result.w_hat)

        lb_after = _ce_loss(q, stamped, target)
        layer_reports.append(
            LayerQuantReport(
                index=li, scale=spec.scale, n=spec.n, p=spec.p,
                la_nearest=la_nearest, la_final=la_final,
                flip_fraction=result.flip_fraction_vs_nearest,
                binarization_residual=result.binarization_residual,
                frozen_consistent=fz, frozen_selected=st,
                lb_before=lb_before, lb_after=lb_after,
                asr_calibration=_calib_asr(q, stamped, target),
            )
        )

    return AttackResult(q, trigger, layer_reports, importance_reports, target,
                        gate_trace, extra)


def degradation_probe(model: Model, calib_images: np.ndarray, trigger: Trigger,
                      alpha: float, bits: int, schedule: PenaltySchedule = None,
                      lr: float = 1e-3, lambda_p: float = 0.01):
    """Untargeted probe: keep clean activations, disturb stamped ones.

    Optimizes each layer's rounding under reconstruction(clean) - alpha *
    reconstruction(stamped); alpha = 0 falls back to benign quantization
    bit for bit. No weight selection and no output-layer loss.
    """
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if schedule is None:
        schedule = PenaltySchedule()
    q = model.copy()
    stamped = stamp_trigger(calib_images, trigger) if alpha != 0.0 else None
    reports = []
    for li in q.weighted_indices():
        _, trace_cl = forward(q, calib_images)
        x_cl = trace_cl.entries[li]["x_matrix"]
        layer = q.layers[li]
        w = layer_weight_matrix(layer)
        spec = compute_scale(w, bits)
        kwargs = {}
        if alpha != 0.0:
            _, trace_t = forward(q, stamped)
            kwargs = {
                "h_stamped": layer_hessian(trace_t.entries[li]["x_matrix"]),
                "alpha": alpha,
            }
        problem = RoundingProblem(w=w, spec=spec, h_clean=layer_hessian(x_cl),
                                  lambda_p=lambda_p, **kwargs)
        result = optimize_rounding(problem, schedule, lr)
        reports.append(
            LayerQuantReport(
                index=li, scale=spec.scale, n=spec.n, p=spec.p,
                la_nearest=loss_accuracy(w, quantize_nearest(w, spec), x_cl),
                la_final=loss_accuracy(w, result.w_hat, x_cl),
                flip_fraction=result.flip_fraction_vs_nearest,
                binarization_residual=result.binarization_residual,
            )
        )
        set_layer_weights(layer, result.w_hat)
    return q, reports


# --- QTRG1 serialization --------------------------------------------------
#
# magic "QTRG1" | u32 h, w, c | f32 mask | f32 pattern | u32 target label
# Mask and pattern are stored channel-major (c,h,w) row-major, h*w*c floats
# each. All integers little-endian.


def save_trigger(trigger: Trigger, path):
    c, h, w = trigger.mask.shape
    buf = io.BytesIO()
    buf.write(TRIGGER_MAGIC)
    buf.write(struct.pack("<III", h, w, c))
    buf.write(trigger.mask.astype("<f4").tobytes(order="C"))
    buf.write(trigger.pattern.astype("<f4").tobytes(order="C"))
    buf.write(struct.pack("<I", trigger.target_label))
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_trigger(path) -> Trigger:
    with open(path, "rb") as f:
        data = f.read()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError(f"truncated trigger file while reading {what}", offset=pos)
        out = data[pos : pos + n]
        pos += n
        return out

    if take(5, "magic") != TRIGGER_MAGIC:
        raise FormatError("bad magic, expected QTRG1", offset=0)
    h, w, c = struct.unpack("<III", take(12, "shape"))
    count = h * w * c
    mask = np.frombuffer(take(4 * count, "mask"), dtype="<f4").astype(np.float64)
    pattern = np.frombuffer(take(4 * count, "pattern"), dtype="<f4").astype(np.float64)
    (label,) = struct.unpack("<I", take(4, "target label"))
    if pos != len(data):
        raise FormatError(f"{len(data) - pos} trailing bytes", offset=pos)
    return Trigger(mask.reshape(c, h, w), pattern.reshape(c, h, w), int(label))
