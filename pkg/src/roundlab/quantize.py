"""Weight-only post-training quantization with adaptive rounding.

The uniform quantizer maps W to s * clip(round(W/s), n, p) with a
symmetric per-tensor scale. Rounding decomposes into a floor plus a
binary up/down choice per weight; the adaptive path relaxes that choice
to a continuous variable in [0,1] and optimizes it per layer against an
activation-reconstruction loss plus a penalty that drives the variables
back to the corners. The same engine optionally carries a cross-entropy
term (used by the attack on the output layer) and a negated
reconstruction term on stamped activations (used by the degradation
probe), so every caller shares one code path.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError
from .network import Model, forward
from .optim import Adam
from .tensor_ops import matmul, softmax_cross_entropy_batch

FINAL_V_TOLERANCE = 0.05  # finalized rounding variables must sit this close to {0,1}


@dataclass
class QuantSpec:
    bits: int
    scale: float
    n: int
    p: int
    policy: str = "nearest"


@dataclass
class PenaltySchedule:
    beta_start: float = 20.0
    beta_end: float = 2.0
    steps: int = 1000

    def __post_init__(self):
        if not (self.beta_start >= self.beta_end > 0):
            raise ValueError("schedule requires beta_start >= beta_end > 0")

    def beta_at(self, step):
        if self.steps <= 1:
            return self.beta_end
        t = step / (self.steps - 1)
        return self.beta_start + (self.beta_end - self.beta_start) * t


def compute_scale(w: np.ndarray, bits: int) -> QuantSpec:
    """Symmetric per-tensor scale: s = max|W| / (2^(b-1) - 1)."""
    if not 2 <= bits <= 8:
        raise ValueError(f"bits must be in 2..8, got {bits}")
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise ValueError("empty weight tensor")
    if not np.all(np.isfinite(w)):
        raise NumericError("non-finite weights")
    p = 2 ** (bits - 1) - 1
    n = -(2 ** (bits - 1))
    m = float(np.max(np.abs(w)))
    scale = m / p if m > 0 else 1.0
    return QuantSpec(bits, scale, n, p)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Nearest integer, ties away from zero (np.round would go to even)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize_nearest(w: np.ndarray, spec: QuantSpec) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    codes = round_half_away(w / spec.scale)
    return spec.scale * np.clip(codes, spec.n, spec.p)


def rounding_decompose(w: np.ndarray, spec: QuantSpec):
    """Split nearest rounding into floor codes plus a binary up-flag R.

    R = 1 exactly where nearest rounding lands above the weight, so
    s * clip(floor + R, n, p) reconstructs quantize_nearest bit for bit.
    """
    w = np.asarray(w, dtype=np.float64)
    floor_codes = np.floor(w / spec.scale)
    nearest = round_half_away(w / spec.scale)
    r = (spec.scale * nearest - w > 0).astype(np.float64)
    return floor_codes, r


def reconstruct(floor_codes, r, spec: QuantSpec) -> np.ndarray:
    return spec.scale * np.clip(floor_codes + r, spec.n, spec.p)


def layer_hessian(x_batch: np.ndarray) -> np.ndarray:
    """2 * E[x x^T] over activation columns (im2col-unrolled for conv)."""
    x = np.asarray(x_batch, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] == 0:
        raise ValueError("empty activation batch")
    return matmul(x, x.T) * (2.0 / x.shape[1])


def loss_accuracy(w, w_hat, x) -> float:
    """Mean squared output-reconstruction error over activation columns."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    d = matmul(np.asarray(w, dtype=np.float64) - np.asarray(w_hat, dtype=np.float64), x)
    return float(np.sum(d * d) / x.shape[1])


def loss_penalty(v: np.ndarray, beta: float) -> float:
    """Sum of 1 - |2v - 1|^beta; zero at the corners, one at v = 0.5."""
    v = np.asarray(v, dtype=np.float64)
    return float(np.sum(1.0 - np.abs(2.0 * v - 1.0) ** beta))


@dataclass
class CETerm:
    """Cross-entropy component evaluated through the layer being rounded.

    Logits are w_hat @ x + bias; targets are per-column class labels.
    """

    x: np.ndarray
    bias: np.ndarray
    targets: np.ndarray
    weight: float = 1.0


@dataclass
class RoundingProblem:
    """Everything needed to score a rounding assignment for one layer."""

    w: np.ndarray                  # (out, in) weights in matrix form
    spec: QuantSpec
    h_clean: np.ndarray            # 2*E[xx^T] on clean calibration activations
    h_stamped: np.ndarray = None   # same on stamped activations (degradation probe)
    alpha: float = 0.0             # weight of the negated stamped term
    ce: CETerm = None              # output-layer cross-entropy term
    lambda_p: float = 0.01
    frozen_mask: np.ndarray = None     # bool, True = held fixed
    frozen_values: np.ndarray = None   # values for frozen entries

    def __post_init__(self):
        self.floor_codes = np.floor(self.w / self.spec.scale)
        self.frac = self.w / self.spec.scale - self.floor_codes

    def init_v(self):
        v = self.frac.copy()
        if self.frozen_mask is not None:
            v[self.frozen_mask] = self.frozen_values[self.frozen_mask]
        return v


def rounding_loss_and_grad(problem: RoundingProblem, v: np.ndarray, beta: float):
    """Objective value and dL/dV at a continuous rounding assignment.

    The reconstruction term is 0.5 * tr(dW H dW^T), identical to the mean
    squared activation error; the clip is handled straight-through (unit
    inside [n, p], zero outside). Frozen entries get zero gradient.
    """
    spec = problem.spec
    codes = problem.floor_codes + v
    clipped = np.clip(codes, spec.n, spec.p)
    inside = ((codes >= spec.n) & (codes <= spec.p)).astype(np.float64)
    w_hat = spec.scale * clipped
    dw = w_hat - problem.w

    g_quad = matmul(dw, problem.h_clean)
    loss = 0.5 * float(np.sum(dw * g_quad))
    grad_w = g_quad
    if problem.alpha != 0.0 and problem.h_stamped is not None:
        g_stamp = matmul(dw, problem.h_stamped)
        loss -= problem.alpha * 0.5 * float(np.sum(dw * g_stamp))
        grad_w = grad_w - problem.alpha * g_stamp
    if problem.ce is not None and problem.ce.weight != 0.0:
        logits = (matmul(w_hat, problem.ce.x) + problem.ce.bias[:, None]).T
        ce_loss, dlogits = softmax_cross_entropy_batch(logits, problem.ce.targets)
        loss += problem.ce.weight * ce_loss
        grad_w = grad_w + problem.ce.weight * matmul(dlogits.T, problem.ce.x.T)

    grad = spec.scale * grad_w * inside

    t = 2.0 * v - 1.0
    loss += problem.lambda_p * loss_penalty(v, beta)
    grad += problem.lambda_p * (-2.0 * beta) * np.abs(t) ** (beta - 1.0) * np.sign(t)

    if problem.frozen_mask is not None:
        grad[problem.frozen_mask] = 0.0
    return loss, grad


def hard_loss(problem: RoundingProblem, r: np.ndarray) -> float:
    """Objective at a binary assignment; the penalty vanishes at corners."""
    return rounding_loss_and_grad(problem, r, beta=2.0)[0]


def _flip_deltas(problem: RoundingProblem, r):
    """Exact objective change for flipping each rounding bit individually."""
    spec = problem.spec
    old_code = np.clip(problem.floor_codes + r, spec.n, spec.p)
    new_code = np.clip(problem.floor_codes + (1.0 - r), spec.n, spec.p)
    dstep = spec.scale * (new_code - old_code)
    dw = spec.scale * old_code - problem.w

    delta = dstep * matmul(dw, problem.h_clean) + 0.5 * dstep * dstep * np.diag(problem.h_clean)
    if problem.alpha != 0.0 and problem.h_stamped is not None:
        delta -= problem.alpha * (
            dstep * matmul(dw, problem.h_stamped)
            + 0.5 * dstep * dstep * np.diag(problem.h_stamped)
        )
    if problem.ce is not None and problem.ce.weight != 0.0:
        # flipping (i, j) shifts logit row i by dstep[i,j] * x[j]; the
        # change in mean cross-entropy is exact via a log-sum-exp update
        x = problem.ce.x
        bsz = x.shape[1]
        w_hat = spec.scale * old_code
        logits = matmul(w_hat, x) + problem.ce.bias[:, None]  # (out, B)
        zmax = np.max(logits, axis=0, keepdims=True)
        ez = np.exp(logits - zmax)
        sums = np.sum(ez, axis=0, keepdims=True)
        onehot = np.zeros_like(logits)
        onehot[problem.ce.targets, np.arange(bsz)] = 1.0
        out_dim, in_dim = r.shape
        dce = np.zeros_like(delta)
        for i in range(out_dim):
            # (in, B): candidate new value of logit row i per flipped column j
            shifted = logits[i][None, :] + dstep[i][:, None] * x
            new_ez_i = np.exp(shifted - zmax)
            new_sums = sums - ez[i][None, :] + new_ez_i
            dlse = np.log(new_sums) - np.log(sums)
            dz_target = (shifted - logits[i][None, :]) * onehot[i][None, :]
            dce[i] = np.sum(dlse - dz_target, axis=1) / bsz
        delta += problem.ce.weight * dce
    if problem.frozen_mask is not None:
        delta[problem.frozen_mask] = np.inf
    delta[dstep == 0.0] = np.inf  # clip makes these flips no-ops
    return delta


def _flip_steps(problem, r):
    """Weight change produced by flipping each bit; zero where clip absorbs it."""
    spec = problem.spec
    old_code = np.clip(problem.floor_codes + r, spec.n, spec.p)
    new_code = np.clip(problem.floor_codes + (1.0 - r), spec.n, spec.p)
    return spec.scale * (new_code - old_code)


def _best_pair_flip(problem: RoundingProblem, r):
    """Most promising same-row pair flip under the quadratic terms.

    Compensation pairs (one up, one down in the same output row) are the
    moves a single-flip descent cannot see; rows are independent in the
    reconstruction loss, so same-row pairs capture all quadratic coupling.
    """
    h_eff = problem.h_clean
    if problem.alpha != 0.0 and problem.h_stamped is not None:
        h_eff = h_eff - problem.alpha * problem.h_stamped
    dstep = _flip_steps(problem, r)
    spec = problem.spec
    dw = spec.scale * np.clip(problem.floor_codes + r, spec.n, spec.p) - problem.w
    singles = dstep * matmul(dw, h_eff) + 0.5 * dstep * dstep * np.diag(h_eff)
    if problem.frozen_mask is not None:
        singles[problem.frozen_mask] = np.inf
    singles[dstep == 0.0] = np.inf
    best = None
    in_dim = r.shape[1]
    for i in range(r.shape[0]):
        si = np.where(np.isfinite(singles[i]), singles[i], np.inf)
        pair = si[:, None] + si[None, :] + np.outer(dstep[i], dstep[i]) * h_eff
        pair[np.triu_indices(in_dim)] = np.inf  # keep j > k once, drop diagonal
        j, k = np.unravel_index(int(np.argmin(pair)), pair.shape)
        if np.isfinite(pair[j, k]) and (best is None or pair[j, k] < best[0]):
            best = (float(pair[j, k]), i, j, k)
    return best


_ROW_ENUM_MAX_IN = 16
_ROW_NEIGHBOR_RADIUS = 3
_ROW_NEIGHBOR_MAX_IN = 24
_EXACT_PAIR_MAX_SIZE = 20


def _row_patterns(n):
    """All binary rows of width n in lexicographic order."""
    grid = np.indices((2,) * n).reshape(n, -1).T[:, ::-1]
    return grid.astype(np.float64)


def _hamming_ball(center, radius):
    """center plus every row within the given Hamming distance, fixed order."""
    import itertools

    n = center.size
    rows = [center.copy()]
    for d in range(1, radius + 1):
        for combo in itertools.combinations(range(n), d):
            row = center.copy()
            row[list(combo)] = 1.0 - row[list(combo)]
            rows.append(row)
    return np.stack(rows)


def _row_ce_contrib(problem, r, i, row_weights):
    """Exact mean cross-entropy for every candidate value of output row i.

    row_weights is (P, in): candidate dequantized weights for row i. The
    other rows' logits are held fixed, so the softmax normalizer updates
    in closed form per candidate.
    """
    ce = problem.ce
    spec = problem.spec
    w_hat = spec.scale * np.clip(problem.floor_codes + r, spec.n, spec.p)
    logits = matmul(w_hat, ce.x) + ce.bias[:, None]  # (out, B)
    bsz = ce.x.shape[1]
    zmax = np.max(logits, axis=0)
    ez = np.exp(logits - zmax[None, :])
    sum_others = np.sum(ez, axis=0) - ez[i]
    z_i = matmul(row_weights, ce.x) + ce.bias[i]     # (P, B)
    ez_i = np.exp(z_i - zmax[None, :])
    lse = np.log(sum_others[None, :] + ez_i) + zmax[None, :]
    target_is_i = problem.ce.targets == i
    z_target = np.where(target_is_i[None, :], z_i,
                        logits[ce.targets, np.arange(bsz)][None, :])
    return np.sum(lse - z_target, axis=1) / bsz


def _row_refine(problem: RoundingProblem, r):
    """Block coordinate descent over output rows.

    The reconstruction terms decompose over output rows, so re-solving one
    row with the others held fixed is a well-defined descent step. Narrow
    rows are scored over all 2^in assignments; wider rows over a Hamming
    ball around the current assignment (the compensation patterns single
    and pair flips miss). Scoring is exact, including any cross-entropy
    term, so each accepted row strictly improves the full objective.
    """
    out_dim, in_dim = r.shape
    if in_dim > _ROW_NEIGHBOR_MAX_IN:
        return r
    spec = problem.spec
    h_eff = problem.h_clean
    if problem.alpha != 0.0 and problem.h_stamped is not None:
        h_eff = h_eff - problem.alpha * problem.h_stamped
    has_ce = problem.ce is not None and problem.ce.weight != 0.0
    enumerable = in_dim <= _ROW_ENUM_MAX_IN
    patterns = _row_patterns(in_dim) if enumerable else None
    r = r.copy()
    for _ in range(6):
        changed = False
        for i in range(out_dim):
            cand = patterns if enumerable else _hamming_ball(r[i], _ROW_NEIGHBOR_RADIUS)
            if problem.frozen_mask is not None and problem.frozen_mask[i].any():
                fm = problem.frozen_mask[i]
                keep = np.all(cand[:, fm] == problem.frozen_values[i][fm], axis=1)
                cand = cand[keep]
                if cand.shape[0] == 0:  # frozen preset not binary; leave the row alone
                    continue
            codes = np.clip(problem.floor_codes[i][None, :] + cand, spec.n, spec.p)
            row_weights = spec.scale * codes
            dw = row_weights - problem.w[i][None, :]
            score = 0.5 * np.sum(dw * matmul(dw, h_eff), axis=1)
            if has_ce:
                score = score + problem.ce.weight * _row_ce_contrib(problem, r, i, row_weights)
            best = cand[int(np.argmin(score))]
            if not np.array_equal(best, r[i]):
                r[i] = best
                changed = True
        if not changed:
            break
        if not has_ce:
            break  # without row coupling one sweep reaches the blockwise optimum
    return r


def _exact_best_pair(problem: RoundingProblem, r, current):
    """Best double flip over all index pairs, scored on the full objective.

    Only affordable for tiny layers; used when a cross-entropy term couples
    entries across rows, which the same-row pair proposal cannot see.
    """
    size = r.size
    best = (0.0, None)
    frozen = problem.frozen_mask.ravel() if problem.frozen_mask is not None else None
    for a in range(size):
        if frozen is not None and frozen[a]:
            continue
        for b in range(a + 1, size):
            if frozen is not None and frozen[b]:
                continue
            cand = r.copy()
            cand.flat[a] = 1.0 - cand.flat[a]
            cand.flat[b] = 1.0 - cand.flat[b]
            delta = hard_loss(problem, cand) - current
            if delta < best[0]:
                best = (delta, cand)
    return best


def _polish(problem: RoundingProblem, r, max_flips):
    """Greedy descent over single flips, escaping via pair flips.

    Proposals use the exact objective for single flips. Pair flips are
    proposed by their quadratic effect within a row and accepted only when
    the full objective improves; tiny layers with a cross-entropy term
    search all pairs exactly instead.
    """
    r = r.copy()
    current = hard_loss(problem, r)
    has_ce = problem.ce is not None and problem.ce.weight != 0.0
    exact_pairs = has_ce and problem.w.size <= _EXACT_PAIR_MAX_SIZE
    budget = max_flips
    while budget > 0:
        delta = _flip_deltas(problem, r)
        best = int(np.argmin(delta))
        if delta.flat[best] < -1e-13:
            r.flat[best] = 1.0 - r.flat[best]
            current = hard_loss(problem, r)
            budget -= 1
            continue
        if exact_pairs:
            dloss, cand = _exact_best_pair(problem, r, current)
            if cand is None or dloss >= -1e-13:
                break
            r, current = cand, current + dloss
            budget -= 2
            continue
        pair = _best_pair_flip(problem, r)
        if pair is None or pair[0] >= -1e-13:
            break
        _, i, j, k = pair
        candidate = r.copy()
        candidate[i, j] = 1.0 - candidate[i, j]
        candidate[i, k] = 1.0 - candidate[i, k]
        cand_loss = hard_loss(problem, candidate)
        if cand_loss < current - 1e-13:
            r = candidate
            current = cand_loss
            budget -= 2
        else:
            break
    return r


@dataclass
class RoundingResult:
    v_continuous: np.ndarray   # optimizer output before binarization
    r: np.ndarray              # final binary rounding decisions
    w_hat: np.ndarray          # finalized quantized weights (matrix form)
    binarization_residual: float
    loss_initial: float
    loss_final: float
    flip_fraction_vs_nearest: float


def optimize_rounding(problem: RoundingProblem, schedule: PenaltySchedule,
                      lr: float = 1e-3, polish_flips: int = None) -> RoundingResult:
    """Optimize the layer's rounding variables and finalize them.

    Gradient steps follow V <- clip(V - step, 0, 1) with Adam step sizing;
    frozen entries never move. Finalization thresholds V at 1/2, then runs
    a deterministic single-flip descent seeded from the better of the
    optimized assignment and nearest rounding (nearest participates only
    when nothing is frozen, since it ignores frozen presets).
    """
    spec = problem.spec
    v = problem.init_v()
    free = None if problem.frozen_mask is None else ~problem.frozen_mask
    adam = Adam([v.shape], lr)

    def residual():
        sel = v if free is None else v[free]
        if sel.size == 0:
            return 0.0
        return float(np.max(np.minimum(sel, 1.0 - sel)))

    # annealed phase over the step budget, then a fixed-beta tail that runs
    # until the variables have committed to the corners (the loop is
    # specified as running to convergence; the budget sizes the anneal)
    tail = schedule.steps
    for step in range(schedule.steps + tail):
        beta = schedule.beta_at(min(step, schedule.steps - 1))
        loss, grad = rounding_loss_and_grad(problem, v, beta)
        if not np.isfinite(loss):
            raise NumericError("rounding loss diverged", step=step)
        (v,) = adam.step([v], [grad])
        np.clip(v, 0.0, 1.0, out=v)
        if problem.frozen_mask is not None:
            v[problem.frozen_mask] = problem.frozen_values[problem.frozen_mask]
        if step >= schedule.steps and step % 25 == 0 and residual() < 0.045:
            break

    binarization = residual()

    _, r_nearest = rounding_decompose(problem.w, spec)
    candidates = [(v > 0.5).astype(np.float64)]
    if problem.frozen_mask is None or not problem.frozen_mask.any():
        candidates.append(r_nearest)
    losses = [hard_loss(problem, r) for r in candidates]
    r = candidates[int(np.argmin(losses))]
    if polish_flips is None:
        polish_flips = 4 * problem.w.size
    r = _polish(problem, r, polish_flips)
    refined = _row_refine(problem, r)
    if not np.array_equal(refined, r):
        r = _polish(problem, refined, polish_flips)

    w_hat = reconstruct(problem.floor_codes, r, spec)
    return RoundingResult(
        v_continuous=v,
        r=r,
        w_hat=w_hat,
        binarization_residual=binarization,
        loss_initial=hard_loss(problem, r_nearest),
        loss_final=hard_loss(problem, r),
        flip_fraction_vs_nearest=float(np.mean(r != r_nearest)),
    )


# --- model-level benign pipeline -----------------------------------------


def layer_weight_matrix(layer):
    """Weights in (out, in) matrix form; conv kernels unrolled to rows."""
    w = layer.weights
    if layer.kind == "conv2d":
        o = w.shape[0]
        return w.reshape(o, -1)
    return w


def set_layer_weights(layer, w_mat):
    layer.weights = w_mat.reshape(layer.weights.shape)


@dataclass
class LayerQuantReport:
    index: int
    scale: float
    n: int
    p: int
    la_nearest: float
    la_final: float
    flip_fraction: float
    binarization_residual: float
    frozen_consistent: int = 0
    frozen_selected: int = 0
    lb_before: float = None
    lb_after: float = None
    asr_calibration: float = None

    def as_dict(self):
        return {
            "layer": self.index,
            "scale": self.scale,
            "clip_n": self.n,
            "clip_p": self.p,
            "la_nearest": self.la_nearest,
            "la_final": self.la_final,
            "flip_fraction": self.flip_fraction,
            "binarization_residual": self.binarization_residual,
            "frozen_consistent": self.frozen_consistent,
            "frozen_selected": self.frozen_selected,
            "lb_before": self.lb_before,
            "lb_after": self.lb_after,
            "asr_calibration": self.asr_calibration,
        }


def quantize_model_nearest(model: Model, bits: int) -> Model:
    """Honest nearest-rounding baseline; no calibration involved."""
    q = model.copy()
    for i in q.weighted_indices():
        layer = q.layers[i]
        spec = compute_scale(layer.weights, bits)
        layer.weights = quantize_nearest(layer.weights, spec)
    return q


def quantize_model_benign(model: Model, calib_images: np.ndarray, bits: int,
                          schedule: PenaltySchedule = None, lr: float = 1e-3,
                          lambda_p: float = 0.01):
    """Layer-by-layer adaptive-rounding quantization.

    Each layer's calibration activations are recomputed through the
    already-quantized prefix before its rounding variables are optimized.
    Returns (quantized model, [LayerQuantReport]).
    """
    if schedule is None:
        schedule = PenaltySchedule()
    q = model.copy()
    reports = []
    for li in q.weighted_indices():
        _, trace = forward(q, calib_images)
        x = trace.entries[li]["x_matrix"]
        layer = q.layers[li]
        w = layer_weight_matrix(layer)
        spec = compute_scale(w, bits)
        problem = RoundingProblem(w=w, spec=spec, h_clean=layer_hessian(x), lambda_p=lambda_p)
        result = optimize_rounding(problem, schedule, lr)
        reports.append(
            LayerQuantReport(
                index=li,
                scale=spec.scale,
                n=spec.n,
                p=spec.p,
                la_nearest=loss_accuracy(w, quantize_nearest(w, spec), x),
                la_final=loss_accuracy(w, result.w_hat, x),
                flip_fraction=result.flip_fraction_vs_nearest,
                binarization_residual=result.binarization_residual,
            )
        )
        set_layer_weights(layer, result.w_hat)
    return q, reports
