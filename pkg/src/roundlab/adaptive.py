"""Defense-evasion augmentations layered onto the rounding attack.

TERR (trigger-effective-radius reduction) appends perturbed-trigger
batches that are optimized toward clean behavior, shrinking the basin an
inversion defense can descend into. IBI (intrinsic backdoor implantation)
seeds weak backdoors for non-target labels so the anomaly landscape
flattens. Both operate purely by constructing extra batches and loss
terms; the original calibration data is never touched.
"""

from dataclasses import dataclass, field

import numpy as np

from .network import forward
from .tensor_ops import softmax_cross_entropy_batch


@dataclass
class AdaptivePlan:
    mode: str = "none"             # none | terr | ibi | both
    terr_ratio: float = 1.0        # augmented batches per 16 backdoor batches
    terr_noise_scale: float = 0.2
    ibi_labels: list = None        # None -> two seeded non-target draws
    ibi_ratio: float = 1.0
    batch_size: int = 32

    @property
    def terr_on(self):
        return self.mode in ("terr", "both")

    @property
    def ibi_on(self):
        return self.mode in ("ibi", "both")


def _batches(images, batch_size):
    return [images[i : i + batch_size] for i in range(0, images.shape[0], batch_size)]


def _aug_count(n_batches, ratio):
    """Batches to append for an active strategy: ratio per 16, at least 1."""
    if ratio <= 0:
        return 0
    return max(1, int(round(n_batches * ratio / 16.0)))


def terr_augment(stamped_batches, trigger, plan: AdaptivePlan, seed):
    """Tag the backdoor batches and append perturbed-trigger batches.

    Returns a list of (batch, tag) pairs where tag is "backdoor" for the
    originals and "clean_objective" for the appended perturbed batches.
    Perturbations are uniform noise inside the mask, clamped to [0,1];
    pixels outside the mask are untouched.
    """
    tagged = [(b, "backdoor") for b in stamped_batches]
    if not plan.terr_on:
        return tagged
    n_aug = _aug_count(len(stamped_batches), plan.terr_ratio)
    rng = np.random.default_rng(seed)
    for k in range(n_aug):
        src = stamped_batches[k % len(stamped_batches)]
        noise = rng.uniform(-plan.terr_noise_scale, plan.terr_noise_scale, size=src.shape)
        perturbed = np.clip(src + trigger.mask[None] * noise, 0.0, 1.0)
        tagged.append((perturbed, "clean_objective"))
    return tagged


def ibi_augment(model, calib_images, plan: AdaptivePlan, target_label, attack_config, rng):
    """Dedicated triggers and stamped batches for non-target labels.

    Each chosen label gets its own generated trigger; the emitted batches
    carry that label as their cross-entropy target at the output layer.
    """
    from .attack import generate_trigger, square_mask, stamp_trigger

    labels = plan.ibi_labels
    if labels is None:
        pool = [k for k in range(model.num_classes) if k != target_label]
        picks = rng.permutation(len(pool))[: min(2, len(pool))]
        labels = [pool[i] for i in sorted(picks)]
    labels = [int(l) for l in labels]
    for l in labels:
        if l == target_label:
            raise ValueError(f"IBI label {l} equals the attack target label")
        if not 0 <= l < model.num_classes:
            raise ValueError(f"IBI label {l} outside [0, {model.num_classes})")

    n_main = max(1, len(_batches(calib_images, plan.batch_size)))
    n_per_label = _aug_count(n_main, plan.ibi_ratio)
    mask = square_mask(model.input_shape, attack_config.trigger_fraction)
    out_images, out_targets = [], []
    for label in labels:
        trig = generate_trigger(model, calib_images, label, mask,
                                lr=attack_config.trigger_lr,
                                max_iter=attack_config.trigger_iters)
        for k in range(n_per_label):
            lo = (k * plan.batch_size) % calib_images.shape[0]
            src = calib_images[lo : lo + plan.batch_size]
            if src.shape[0] == 0:
                src = calib_images[: plan.batch_size]
            out_images.append(stamp_trigger(src, trig))
            out_targets.append(np.full(src.shape[0], label, dtype=np.int64))
    return labels, out_images, out_targets


@dataclass
class AdaptiveBatches:
    ce_images: list = field(default_factory=list)
    ce_targets: list = field(default_factory=list)
    reconstruction_images: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)


def build_adaptive_batches(model, calib_images, trigger, pseudo_labels, plan: AdaptivePlan,
                           attack_config, rng) -> AdaptiveBatches:
    """Materialize the plan into loss components for the attack pipeline.

    TERR batches oppose the backdoor objective at the output layer (their
    targets are the victim's own predictions on the underlying clean
    samples) and join the reconstruction pool at every layer. IBI batches
    add per-label backdoor terms at the output layer only.
    """
    out = AdaptiveBatches()
    if plan is None or plan.mode == "none":
        return out
    from .attack import stamp_trigger

    if plan.terr_on:
        stamped_batches = _batches(stamp_trigger(calib_images, trigger), plan.batch_size)
        label_batches = _batches(pseudo_labels, plan.batch_size)
        tagged = terr_augment(stamped_batches, trigger, plan, seed=int(rng.integers(2**31)))
        n_aug = 0
        for k, (batch, tag) in enumerate(tagged):
            if tag != "clean_objective":
                continue
            src_labels = label_batches[(k - len(stamped_batches)) % len(label_batches)]
            # perturbed batch k reuses source batch (k - n_main) cyclically
            src_idx = (k - len(stamped_batches)) % len(stamped_batches)
            out.ce_images.append(batch)
            out.ce_targets.append(label_batches[src_idx][: batch.shape[0]])
            out.reconstruction_images.append(batch)
            n_aug += 1
        out.extra["terr_batches"] = n_aug
    if plan.ibi_on:
        labels, images, targets = ibi_augment(model, calib_images, plan,
                                              trigger.target_label, attack_config, rng)
        out.ce_images.extend(images)
        out.ce_targets.extend(targets)
        out.extra["ibi_labels"] = labels
        out.extra["ibi_batches"] = len(images)
    return out


def effective_radius(model, stamped_images, trigger, eps_max=1.0, tol=1e-3,
                     coarse_steps=32):
    """Mean smallest masked perturbation that flips each sample's prediction.

    Per sample, a scalar eps is added to every masked pixel (clamped to
    [0,1]); a coarse upward scan brackets the first flip and bisection
    narrows it to `tol`. Samples that never flip contribute eps_max.
    """
    x = np.asarray(stamped_images, dtype=np.float64)
    n = x.shape[0]
    mask = trigger.mask[None]

    def preds_at(eps_vec):
        shifted = np.clip(x + mask * eps_vec.reshape(-1, 1, 1, 1), 0.0, 1.0)
        logits, _ = forward(model, shifted)
        return np.argmax(logits, axis=1)

    base = preds_at(np.zeros(n))
    radius = np.full(n, eps_max)
    lo = np.zeros(n)
    hi = np.full(n, np.nan)
    unresolved = np.ones(n, dtype=bool)
    grid = np.linspace(0.0, eps_max, coarse_steps + 1)[1:]
    prev = 0.0
    for e in grid:
        if not unresolved.any():
            break
        preds = preds_at(np.full(n, e))
        newly = unresolved & (preds != base)
        lo[newly] = prev
        hi[newly] = e
        unresolved &= ~newly
        prev = e
    bracketed = ~np.isnan(hi)
    if bracketed.any():
        blo, bhi = lo[bracketed], hi[bracketed]
        xb = x[bracketed]
        baseb = base[bracketed]
        while np.max(bhi - blo) > tol:
            mid = 0.5 * (blo + bhi)
            shifted = np.clip(xb + mask * mid.reshape(-1, 1, 1, 1), 0.0, 1.0)
            logits, _ = forward(model, shifted)
            preds = np.argmax(logits, axis=1)
            flips = preds != baseb
            bhi = np.where(flips, mid, bhi)
            blo = np.where(flips, blo, mid)
        radius[bracketed] = bhi
    return float(np.mean(radius))
