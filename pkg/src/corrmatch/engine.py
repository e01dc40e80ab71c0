"""Threshold relaxing, correlation matching, the loss terms and one training step."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import augment, metrics
from . import model as M
from . import tensor as T
from .config import RunConfig
from .errors import NumericalError, ShapeError
from .tensor import IGNORE, Tensor

DEFAULT_WEIGHTS = (0.5, 0.25, 0.25)


# ---------------------------------------------------------------- thresholds

@dataclass(frozen=True)
class ThresholdState:
    tau: float
    tau0: float
    lam: float
    step: int = 0
    mode: str = "global"
    per_class_tau: np.ndarray | None = field(default=None, compare=False)


def init_threshold(tau0: float = 0.85, lam: float = 0.999, mode: str = "global", K: int | None = None) -> ThresholdState:
    if mode not in ("global", "per_class"):
        raise ValueError(f"unknown threshold mode {mode!r}")
    if not 0.0 <= tau0 <= 1.0:
        raise ValueError(f"tau0 must lie in [0, 1], got {tau0}")
    if not 0.0 <= lam < 1.0:
        raise ValueError(f"EMA momentum must lie in [0, 1), got {lam}")
    per_class = None
    if mode == "per_class":
        if K is None:
            raise ValueError("per_class mode needs the number of classes K")
        per_class = np.full(K, float(tau0))
    return ThresholdState(float(tau0), float(tau0), float(lam), 0, mode, per_class)


def _class_axis(x: np.ndarray) -> int:
    if x.ndim == 3:
        return 0
    if x.ndim == 4:
        return 1
    raise ShapeError(f"expected K x H x W or N x K x H x W logits, got {x.shape}")


def confidence_and_pseudo(logits) -> tuple[np.ndarray, np.ndarray]:
    """Max softmax probability and argmax class per pixel, as plain arrays (no graph)."""
    x = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    axis = _class_axis(x)
    prob = T.softmax_array(x, axis)
    return prob.max(axis=axis), prob.argmax(axis=axis)


def filter_map(confidence: np.ndarray, tau) -> np.ndarray:
    """Binary mask of pixels whose confidence strictly exceeds ``tau`` (scalar or per-pixel)."""
    return np.asarray(confidence) > tau


def class_max_confidence(confidence: np.ndarray, pseudo: np.ndarray) -> dict[int, float]:
    conf = np.asarray(confidence).reshape(-1)
    lab = np.asarray(pseudo).reshape(-1)
    out = {}
    for c in np.unique(lab):
        out[int(c)] = float(conf[lab == c].max())
    return out


def propose_threshold_increment(confidence: np.ndarray, pseudo: np.ndarray) -> float:
    """Mean over predicted classes of the highest confidence reached by that class.

    For a batch, classes and maxima are pooled over every pixel of every image.
    """
    maxima = class_max_confidence(confidence, pseudo)
    if not maxima:
        raise ValueError("pseudo label map is empty")
    return float(sum(maxima.values()) / len(maxima))


def update_threshold(state: ThresholdState, tau_prime: float) -> ThresholdState:
    """One EMA update; the call made at step 0 returns ``tau0`` and discards ``tau_prime``."""
    if not 0.0 <= tau_prime <= 1.0:
        raise ValueError(f"threshold increment must lie in [0, 1], got {tau_prime}")
    if state.step == 0:
        tau = state.tau0
    else:
        tau = state.lam * state.tau + (1.0 - state.lam) * tau_prime
    return dataclasses.replace(state, tau=tau, step=state.step + 1)


def update_threshold_per_class(state: ThresholdState, confidence: np.ndarray, pseudo: np.ndarray) -> ThresholdState:
    if state.mode != "per_class" or state.per_class_tau is None:
        raise ValueError("update_threshold_per_class needs a per_class ThresholdState")
    maxima = class_max_confidence(confidence, pseudo)
    per_class = state.per_class_tau.copy()
    if state.step > 0:
        for c, m in maxima.items():
            per_class[c] = state.lam * per_class[c] + (1.0 - state.lam) * m
    tau_prime = sum(maxima.values()) / len(maxima)
    new = update_threshold(state, tau_prime)
    return dataclasses.replace(new, per_class_tau=per_class)


def effective_thresholds(state: ThresholdState) -> np.ndarray | float:
    """Per-class thresholds ``tau * tau_l / max_k tau_k`` (maximum normalization), or the global tau."""
    if state.mode != "per_class":
        return state.tau
    pc = state.per_class_tau
    top = pc.max()
    if top <= 0:
        return np.zeros_like(pc)
    return state.tau * pc / top


def pixel_thresholds(state: ThresholdState, pseudo: np.ndarray):
    eff = effective_thresholds(state)
    if np.ndim(eff) == 0:
        return eff
    return eff[pseudo]


def ema_closed_form(tau0: float, c: float, lam: float, t: int) -> float:
    """Threshold after the step-``t`` update under a constant increment ``c``."""
    return c + lam**t * (tau0 - c)


# ---------------------------------------------------------------- correlation and propagation

@dataclass
class CorrelationMap:
    values: Tensor  # [N x] HW x HW
    feature_dim: int


def correlation_map(e: Tensor, W1: Tensor, W2: Tensor) -> CorrelationMap:
    """``C = (W1 e)^T (W2 e)`` per image."""
    d = e.shape[-2]
    if W1.shape != (d, d) or W2.shape != (d, d):
        raise ShapeError(f"correlation_map: features {e.shape} need {d}x{d} projections, got {W1.shape}, {W2.shape}")
    left = T.matmul(W1, e)
    right = T.matmul(W2, e)
    return CorrelationMap(T.matmul(T.transpose(left), right), d)


def propagate(logits: Tensor, corr: CorrelationMap, h: int, w: int) -> Tensor:
    """``z = f(logits) . softmax(C / sqrt(D))`` with the softmax over source pixels.

    ``f`` bilinearly resizes logits to ``h x w`` and flattens them to
    ``K x hw``; each column of ``z`` is a convex combination of those columns.
    """
    hw = h * w
    if corr.values.shape[-2:] != (hw, hw):
        raise ShapeError(f"propagate: correlation map {corr.values.shape} does not match {h}x{w}")
    small = T.bilinear_resize(logits, h, w)
    flat = T.reshape(small, small.shape[:-2] + (hw,))
    weights = T.softmax(T.scale(corr.values, 1.0 / math.sqrt(corr.feature_dim)), axis=-2)
    return T.matmul(flat, weights)


# ---------------------------------------------------------------- losses

def masked_targets(pseudo: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Pseudo labels with low-confidence pixels set to IGNORE."""
    return np.where(np.asarray(mask).astype(bool), pseudo, IGNORE)


def flat_targets(labels: np.ndarray, h: int, w: int) -> np.ndarray:
    small = T.nearest_downsample(labels, h, w)
    return small.reshape(small.shape[:-2] + (h * w,))


def loss_sup_hard(logits_l: Tensor, y: np.ndarray) -> Tensor:
    return T.masked_cross_entropy(logits_l, y)


def loss_unsup_hard(logits_s: Tensor, pseudo: np.ndarray, mask: np.ndarray, logits_fp: Tensor | None = None,
                    pseudo_fp: np.ndarray | None = None, mask_fp: np.ndarray | None = None) -> Tensor:
    """Masked CE of strong logits on pseudo labels, averaged with the perturbed branch when given."""
    loss = T.masked_cross_entropy(logits_s, masked_targets(pseudo, mask))
    if logits_fp is None:
        return loss
    pseudo_fp = pseudo if pseudo_fp is None else pseudo_fp
    mask_fp = mask if mask_fp is None else mask_fp
    loss_fp = T.masked_cross_entropy(logits_fp, masked_targets(pseudo_fp, mask_fp))
    return T.scale(T.add(loss, loss_fp), 0.5)


def loss_unsup_soft(logits_w, logits_s: Tensor, mask: np.ndarray) -> Tensor:
    """KL(weak || strong) on confident pixels; the weak side is a constant target."""
    target = Tensor(logits_w.data if isinstance(logits_w, Tensor) else logits_w)
    return T.kl_divergence(target, logits_s, mask)


def loss_corr(z_w: Tensor, z_s: Tensor, pseudo: np.ndarray, mask: np.ndarray, h: int, w: int,
              pseudo_s: np.ndarray | None = None, mask_s: np.ndarray | None = None) -> Tensor:
    """Half-sum of the propagated weak and strong CE terms.

    ``pseudo_s``/``mask_s`` override the strong-view targets (after CutMix).
    """
    tw = flat_targets(masked_targets(pseudo, mask), h, w)
    ps = pseudo if pseudo_s is None else pseudo_s
    ms = mask if mask_s is None else mask_s
    ts = flat_targets(masked_targets(ps, ms), h, w)
    return T.scale(T.add(_z_cross_entropy(z_w, tw), _z_cross_entropy(z_s, ts)), 0.5)


def loss_sup_corr(z_l: Tensor, y: np.ndarray, h: int, w: int) -> Tensor:
    return _z_cross_entropy(z_l, flat_targets(y, h, w))


def _z_cross_entropy(z: Tensor, target: np.ndarray) -> Tensor:
    # z is K x hw for one image or N x K x hw for a batch.
    return T.masked_cross_entropy(z, target, class_axis=1 if z.ndim == 3 else 0)


@dataclass
class LossBreakdown:
    ls_h: Tensor
    ls_c: Tensor
    lu_h: Tensor
    lu_s: Tensor
    lu_c: Tensor
    lambda1: float
    lambda2: float
    lambda3: float
    total: Tensor

    TERMS = ("ls_h", "ls_c", "lu_h", "lu_s", "lu_c")

    def values(self) -> dict[str, float]:
        out = {k: float(getattr(self, k).data) for k in self.TERMS}
        out["total"] = float(self.total.data)
        return out


def total_loss(ls_h: Tensor, ls_c: Tensor, lu_h: Tensor, lu_s: Tensor, lu_c: Tensor,
               weights=DEFAULT_WEIGHTS) -> LossBreakdown:
    """``1/2 (1/2 (ls_h + ls_c) + l1 lu_h + l2 lu_s + l3 lu_c)``."""
    l1, l2, l3 = (float(x) for x in weights)
    sup = T.scale(T.add(ls_h, ls_c), 0.5)
    unsup = T.weighted_sum([lu_h, lu_s, lu_c], [l1, l2, l3])
    total = T.scale(T.add(sup, unsup), 0.5)
    return LossBreakdown(ls_h, ls_c, lu_h, lu_s, lu_c, l1, l2, l3, total)


# ---------------------------------------------------------------- optimizer

@dataclass
class OptState:
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    iteration: int = 0


def poly_lr(lr0: float, iteration: int, total_iters: int, power: float = 0.9) -> float:
    return lr0 * (1.0 - iteration / total_iters) ** power


def sgd_step(params: M.ModelParams, opt: OptState, lr: float, momentum: float = 0.9) -> OptState:
    """Heavy-ball SGD: ``v <- m v + g``, ``p <- p - lr v``; updates ``params`` in place."""
    velocity = dict(opt.velocity)
    for name, p in params.tensors.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        v = velocity.get(name)
        v = g.copy() if v is None else momentum * v + g
        velocity[name] = v
        p.data -= lr * v
        p.grad = None
    return OptState(velocity, opt.iteration + 1)


# ---------------------------------------------------------------- training step

@dataclass
class StepInputs:
    """Everything a step's losses depend on besides the parameters.

    Pseudo labels, masks and the soft target are frozen arrays, which is
    what lets a finite-difference check treat the loss as a smooth function.
    """
    x_l: np.ndarray
    y_l: np.ndarray
    x_w: np.ndarray | None = None
    x_s: np.ndarray | None = None
    pseudo_w: np.ndarray | None = None
    mask_w: np.ndarray | None = None
    pseudo_s: np.ndarray | None = None
    mask_s: np.ndarray | None = None
    soft_target_s: np.ndarray | None = None
    fp_mask: np.ndarray | None = None


def branch_rngs(rng: np.random.Generator) -> dict[str, np.random.Generator]:
    """Independent streams per branch, so disabling one never shifts another's draws."""
    seeds = rng.integers(0, 2**63 - 1, size=4)
    return {name: np.random.default_rng(int(s)) for name, s in zip(("labeled", "unlabeled", "cutmix", "perturb"), seeds)}


def augment_labeled(samples, rng: np.random.Generator, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for s in samples:
        v, lv, _ = augment.weak_augment(s.image, s.label, rng, scale_range=(cfg.scale_min, cfg.scale_max))
        xs.append(v)
        ys.append(lv)
    return np.stack(xs), np.stack(ys)


def augment_unlabeled(samples, rng: np.random.Generator, cfg: RunConfig):
    """Weak views, strong views (same geometry) and transformed evaluation-only ground truth."""
    xw, xs, gts = [], [], []
    for s in samples:
        v, gt, _ = augment.weak_augment(s.image, s.eval_label, rng, scale_range=(cfg.scale_min, cfg.scale_max))
        xw.append(v)
        xs.append(augment.strong_augment(v, rng))
        gts.append(gt)
    gt = np.stack(gts) if all(g is not None for g in gts) else None
    return np.stack(xw), np.stack(xs), gt


def _run_heads(params, x: np.ndarray):
    return M.forward(params, Tensor(x))


def compute_losses(params: M.ModelParams, inputs: StepInputs, cfg: RunConfig, weak_out: M.ForwardOutput | None = None,
                   n_labeled: int | None = None) -> LossBreakdown:
    """All five loss terms for frozen step inputs.

    ``weak_out`` may carry an already computed forward over ``concat(x_l, x_w)``.
    """
    zero = T.zeros_scalar
    unl = inputs.x_w is not None
    nl = inputs.x_l.shape[0] if n_labeled is None else n_labeled
    if weak_out is None:
        x = np.concatenate([inputs.x_l, inputs.x_w]) if unl else inputs.x_l
        weak_out = M.forward(params, Tensor(x))
    H, W = inputs.x_l.shape[-2:]
    h, w = weak_out.encoder_feature.shape[-2:]
    n_all = weak_out.logits.shape[0]
    logits_l = T.take(weak_out.logits, 0, nl) if unl else weak_out.logits
    ls_h = loss_sup_hard(logits_l, inputs.y_l)

    ls_c = zero()
    if cfg.use_corr_loss:
        e_l = T.take(weak_out.extracted, 0, nl) if unl else weak_out.extracted
        z_l = propagate(logits_l, correlation_map(e_l, params["W1"], params["W2"]), h, w)
        ls_c = loss_sup_corr(z_l, inputs.y_l, h, w)

    lu_h = lu_s = lu_c = zero()
    if unl:
        logits_w = T.take(weak_out.logits, nl, n_all)
        out_s = _run_heads(params, inputs.x_s)
        logits_fp = None
        if cfg.use_feature_perturb and inputs.fp_mask is not None:
            feat_w = T.take(weak_out.encoder_feature, nl, n_all)
            logits_fp = M.decode(params, T.mul_const(feat_w, inputs.fp_mask), H, W)
        lu_h = loss_unsup_hard(out_s.logits, inputs.pseudo_s, inputs.mask_s, logits_fp, inputs.pseudo_w, inputs.mask_w)
        if cfg.use_soft_loss:
            lu_s = loss_unsup_soft(inputs.soft_target_s, out_s.logits, inputs.mask_s)
        if cfg.use_corr_loss:
            e_w = T.take(weak_out.extracted, nl, n_all)
            z_w = propagate(logits_w, correlation_map(e_w, params["W1"], params["W2"]), h, w)
            z_s = propagate(out_s.logits, correlation_map(out_s.extracted, params["W1"], params["W2"]), h, w)
            lu_c = loss_corr(z_w, z_s, inputs.pseudo_w, inputs.mask_w, h, w, inputs.pseudo_s, inputs.mask_s)
    weights = cfg.weights if unl else (0.0, 0.0, 0.0)
    return total_loss(ls_h, ls_c, lu_h, lu_s, lu_c, weights)


@dataclass
class PreparedStep:
    inputs: StepInputs
    weak_out: M.ForwardOutput | None
    threshold_state: ThresholdState
    diagnostics: dict[str, float]
    tau_used: float


def prepare_step(params: M.ModelParams, threshold_state: ThresholdState, labeled_batch, unlabeled_batch,
                 rng: np.random.Generator, cfg: RunConfig) -> PreparedStep:
    """Augment, run the weak forward, derive pseudo labels/masks, update tau and apply CutMix."""
    streams = branch_rngs(rng)
    x_l, y_l = augment_labeled(labeled_batch, streams["labeled"], cfg)
    x_w, x_s, gt_w = augment_unlabeled(unlabeled_batch, streams["unlabeled"], cfg)
    nl = x_l.shape[0]

    if cfg.unlabeled_active:
        weak_out = M.forward(params, Tensor(np.concatenate([x_l, x_w])))
        logits_w = weak_out.logits.data[nl:]
    else:
        weak_out = None
        logits_w = M.forward(params.frozen(), Tensor(x_w)).logits.data

    conf, pseudo = confidence_and_pseudo(logits_w)
    if cfg.threshold_mode == "fixed":
        tau_used = cfg.fixed_threshold
        mask = filter_map(conf, tau_used)
        new_state = threshold_state
    else:
        tau_used = threshold_state.tau
        mask = filter_map(conf, pixel_thresholds(threshold_state, pseudo))
        if threshold_state.mode == "per_class":
            new_state = update_threshold_per_class(threshold_state, conf, pseudo)
        else:
            new_state = update_threshold(threshold_state, propose_threshold_increment(conf, pseudo))

    diag = {"mask_ratio": metrics.mask_ratio(mask)}
    if gt_w is not None:
        diag["mining_ratio"] = metrics.mining_ratio(mask, pseudo, gt_w)
        diag.update(metrics.diagnostic_ratios(mask, pseudo, gt_w))
    else:
        diag.update(mining_ratio=float("nan"), filter_ratio=diag["mask_ratio"], correct_pseudo_ratio=float("nan"),
                    pixel_accuracy=float("nan"))

    if not cfg.unlabeled_active:
        return PreparedStep(StepInputs(x_l, y_l), None, new_state, diag, tau_used)

    if cfg.use_cutmix:
        x_s, pseudo_s, mask_s, extra, _ = augment.cutmix(x_s, pseudo, mask, streams["cutmix"], extra=[logits_w])
        soft_target = extra[0]
    else:
        pseudo_s, mask_s, soft_target = pseudo, mask, logits_w
    fp_mask = None
    if cfg.use_feature_perturb:
        fp_mask = M.dropout_mask(streams["perturb"], x_w.shape[0], params.D)
    inputs = StepInputs(x_l, y_l, x_w, x_s, pseudo, mask, pseudo_s, mask_s, soft_target, fp_mask)
    return PreparedStep(inputs, weak_out, new_state, diag, tau_used)


def check_finite(breakdown: LossBreakdown) -> None:
    vals = breakdown.values()
    bad = [k for k, v in vals.items() if not math.isfinite(v)]
    if bad:
        raise NumericalError(f"non-finite loss term(s): {', '.join(bad)}", vals)


def train_step(params: M.ModelParams, opt_state: OptState, threshold_state: ThresholdState, labeled_batch,
               unlabeled_batch, rng: np.random.Generator, cfg: RunConfig, iteration: int | None = None):
    """One optimization step; ``params`` are updated in place and also returned.

    Returns ``(params, opt_state, threshold_state, LossBreakdown, StepDiagnostics, lr)``.
    """
    it = opt_state.iteration if iteration is None else iteration
    prep = prepare_step(params, threshold_state, labeled_batch, unlabeled_batch, rng, cfg)
    breakdown = compute_losses(params, prep.inputs, cfg, prep.weak_out)
    check_finite(breakdown)
    params.zero_grad()
    T.backward(breakdown.total)
    for name, p in params.tensors.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient for {name}", breakdown.values())
    lr = poly_lr(cfg.lr0, it, cfg.total_iters)
    opt_state = sgd_step(params, opt_state, lr, cfg.momentum)
    diag = metrics.StepDiagnostics(iteration=it, tau=prep.tau_used, **prep.diagnostics)
    return params, opt_state, prep.threshold_state, breakdown, diag, lr


def initial_threshold_state(cfg: RunConfig) -> ThresholdState:
    mode = "per_class" if cfg.threshold_mode == "relaxed_per_class" else "global"
    return init_threshold(cfg.tau0, cfg.ema_momentum, mode, cfg.K)
