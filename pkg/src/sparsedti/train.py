"""Training loop, evaluation harness and the regularizer comparison study."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import quality
from .errors import TrainingDiverged, ValidationError
from .loss import LambdaState, adapt_lambda, gt_spectra, loss_terms
from .model import Adam, backward, forward_batch, init_model
from .phantom import NoiseConfig, extract_patches, generate_phantom, make_dataset
from .volume import METRIC_CHANNELS, six_direction_table

log = logging.getLogger(__name__)

HISTORY_HEADER = ("epoch", "train_total", "val_data", "val_reg", "lambda", "val_psnr")
EVAL_HEADER = ("channel", "mse", "psnr", "ssim", "peak")
ADAPTIVE = "adaptive"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 40
    batch_size: int = 8
    patch: int = 32
    stride: int = None
    hidden: tuple = (256, 256)
    activation: str = "tanh"
    lam: object = ADAPTIVE
    lam0: float = 0.1
    rho: float = 0.1
    beta: float = 0.9
    lam_min: float = 1e-4
    lam_max: float = 10.0
    seed: int = 0
    max_train_patches: int = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1 or self.patch < 1:
            raise ValidationError("epochs, batch size and patch size must be positive")
        if not 0 < self.rho < 1:
            raise ValidationError("rho must be in (0, 1)")
        if self.lam_min > self.lam_max:
            raise ValidationError("lam_min exceeds lam_max")
        if self.lam != ADAPTIVE:
            try:
                lam = float(self.lam)
            except (TypeError, ValueError):
                raise ValidationError(f"lambda must be a number or {ADAPTIVE!r}, got {self.lam!r}") from None
            if lam < 0 or not math.isfinite(lam):
                raise ValidationError("lambda must be a finite non-negative number")
            object.__setattr__(self, "lam", lam)
        if self.patch == 1 and self.regularized:
            raise ValidationError(
                "the singular-value term is undefined for 1x1 patches; use lambda 0 with patch 1")

    @property
    def adaptive(self):
        return self.lam == ADAPTIVE

    @property
    def regularized(self):
        return self.adaptive or self.lam > 0

    @property
    def train_stride(self):
        return self.patch if self.stride is None else self.stride


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    train_total: float
    val_data: float
    val_reg: float
    lam: float
    val_psnr: float

    def as_csv(self):
        return [str(self.epoch), _fmt(self.train_total), _fmt(self.val_data),
                _fmt(self.val_reg), _fmt(self.lam), _fmt(self.val_psnr)]


def _fmt(x):
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return f"{x:.10g}"


@dataclass
class TrainResult:
    model: object
    history: list

    def write_history(self, path):
        write_history(self.history, path)


def write_history(rows, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(HISTORY_HEADER)
        for row in rows:
            out.writerow(row.as_csv())


def _state_dump(model, epoch, batch, lam, losses):
    return {
        "epoch": epoch,
        "batch": batch,
        "lambda": lam,
        "batch_losses": [float(x) for x in losses],
        "weight_norms": [float(np.linalg.norm(w)) for w in model.weights],
        "bias_norms": [float(np.linalg.norm(b)) for b in model.biases],
    }


def _patch_losses(model, x, y, s_gt, with_reg, batch_size=64):
    """Mean data and reg terms over a patch set (no gradients)."""
    data_sum = reg_sum = 0.0
    for i in range(0, x.shape[0], batch_size):
        out = forward_batch(model, x[i:i + batch_size])
        sl = slice(i, i + batch_size)
        d, r, _, _ = loss_terms(out, y[sl], with_reg=with_reg,
                                gt_sigma=None if s_gt is None else s_gt[sl])
        data_sum += float(d.sum())
        reg_sum += float(r.sum())
    n = max(x.shape[0], 1)
    return data_sum / n, reg_sum / n


def train(ds, cfg):
    """Mini-batch Adam on ``data + lambda * reg``.

    In adaptive mode lambda is rebalanced once per epoch from the mean
    norms of the two terms' gradients with respect to the network output.
    Raises ``TrainingDiverged`` on a non-finite loss or an overflowing weight norm.
    """
    if cfg.patch == 1 and cfg.regularized:
        raise ValidationError("patch 1 requires lambda 0")
    rng = np.random.default_rng(cfg.seed)
    model = init_model(cfg.patch, cfg.hidden, cfg.activation, rng)
    use_reg = cfg.patch > 1
    x_tr, y_tr, _ = extract_patches(ds, "train", cfg.patch, cfg.train_stride, drop_degenerate=True)
    if x_tr.shape[0] == 0:
        raise ValidationError("training split yields no usable patches")
    if cfg.max_train_patches is not None and x_tr.shape[0] > cfg.max_train_patches:
        keep = np.sort(rng.permutation(x_tr.shape[0])[: cfg.max_train_patches])
        x_tr, y_tr = x_tr[keep], y_tr[keep]
    x_val, y_val, _ = extract_patches(ds, "val", cfg.patch, cfg.patch, drop_degenerate=True)
    # Ground-truth spectra never change, so compute them once.
    s_tr = gt_spectra(y_tr) if use_reg and cfg.regularized else None
    s_val = gt_spectra(y_val) if use_reg else None

    state = LambdaState(lam=cfg.lam0 if cfg.adaptive else float(cfg.lam), rho=cfg.rho,
                        beta=cfg.beta, lam_min=cfg.lam_min, lam_max=cfg.lam_max)
    params = model.params()
    opt = Adam(params, cfg.lr)
    n = x_tr.shape[0]
    history = []
    for epoch in range(1, cfg.epochs + 1):
        lam = state.lam
        order = rng.permutation(n)
        total_sum = 0.0
        gd_norms, gr_norms = [], []
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            out, acts = forward_batch(model, x_tr[idx], keep_cache=True)
            # With lambda fixed at 0 the reg term cannot change the total.
            need_reg_grad = use_reg and cfg.regularized
            d, r, gd, gr = loss_terms(out, y_tr[idx], with_reg=need_reg_grad, want_grad=True,
                                      gt_sigma=None if s_tr is None else s_tr[idx])
            total = d + lam * r
            if not np.all(np.isfinite(total)):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {bi}",
                                       _state_dump(model, epoch, bi, lam, total))
            total_sum += float(total.sum())
            m = len(idx)
            g_out = gd / m
            gd_norms.append(float(np.linalg.norm(g_out)))
            if need_reg_grad:
                gr = gr / m
                gr_norms.append(float(np.linalg.norm(gr)))
                g_out = g_out + lam * gr
            grads = backward(model, acts, g_out)
            opt.step(params, grads)
            # A saturated net keeps a finite loss while its weights run away,
            # so an overflowing squared weight norm also counts as divergence.
            with np.errstate(over="ignore", invalid="ignore"):
                runaway = not all(math.isfinite(float(np.sum(p * p))) for p in params)
            if runaway:
                raise TrainingDiverged(f"non-finite weights at epoch {epoch}, batch {bi}",
                                       _state_dump(model, epoch, bi, lam, total))
        if cfg.adaptive:
            adapt_lambda(state, float(np.mean(gd_norms)), float(np.mean(gr_norms)))
        val_data, val_reg = _patch_losses(model, x_val, y_val, s_val, use_reg)
        val_psnr = evaluate(model, ds, "val").aggregate.psnr
        row = HistoryRow(epoch, total_sum / n, val_data, val_reg, lam, val_psnr)
        if not all(math.isfinite(v) for v in (row.train_total, val_data, val_reg)):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}",
                                   _state_dump(model, epoch, -1, lam, [val_data, val_reg]))
        history.append(row)
        log.debug("epoch %d train %.6g val_data %.6g val_reg %.6g lambda %.4g psnr %.4f",
                  epoch, row.train_total, val_data, val_reg, lam, val_psnr)
    model.meta = {
        "diffusivity_scale": ds.diffusivity_scale,
        "train_config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()},
        "final_lambda": state.lam,
    }
    return TrainResult(model, history)


def baseline_qdl(ds, cfg):
    """Voxel-wise MLP baseline: same loop with 1x1 patches, three dense
    layers and no singular-value term."""
    hidden = cfg.hidden if len(cfg.hidden) == 2 else (256, 256)
    if cfg.regularized:
        raise ValidationError("the voxel-wise baseline cannot use the singular-value term (lambda must be 0)")
    return train(ds, replace(cfg, patch=1, stride=1, hidden=hidden))


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class MetricRow:
    channel: str
    mse: float
    psnr: float
    ssim: float
    peak: float


@dataclass(frozen=True)
class EvalResult:
    rows: tuple
    prediction: np.ndarray
    reference: np.ndarray
    slices: tuple

    @property
    def aggregate(self):
        return self.rows[-1]

    def write_csv(self, path):
        write_eval_csv(self.rows, path)


def write_eval_csv(rows, path):
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(EVAL_HEADER)
        for r in rows:
            out.writerow([r.channel, quality.format_float(r.mse, 10), quality.format_float(r.psnr),
                          quality.format_float(r.ssim), quality.format_float(r.peak)])


def predict_slices(model, ds, slices):
    """Tile each slice with non-overlapping patches and predict.

    Returns ``(pred, ref)`` of shape ``(X', Y', nz, 3)`` where ``X'`` and
    ``Y'`` are the tiled extents (multiples of the patch size).
    """
    P = model.patch
    X, Y, _ = ds.dims
    nx, ny = X // P, Y // P
    if nx == 0 or ny == 0:
        raise ValidationError(f"patch {P} larger than slice {X}x{Y}")
    xs = [i * P for i in range(nx)]
    ys = [j * P for j in range(ny)]
    pred = np.zeros((nx * P, ny * P, len(slices), 3))
    ref = ds.targets[: nx * P, : ny * P, list(slices), :].copy()
    for k, z in enumerate(slices):
        tiles = np.stack([ds.inputs[x:x + P, y:y + P, z, :] for x in xs for y in ys])
        out = forward_batch(model, tiles)
        t = 0
        for x in xs:
            for y in ys:
                pred[x:x + P, y:y + P, k, :] = out[t]
                t += 1
    return pred, ref


def metric_rows(pred, ref):
    """Per-channel and aggregate MSE/PSNR/SSIM for ``(X, Y, nz, 3)`` stacks."""
    rows = []
    ssims = []
    for c, name in enumerate(METRIC_CHANNELS):
        r = ref[..., c]
        p = pred[..., c]
        # SSIM works on (nz, X, Y) slices
        s = quality.ssim(np.moveaxis(r, -1, 0), np.moveaxis(p, -1, 0), data_range=quality.peak(r))
        ssims.append(s)
        rows.append(MetricRow(name, quality.mse(r, p), quality.psnr(r, p), s, quality.peak(r)))
    rows.append(MetricRow("aggregate", quality.mse(ref, pred), quality.psnr(ref, pred),
                          float(np.mean(ssims)), quality.peak(ref)))
    return tuple(rows)


def evaluate(model, ds, split="test"):
    slices = tuple(ds.split_slices(split))
    if not slices:
        raise ValidationError(f"split {split!r} is empty")
    pred, ref = predict_slices(model, ds, slices)
    return EvalResult(metric_rows(pred, ref), pred, ref, slices)


# ---------------------------------------------------------------------------
# regularizer study


@dataclass(frozen=True)
class ComparisonRow:
    seed: int
    psnr_fixed: float
    psnr_adaptive: float

    @property
    def improvement(self):
        return self.psnr_adaptive - self.psnr_fixed


@dataclass
class Comparison:
    rows: list
    histories: dict

    @property
    def mean_fixed(self):
        return float(np.mean([r.psnr_fixed for r in self.rows]))

    @property
    def mean_adaptive(self):
        return float(np.mean([r.psnr_adaptive for r in self.rows]))

    @property
    def mean_improvement(self):
        return self.mean_adaptive - self.mean_fixed

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["seed", "val_psnr_lambda0", "val_psnr_adaptive", "improvement"])
            for r in self.rows:
                out.writerow([r.seed, quality.format_float(r.psnr_fixed),
                              quality.format_float(r.psnr_adaptive), quality.format_float(r.improvement)])
            out.writerow(["mean", quality.format_float(self.mean_fixed),
                          quality.format_float(self.mean_adaptive),
                          quality.format_float(self.mean_improvement)])


def compare_regularizer(seeds, cfg=None, phantom_cfg=None, sigma=0.04, split=(0.7, 0.15, 0.15)):
    """Train with lambda = 0 and with adaptive lambda for each seed.

    The seed drives both the noise realization and the network
    initialization; everything else is shared between the two arms.
    """
    from .phantom import PhantomConfig

    cfg = TrainConfig() if cfg is None else cfg
    field = generate_phantom(phantom_cfg or PhantomConfig())
    gtab = six_direction_table()
    rows, histories = [], {}
    for seed in seeds:
        ds = make_dataset(field, gtab, NoiseConfig(sigma, seed), split)
        fixed = train(ds, replace(cfg, lam=0.0, seed=seed))
        adaptive = train(ds, replace(cfg, lam=ADAPTIVE, seed=seed))
        histories[(seed, "lambda0")] = fixed.history
        histories[(seed, ADAPTIVE)] = adaptive.history
        rows.append(ComparisonRow(seed, evaluate(fixed.model, ds, "val").aggregate.psnr,
                                  evaluate(adaptive.model, ds, "val").aggregate.psnr))
        log.info("seed %d: lambda0 %.4f dB, adaptive %.4f dB", seed, rows[-1].psnr_fixed,
                 rows[-1].psnr_adaptive)
    return Comparison(rows, histories)
