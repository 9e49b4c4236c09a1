"""Hybrid classifier: one Fourier-domain binary-kernel convolution layer done
optically (or by its exact digital equivalent), then max-pool and two fully
connected layers in the electronic domain.

Training is two-staged. Stage 1 trains everything jointly in the noise-free
digital mode; kernel masters are real-valued and binarized in the forward
pass (straight-through estimator for the backward pass). Stage 2 freezes the
kernels and retrains only the fully connected head on captured outputs of the
noisy optical path, absorbing gains and distortions the simulation does not
model.

Gradients are hand-derived for this fixed architecture; there is no autograd.
The convolution layer's backward uses the unitarity of the centered transform
(adjoint of the inverse transform is the forward one).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.fft

from .datapipe import TileLayout, tile, untile
from .optics import (
    FieldPlane,
    NoiseSpec,
    OpticalConfig,
    camera_capture,
    ideal_aperture,
    multi_kernel_forward,
)

__all__ = [
    "ModelParams",
    "TrainConfig",
    "EvalResult",
    "TrainingDivergedError",
    "init_params",
    "binarize_ste",
    "binarize_ste_grad",
    "binarized_kernels",
    "conv_fourier_forward",
    "head_forward",
    "train_stage1",
    "capture_features",
    "finetune_stage2",
    "evaluate",
    "evaluate_tiled",
    "save_checkpoint",
    "load_checkpoint",
    "write_trace_csv",
]

HIGHPASS_HALF = 1  # center (2*HALF+1)^2 = 3x3 Fourier bins forced to zero
STE_CLIP = 1.0

_NORM_EPS = 1e-30


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass(frozen=True)
class ModelParams:
    """Kernel bank (float masters, Fourier domain) plus the dense head.

    The reference instance carries 16 kernels on the training grid with a
    256-unit hidden layer; smaller instances are used for gradient checks.
    """

    fourier_kernels: np.ndarray  # (K, G, G) float masters
    fc1_w: np.ndarray  # (D, hidden)
    fc1_b: np.ndarray  # (hidden,)
    fc2_w: np.ndarray  # (hidden, n_classes)
    fc2_b: np.ndarray  # (n_classes,)
    highpass_mask_enabled: bool
    image_hw: tuple[int, int]

    def __post_init__(self) -> None:
        if self.fourier_kernels.ndim != 3 or self.fourier_kernels.shape[1] != self.fourier_kernels.shape[2]:
            raise ValueError("fourier_kernels must be (K, G, G)")
        h, w = self.image_hw
        if h % 2 or w % 2:
            raise ValueError("native image window must have even sides for 2x2 pooling")
        k = self.fourier_kernels.shape[0]
        if self.fc1_w.shape[0] != k * (h // 2) * (w // 2):
            raise ValueError(
                f"fc1 expects {self.fc1_w.shape[0]} features, conv layer yields "
                f"{k * (h // 2) * (w // 2)}"
            )

    @property
    def n_kernels(self) -> int:
        return self.fourier_kernels.shape[0]

    @property
    def grid(self) -> int:
        return self.fourier_kernels.shape[1]

    @property
    def n_classes(self) -> int:
        return self.fc2_w.shape[1]


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters and reproducibility knobs for both training stages."""

    lr_stage1: float = 0.01
    lr_stage2: float = 0.005
    momentum: float = 0.9
    batch_size: int = 64
    epochs_stage1: int = 10
    epochs_stage2: int = 5
    seed: int = 0
    noise: NoiseSpec = NoiseSpec(sigma=0.1, seed=1)
    grid: int = 256
    dtype: str = "float32"  # stage-1 arithmetic; physics checks run float64

    def __post_init__(self) -> None:
        if self.lr_stage1 <= 0 or self.lr_stage2 <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs_stage1 < 1 or self.epochs_stage2 < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # (n_classes, n_classes), rows = true class
    n_samples: int


def init_params(
    seed: int,
    n_kernels: int = 16,
    grid: int = 256,
    image_hw: tuple[int, int] = (28, 28),
    n_classes: int = 10,
    hidden: int = 256,
    highpass_mask_enabled: bool = True,
) -> ModelParams:
    """Seeded initialization: kernel masters uniform in [-0.5, 0.5] directly
    in the Fourier domain, Glorot-uniform dense layers, zero biases."""
    rng = np.random.default_rng(seed)
    kernels = rng.uniform(-0.5, 0.5, size=(n_kernels, grid, grid))
    d = n_kernels * (image_hw[0] // 2) * (image_hw[1] // 2)

    def glorot(n_in: int, n_out: int) -> np.ndarray:
        lim = np.sqrt(6.0 / (n_in + n_out))
        return rng.uniform(-lim, lim, size=(n_in, n_out))

    params = ModelParams(
        fourier_kernels=kernels,
        fc1_w=glorot(d, hidden),
        fc1_b=np.zeros(hidden),
        fc2_w=glorot(hidden, n_classes),
        fc2_b=np.zeros(n_classes),
        highpass_mask_enabled=highpass_mask_enabled,
        image_hw=image_hw,
    )
    return _apply_mask_to_masters(params)


# ---------------------------------------------------------------------------
# binarization with straight-through estimator


def binarize_ste(w: np.ndarray) -> np.ndarray:
    """Forward binarization: w > 0 -> 1, w <= 0 -> 0 (mirrors cannot be -1)."""
    w = np.asarray(w)
    if not np.all(np.isfinite(w)):
        raise ValueError("kernel masters must be finite")
    return (w > 0).astype(w.dtype if w.dtype.kind == "f" else np.float64)


def binarize_ste_grad(w: np.ndarray, upstream: np.ndarray, clip: float = STE_CLIP) -> np.ndarray:
    """Straight-through gradient: pass where |w| <= clip, zero elsewhere."""
    return upstream * (np.abs(w) <= clip)


def _highpass_mask(grid: int, dtype=np.float64) -> np.ndarray:
    mask = np.ones((grid, grid), dtype=dtype)
    c = grid // 2
    mask[c - HIGHPASS_HALF : c + HIGHPASS_HALF + 1, c - HIGHPASS_HALF : c + HIGHPASS_HALF + 1] = 0
    return mask


def binarized_kernels(params: ModelParams, dtype=np.float64) -> np.ndarray:
    """The hardware view of the kernel bank: binary, center-masked if enabled."""
    b = binarize_ste(params.fourier_kernels).astype(dtype)
    if params.highpass_mask_enabled:
        b *= _highpass_mask(params.grid, dtype)
    return b


def _apply_mask_to_masters(params: ModelParams) -> ModelParams:
    # Reapplied after every optimizer step so masked bins stay binarized to 0.
    if not params.highpass_mask_enabled:
        return params
    masters = params.fourier_kernels.copy()
    masters *= _highpass_mask(params.grid, masters.dtype)
    return replace(params, fourier_kernels=masters)


# ---------------------------------------------------------------------------
# transform engine
#
# The digital path is mathematically the centered unitary transform pair of
# the optics module, but computed in plain (unshifted) FFT coordinates: the
# fftshift sandwiches are folded into wrapped block embeddings/extractions,
# which on a 2-core box saves several full passes over the largest arrays
# per step. The kernel bank is re-indexed into the same coordinates once per
# use. Cross-checked against the optics-module path by the equivalence tests.


def _wrap_pairs(start: int, length: int, grid: int) -> list[tuple[slice, slice]]:
    """(grid slice, window slice) pairs of the block [start, start+length)
    taken modulo the grid size."""
    start %= grid
    if start + length <= grid:
        return [(slice(start, start + length), slice(0, length))]
    head = grid - start
    return [(slice(start, grid), slice(0, head)), (slice(0, length - head), slice(head, length))]


def _centered_window_coords(grid: int, h: int, w: int):
    # Centered window [r0, r0+h) x [c0, c0+w) seen in unshifted coordinates.
    r0, c0 = (grid - h) // 2, (grid - w) // 2
    return (
        _wrap_pairs(r0 - grid // 2, h, grid),
        _wrap_pairs(c0 - grid // 2, w, grid),
    )


def _spectrum_of_embedded(
    bits: np.ndarray, grid: int, cdtype, workers: int = 1
) -> np.ndarray:
    """Unshifted spectrum of center-embedded images.

    Only the occupied rows go through the column-stage transform; the result
    equals transforming the fully padded frame.
    """
    b, h, w = bits.shape
    rows, cols = _centered_window_coords(grid, h, w)
    z = np.zeros((b, h, grid), dtype=cdtype)
    for cg, cw in cols:
        z[:, :, cg] = bits[:, :, cw]
    t1 = scipy.fft.fft(z, axis=-1, norm="ortho", workers=workers)
    z2 = np.zeros((b, grid, grid), dtype=cdtype)
    for rg, rw in rows:
        z2[:, rg, :] = t1[:, rw, :]
    return scipy.fft.fft(z2, axis=-2, norm="ortho", workers=workers)


def _inverse_to_window(
    filtered: np.ndarray, grid: int, window: tuple[int, int], workers: int = 1
) -> np.ndarray:
    """Centered window of the centered inverse transform of ``filtered``
    (given in unshifted coordinates); only window columns are transformed in
    the second stage."""
    h, w = window
    rows, cols = _centered_window_coords(grid, h, w)
    t1 = scipy.fft.ifft(filtered, axis=-1, norm="ortho", workers=workers)
    panel = np.empty((*filtered.shape[:-1], w), dtype=filtered.dtype)
    for cg, cw in cols:
        panel[..., cw] = t1[..., cg]
    t2 = scipy.fft.ifft(panel, axis=-2, norm="ortho", workers=workers)
    out = np.empty((*filtered.shape[:-2], h, w), dtype=filtered.dtype)
    for rg, rw in rows:
        out[..., rw, :] = t2[..., rg, :]
    return out


def _window_to_spectrum(
    grad_window: np.ndarray, grid: int, workers: int = 1
) -> np.ndarray:
    """Adjoint of ``_inverse_to_window``: scatter, forward-transform (the
    adjoint of a unitary inverse), scatter, forward-transform."""
    *lead, h, w = grad_window.shape
    rows, cols = _centered_window_coords(grid, h, w)
    z = np.zeros((*lead, grid, w), dtype=grad_window.dtype)
    for rg, rw in rows:
        z[..., rg, :] = grad_window[..., rw, :]
    t1 = scipy.fft.fft(z, axis=-2, norm="ortho", workers=workers)
    z2 = np.zeros((*lead, grid, grid), dtype=grad_window.dtype)
    for cg, cw in cols:
        z2[..., cg] = t1[..., cw]
    return scipy.fft.fft(z2, axis=-1, norm="ortho", workers=workers)


def _unshift_bank(bank: np.ndarray) -> np.ndarray:
    """Kernel bank from centered to unshifted spectral coordinates."""
    return scipy.fft.ifftshift(bank, axes=(-2, -1))


# ---------------------------------------------------------------------------
# convolution layer forward


def _normalize_features(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Per-frame gain normalization to unit max: squared-magnitude outputs vary
    # over orders of magnitude and the head retraining absorbs static gain.
    b = raw.shape[0]
    peak = raw.reshape(b, -1).max(axis=1)
    peak = np.maximum(peak, _NORM_EPS)
    return raw / peak[:, None, None, None], peak


class _ConvCache:
    """Intermediates of the digital conv forward needed by the backward pass."""

    def __init__(self, spectrum, window_fields, raw, peak):
        self.spectrum = spectrum  # unshifted coordinates
        self.window_fields = window_fields
        self.raw = raw
        self.peak = peak


def _conv_digital(
    bits: np.ndarray,
    params: ModelParams,
    dtype: str = "float64",
    workers: int = 1,
    kernel_chunk: int = 8,
    want_cache: bool = False,
    bank_override: np.ndarray | None = None,
) -> tuple[np.ndarray, _ConvCache | None]:
    # bank_override substitutes the binarized bank (centered coordinates);
    # the finite-difference harness perturbs the STE surrogate through it.
    cdtype = np.complex64 if dtype == "float32" else np.complex128
    rdtype = np.float32 if dtype == "float32" else np.float64
    g = params.grid
    h, w = params.image_hw
    bits = np.asarray(bits, dtype=rdtype)
    if bits.ndim == 2:
        bits = bits[None]
    if bits.shape[1:] != (h, w):
        raise ValueError(f"batch {bits.shape} does not match native window {(h, w)}")
    spectrum = _spectrum_of_embedded(bits, g, cdtype, workers)
    bank_c = binarized_kernels(params, rdtype) if bank_override is None else bank_override
    bank = _unshift_bank(np.asarray(bank_c, dtype=rdtype))
    b, k = bits.shape[0], params.n_kernels
    fields = np.empty((b, k, h, w), dtype=cdtype)
    for k0 in range(0, k, kernel_chunk):
        k1 = min(k0 + kernel_chunk, k)
        filtered = spectrum[:, None] * bank[None, k0:k1]
        fields[:, k0:k1] = _inverse_to_window(filtered, g, (h, w), workers)
    raw = fields.real**2 + fields.imag**2
    feats, peak = _normalize_features(raw)
    cache = _ConvCache(spectrum, fields, raw, peak) if want_cache else None
    return feats, cache


def _conv_optical(
    bits: np.ndarray,
    params: ModelParams,
    config: OpticalConfig,
    noise: NoiseSpec | None,
    rng: np.random.Generator | None,
    kernel_parallelism: int = 2,
    workers: int = 1,
) -> np.ndarray:
    """Route through the physical-path model: diffraction-order kernel groups
    behind an ideal aperture, then camera capture. Noise-free output matches
    the digital path to floating-point precision."""
    g = params.grid
    h, w = params.image_hw
    bits = np.asarray(bits)
    if bits.ndim == 2:
        bits = bits[None]
    bank = binarized_kernels(params)
    r0, c0 = (g - h) // 2, (g - w) // 2
    if noise is not None and rng is None:
        rng = np.random.default_rng(noise.seed)
    out = np.empty((bits.shape[0], params.n_kernels, h, w))
    for i, img in enumerate(bits):
        frame = np.zeros((g, g), dtype=np.uint8)
        frame[r0 : r0 + h, c0 : c0 + w] = img
        plane = FieldPlane.from_bits(frame, config.dmd_pitch)
        maps = []
        for k0 in range(0, params.n_kernels, kernel_parallelism):
            group = list(bank[k0 : k0 + kernel_parallelism])
            aperture = ideal_aperture(range(len(group)), (g, g), config)
            maps.extend(multi_kernel_forward(plane, group, config, aperture, workers=workers))
        captured = np.stack([camera_capture(m, noise, rng=rng) for m in maps])
        out[i] = captured[:, r0 : r0 + h, c0 : c0 + w]
    feats, _ = _normalize_features(out)
    return feats


def conv_fourier_forward(
    bits: np.ndarray,
    params: ModelParams,
    mode: str = "digital",
    config: OpticalConfig | None = None,
    noise: NoiseSpec | None = None,
    rng: np.random.Generator | None = None,
    dtype: str = "float64",
    workers: int = 1,
) -> np.ndarray:
    """Feature maps of the Fourier convolution layer, one per kernel.

    Digital mode computes |IFT(FT(x) * B(w))|^2 per kernel and crops to the
    native image window; optical mode routes through the diffraction-order
    path plus camera model. With noise off the two agree to floating point.
    Outputs are gain-normalized per frame.
    """
    if mode == "digital":
        feats, _ = _conv_digital(bits, params, dtype=dtype, workers=workers)
        return feats
    if mode == "optical":
        if config is None:
            config = OpticalConfig()
        return _conv_optical(bits, params, config, noise, rng, workers=workers)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# head


def _maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    b, k, h, w = x.shape
    v = x.reshape(b, k, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        b, k, h // 2, w // 2, 4
    )
    idx = v.argmax(axis=-1)
    return np.take_along_axis(v, idx[..., None], axis=-1)[..., 0], idx


def _maxpool2_backward(grad: np.ndarray, idx: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    b, k, h, w = shape
    v = np.zeros((b, k, h // 2, w // 2, 4), dtype=grad.dtype)
    np.put_along_axis(v, idx[..., None], grad[..., None], axis=-1)
    return v.reshape(b, k, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, k, h, w)


def head_forward(features: np.ndarray, params: ModelParams) -> np.ndarray:
    """Max-pool 2x2 stride 2, flatten, FC1 + ReLU, FC2 -> logits."""
    if features.ndim == 3:
        features = features[None]
    b, k, h, w = features.shape
    if (k, h, w) != (params.n_kernels, *params.image_hw):
        raise ValueError(
            f"feature shape {(k, h, w)} does not match params "
            f"{(params.n_kernels, *params.image_hw)}"
        )
    pooled, _ = _maxpool2(features)
    flat = pooled.reshape(b, -1)
    hidden = np.maximum(flat @ params.fc1_w + params.fc1_b, 0.0)
    return hidden @ params.fc2_w + params.fc2_b


def _softmax_xent(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    n = len(labels)
    loss = -float(np.mean(np.log(p[np.arange(n), labels] + 1e-300)))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


# ---------------------------------------------------------------------------
# full forward/backward for stage-1 training


def _loss_and_grads(
    params: ModelParams,
    bits: np.ndarray,
    labels: np.ndarray,
    dtype: str,
    workers: int,
    bank_override: np.ndarray | None = None,
) -> tuple[float, float, dict[str, np.ndarray]]:
    feats, cache = _conv_digital(
        bits, params, dtype=dtype, workers=workers, want_cache=True, bank_override=bank_override
    )
    b, k, h, w = feats.shape
    pooled, pool_idx = _maxpool2(feats)
    flat = pooled.reshape(b, -1)
    pre1 = flat @ params.fc1_w + params.fc1_b
    hidden = np.maximum(pre1, 0.0)
    logits = hidden @ params.fc2_w + params.fc2_b
    loss, dlogits = _softmax_xent(logits, labels)
    acc = float(np.mean(logits.argmax(axis=1) == labels))

    grads: dict[str, np.ndarray] = {}
    grads["fc2_w"] = hidden.T @ dlogits
    grads["fc2_b"] = dlogits.sum(axis=0)
    dhidden = dlogits @ params.fc2_w.T
    dpre1 = dhidden * (pre1 > 0)
    grads["fc1_w"] = flat.T @ dpre1
    grads["fc1_b"] = dpre1.sum(axis=0)
    dflat = dpre1 @ params.fc1_w.T
    dpooled = dflat.reshape(pooled.shape)
    dfeats = _maxpool2_backward(dpooled, pool_idx, feats.shape)

    # Through the unit-max gain: y = raw / m with m the per-frame peak; the
    # peak pixel collects the -sum(dL/dy * y)/m term.
    peak = cache.peak
    draw = dfeats / peak[:, None, None, None]
    dpeak = -(dfeats * feats).reshape(b, -1).sum(axis=1) / peak
    flat_raw = cache.raw.reshape(b, -1)
    argmax = flat_raw.argmax(axis=1)
    draw_flat = draw.reshape(b, -1)
    draw_flat[np.arange(b), argmax] += dpeak
    draw = draw_flat.reshape(b, k, h, w).astype(cache.raw.dtype, copy=False)

    # |U|^2 and the unitary inverse: grad_F = FT(2 * U * dI) on the window.
    # Chunked over kernels to bound the full-grid intermediate.
    conj_spec = np.conj(cache.spectrum)
    dbank = np.empty((k, params.grid, params.grid), dtype=np.float64)
    chunk = 8
    for k0 in range(0, k, chunk):
        k1 = min(k0 + chunk, k)
        grad_fields = (2.0 * cache.window_fields[:, k0:k1]) * draw[:, k0:k1]
        grad_spec = _window_to_spectrum(grad_fields, params.grid, workers)
        dbank[k0:k1] = np.einsum("bkij,bij->kij", grad_spec, conj_spec).real
    dbank = scipy.fft.fftshift(dbank, axes=(-2, -1))  # back to centered coords
    dmasters = binarize_ste_grad(params.fourier_kernels, dbank)
    if params.highpass_mask_enabled:
        dmasters *= _highpass_mask(params.grid)
    grads["fourier_kernels"] = dmasters
    for name in ("fc1_w", "fc1_b", "fc2_w", "fc2_b"):
        grads[name] = grads[name].astype(np.float64)
    return loss, acc, grads


_PARAM_NAMES = ("fourier_kernels", "fc1_w", "fc1_b", "fc2_w", "fc2_b")


class _Momentum:
    def __init__(self, names: Sequence[str]):
        self.v = {n: None for n in names}

    def step(self, params: ModelParams, grads: dict, lr: float, momentum: float) -> ModelParams:
        new = {}
        for n in self.v:
            g = grads[n]
            self.v[n] = g if self.v[n] is None else momentum * self.v[n] + g
            new[n] = getattr(params, n) - lr * self.v[n]
        return replace(params, **new)


def train_stage1(
    dataset: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    params: ModelParams | None = None,
    n_classes: int = 10,
    workers: int = 1,
    log_every: int = 0,
) -> tuple[ModelParams, list[dict]]:
    """Joint noise-free training of kernels (through the STE) and the head.

    ``dataset`` is a (binary images, labels) pair from the quantization
    pipeline. Deterministic under ``config.seed``; returns the trained
    parameters and a per-epoch loss/accuracy trace.
    """
    bits, labels = dataset
    bits = np.asarray(bits)
    labels = np.asarray(labels)
    if params is None:
        params = init_params(
            seed=config.seed,
            grid=config.grid,
            image_hw=bits.shape[1:],
            n_classes=n_classes,
        )
    rng = np.random.default_rng(config.seed)
    opt = _Momentum(_PARAM_NAMES)
    trace: list[dict] = []
    n = len(bits)
    for epoch in range(config.epochs_stage1):
        order = rng.permutation(n)
        losses, accs = [], []
        for s in range(0, n, config.batch_size):
            sel = order[s : s + config.batch_size]
            loss, acc, grads = _loss_and_grads(
                params, bits[sel], labels[sel], config.dtype, workers
            )
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"stage 1 diverged at epoch {epoch}, step {s // config.batch_size}: "
                    f"loss={loss}"
                )
            params = opt.step(params, grads, config.lr_stage1, config.momentum)
            params = _apply_mask_to_masters(params)
            losses.append(loss)
            accs.append(acc)
            if log_every and (s // config.batch_size) % log_every == 0:
                print(
                    f"stage1 epoch {epoch} step {s // config.batch_size} "
                    f"loss {loss:.4f} acc {acc:.3f}",
                    flush=True,
                )
        trace.append(
            {
                "epoch": epoch,
                "split": "train",
                "loss": float(np.mean(losses)),
                "accuracy": float(np.mean(accs)),
            }
        )
    return params, trace


# ---------------------------------------------------------------------------
# stage 2: capture + head fine-tune


def capture_features(
    params: ModelParams,
    bits: np.ndarray,
    config: OpticalConfig,
    noise: NoiseSpec | None,
    seed: int = 0,
    workers: int = 1,
) -> np.ndarray:
    """Hardware-surrogate capture: optical-mode conv outputs under noise."""
    rng = np.random.default_rng(seed)
    return _conv_optical(bits, params, config, noise, rng, workers=workers)


def finetune_stage2(
    params: ModelParams,
    captured: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
) -> tuple[ModelParams, list[dict]]:
    """Retrain fc1/fc2 on captured conv outputs; kernels stay frozen."""
    features, labels = captured
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.shape[1:] != (params.n_kernels, *params.image_hw):
        raise ValueError(
            f"captured features {features.shape[1:]} do not match the stage-1 head "
            f"{(params.n_kernels, *params.image_hw)}"
        )
    kernels_before = params.fourier_kernels
    pooled, _ = _maxpool2(features)
    flat_all = pooled.reshape(len(features), -1)
    rng = np.random.default_rng(config.seed + 1)
    opt = _Momentum(("fc1_w", "fc1_b", "fc2_w", "fc2_b"))
    trace: list[dict] = []
    n = len(features)
    for epoch in range(config.epochs_stage2):
        order = rng.permutation(n)
        losses, accs = [], []
        for s in range(0, n, config.batch_size):
            sel = order[s : s + config.batch_size]
            flat = flat_all[sel]
            pre1 = flat @ params.fc1_w + params.fc1_b
            hidden = np.maximum(pre1, 0.0)
            logits = hidden @ params.fc2_w + params.fc2_b
            loss, dlogits = _softmax_xent(logits, labels[sel])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"stage 2 diverged at epoch {epoch}")
            dhidden = dlogits @ params.fc2_w.T
            dpre1 = dhidden * (pre1 > 0)
            grads = {
                "fc2_w": hidden.T @ dlogits,
                "fc2_b": dlogits.sum(axis=0),
                "fc1_w": flat.T @ dpre1,
                "fc1_b": dpre1.sum(axis=0),
            }
            params = opt.step(params, grads, config.lr_stage2, config.momentum)
            losses.append(loss)
            accs.append(float(np.mean(logits.argmax(axis=1) == labels[sel])))
        trace.append(
            {
                "epoch": epoch,
                "split": "stage2-train",
                "loss": float(np.mean(losses)),
                "accuracy": float(np.mean(accs)),
            }
        )
    assert params.fourier_kernels is kernels_before  # freeze contract
    return params, trace


# ---------------------------------------------------------------------------
# evaluation


def _predict_from_features(features: np.ndarray, params: ModelParams) -> np.ndarray:
    return head_forward(features, params).argmax(axis=1)


def predict(
    params: ModelParams,
    bits: np.ndarray,
    mode: str = "digital",
    config: OpticalConfig | None = None,
    noise: NoiseSpec | None = None,
    dtype: str = "float64",
    batch_size: int = 256,
    workers: int = 1,
) -> np.ndarray:
    out = []
    for s in range(0, len(bits), batch_size):
        feats = conv_fourier_forward(
            bits[s : s + batch_size], params, mode=mode, config=config, noise=noise,
            dtype=dtype, workers=workers,
        )
        out.append(_predict_from_features(feats, params))
    return np.concatenate(out)


def evaluate(
    params: ModelParams,
    dataset: tuple[np.ndarray, np.ndarray],
    mode: str = "digital",
    config: OpticalConfig | None = None,
    noise: NoiseSpec | None = None,
    dtype: str = "float32",
    batch_size: int = 256,
    workers: int = 1,
) -> EvalResult:
    """Top-1 accuracy and per-class confusion on a (bits, labels) split."""
    bits, labels = dataset
    preds = predict(params, bits, mode, config, noise, dtype, batch_size, workers)
    labels = np.asarray(labels)
    c = params.n_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    return EvalResult(float(np.mean(preds == labels)), confusion, len(labels))


def features_tiled(
    params: ModelParams,
    bits: np.ndarray,
    layout: TileLayout,
    config: OpticalConfig,
    noise: NoiseSpec | None = None,
    rng: np.random.Generator | None = None,
    workers: int = 1,
) -> np.ndarray:
    """Conv features of images processed as tiled multi-image frames.

    The layout's frame must equal the simulation grid. Each frame goes
    through the optical path once; per-image windows are extracted from every
    kernel's output and gain-normalized per image.
    """
    g = params.grid
    if layout.frame != (g, g):
        raise ValueError(f"layout frame {layout.frame} must match the {g}-px grid")
    h, w = params.image_hw
    bank = binarized_kernels(params)
    if noise is not None and rng is None:
        rng = np.random.default_rng(noise.seed)
    feats = np.empty((len(bits), params.n_kernels, h, w))
    cap = layout.capacity
    for s in range(0, len(bits), cap):
        group = bits[s : s + cap]
        frame = tile(list(group), layout)
        plane = FieldPlane.from_bits(frame, config.dmd_pitch)
        maps = []
        for k0 in range(0, params.n_kernels, 2):
            kern = list(bank[k0 : k0 + 2])
            aperture = ideal_aperture(range(len(kern)), (g, g), config)
            maps.extend(multi_kernel_forward(plane, kern, config, aperture, workers=workers))
        captured = np.stack([camera_capture(m, noise, rng=rng) for m in maps])
        windows = untile(captured, layout, count=len(group), content_shape=(h, w))
        for j, win in enumerate(windows):
            feats[s + j] = win
    normalized, _ = _normalize_features(feats)
    return normalized


def evaluate_tiled(
    params: ModelParams,
    dataset: tuple[np.ndarray, np.ndarray],
    layout: TileLayout,
    config: OpticalConfig,
    noise: NoiseSpec | None = None,
    workers: int = 1,
) -> EvalResult:
    """Tiled batch evaluation: frames of ``layout.capacity`` images at once."""
    bits, labels = dataset
    feats = features_tiled(params, bits, layout, config, noise=noise, workers=workers)
    preds = _predict_from_features(feats, params)
    labels = np.asarray(labels)
    c = params.n_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    return EvalResult(float(np.mean(preds == labels)), confusion, len(labels))


# ---------------------------------------------------------------------------
# checkpoints and traces

_CHECKPOINT_MAGIC = "opticonv-checkpoint"


def save_checkpoint(params: ModelParams, path: str | Path, stage: int, seed: int) -> Path:
    """Single-file checkpoint: one JSON header line, then raw little-endian
    float64 tensors in declared order. Round-trips bit-exactly."""
    path = Path(path)
    tensors = [(name, np.ascontiguousarray(getattr(params, name), dtype="<f8")) for name in _PARAM_NAMES]
    header = {
        "format": _CHECKPOINT_MAGIC,
        "version": 1,
        "stage": stage,
        "seed": seed,
        "highpass_mask_enabled": params.highpass_mask_enabled,
        "image_hw": list(params.image_hw),
        "tensors": [{"name": n, "shape": list(t.shape)} for n, t in tensors],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, t in tensors:
            f.write(t.tobytes())
    return path


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    path = Path(path)
    with open(path, "rb") as f:
        header = json.loads(f.readline())
        if header.get("format") != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a model checkpoint")
        arrays = {}
        for spec in header["tensors"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = f.read(8 * count)
            if len(buf) != 8 * count:
                raise ValueError(f"{path}: truncated tensor {spec['name']}")
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    params = ModelParams(
        fourier_kernels=arrays["fourier_kernels"],
        fc1_w=arrays["fc1_w"],
        fc1_b=arrays["fc1_b"],
        fc2_w=arrays["fc2_w"],
        fc2_b=arrays["fc2_b"],
        highpass_mask_enabled=bool(header["highpass_mask_enabled"]),
        image_hw=tuple(header["image_hw"]),
    )
    return params, header


def write_trace_csv(trace: Sequence[dict], path: str | Path) -> Path:
    path = Path(path)
    lines = ["epoch,split,loss,accuracy"]
    for row in trace:
        lines.append(f"{row['epoch']},{row['split']},{row['loss']:.6f},{row['accuracy']:.6f}")
    path.write_text("\n".join(lines) + "\n")
    return path
