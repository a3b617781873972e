"""Attribution mapping with a diffusion index, and the token/activation
memory profiler.

The attribution map integrates gradients of a box-summed SR output along the
straight path from a blurred baseline to the input; the diffusion index
summarizes how widely the attribution mass spreads (100 = perfectly uniform).
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np
import torch
from scipy import ndimage

from .config import ConfigError, ModelConfig, derive_token_counts, upsample_stages
from .network import MtvnetModel, analytic_param_count
from .svhat import SvhatLayer
from .tokenizer import CatInit, PatchEmbed, ShallowFeatureExtractor, crop_center

LAM_BASELINE_SIGMA = 4.0
MIN_LAM_STEPS = 8

Box = tuple[tuple[int, int], tuple[int, int], tuple[int, int]]


class AnalysisError(ValueError):
    pass


@dataclass
class LamMap:
    attribution: np.ndarray          # (H, W, D) over the LR input extent
    prediction_box: Box              # cuboid in SR output voxel coords
    di: float
    slice_average: np.ndarray        # (H, W) mean over the box's LR slices

    def __post_init__(self):
        if not np.all(np.isfinite(self.attribution)):
            raise AnalysisError("attribution contains non-finite values")
        if not 0.0 <= self.di <= 100.0:
            raise AnalysisError(f"diffusion index {self.di} outside [0, 100]")


def diffusion_index(attribution: np.ndarray) -> float:
    """100 * (1 - Gini) of the attribution values; 0 for an all-zero map."""
    x = np.asarray(attribution, dtype=np.float64).reshape(-1)
    if np.any(x < 0):
        raise AnalysisError("attribution must be nonnegative")
    total = x.sum()
    if total <= 0.0:
        return 0.0
    x = np.sort(x)
    n = x.size
    ranks = np.arange(1, n + 1, dtype=np.float64)
    gini = 2.0 * np.dot(ranks, x) / (n * total) - (n + 1.0) / n
    return float(100.0 * (1.0 - gini))


def blurred_baseline(data: np.ndarray, sigma: float = LAM_BASELINE_SIGMA) -> np.ndarray:
    return np.stack([
        ndimage.gaussian_filter(data[ch].astype(np.float64), sigma=sigma,
                                mode="reflect")
        for ch in range(data.shape[0])
    ]).astype(np.float32)


def lam_3d(torch_model, context: np.ndarray, prediction_box: Box,
           context_extents: list[int] | None = None, steps: int = 32,
           baseline_sigma: float = LAM_BASELINE_SIGMA) -> LamMap:
    """Integrated-gradient attribution of the box-summed SR output.

    `context` is the outermost LR crop (C, E, E, E); inner level crops are
    taken as center crops of it so the gradient accumulates on one input.
    The path runs from a Gaussian-blurred baseline to the input, sampled at
    alpha = k/steps for k = 1..steps.
    """
    if steps < MIN_LAM_STEPS:
        raise AnalysisError(f"steps must be >= {MIN_LAM_STEPS}, got {steps}")
    context = np.asarray(context, dtype=np.float32)
    baseline = blurred_baseline(context, baseline_sigma)
    delta = context - baseline
    extents = context_extents or getattr(torch_model, "context_extents",
                                         [context.shape[-1]])
    if extents[0] != context.shape[-1]:
        raise AnalysisError(
            f"context edge {context.shape[-1]} does not match outermost extent "
            f"{extents[0]}")
    base_t = torch.from_numpy(baseline[None])
    delta_t = torch.from_numpy(delta[None])
    box_sl = tuple(slice(lo, hi) for lo, hi in prediction_box)

    total_grad = torch.zeros_like(base_t)
    for k in range(1, steps + 1):
        x = (base_t + (k / steps) * delta_t).detach().requires_grad_(True)
        crops = [crop_center(x, e) if e != extents[0] else x for e in extents]
        out = torch_model(crops)
        target = out[(slice(None), slice(None)) + box_sl].sum()
        grad, = torch.autograd.grad(target, x)
        total_grad += grad
    avg_grad = (total_grad / steps)[0].numpy()
    attribution = np.abs(delta * avg_grad).sum(axis=0)

    scale = getattr(torch_model, "scale", 1)
    d_lo, d_hi = prediction_box[2]
    lo = d_lo // scale
    hi = max(lo + 1, -(-d_hi // scale))
    slice_average = attribution[:, :, lo:hi].mean(axis=-1)
    return LamMap(attribution=attribution, prediction_box=prediction_box,
                  di=diffusion_index(attribution), slice_average=slice_average)


# ---------------------------------------------------------------------------
# Token / activation / memory profiling
# ---------------------------------------------------------------------------

_HOOKED_TYPES = (ShallowFeatureExtractor, PatchEmbed, CatInit, SvhatLayer)
_HEAD_NAMES = ("token_deconv", "prerecon1", "prerecon2", "halve", "final")


def _numel(out) -> int:
    if isinstance(out, torch.Tensor):
        return out.numel()
    return sum(t.numel() for t in out if t is not None)


def measure_activation_elements(model: MtvnetModel,
                                contexts: list[torch.Tensor]) -> int:
    """Instrumented activation element count of one forward pass.

    Hooks fire on SFE / patch-embed / CAT-init outputs, every SVHAT layer
    output pair, the dense skip and gate projections, and every
    reconstruction stage.  The analytic formula mirrors this inventory.
    """
    counts = [0]
    handles = []

    def hook(_mod, _inp, out):
        counts[0] += _numel(out)

    for name, mod in model.named_modules():
        leaf_name = name.split(".")[-1]
        if isinstance(mod, _HOOKED_TYPES):
            handles.append(mod.register_forward_hook(hook))
        elif isinstance(mod, torch.nn.Conv3d) and (
                ".ite_skips." in name or ".cat_skips." in name
                or leaf_name in ("ite_gate", "cat_gate")):
            handles.append(mod.register_forward_hook(hook))
        elif name in _HEAD_NAMES or (name.startswith("up_stages.") and "." not in
                                     name[len("up_stages."):]):
            handles.append(mod.register_forward_hook(hook))
    try:
        with torch.no_grad():
            model(contexts)
    finally:
        for h in handles:
            h.remove()
    return counts[0]


def analytic_activation_elements(cfg: ModelConfig) -> int:
    """Closed-form counterpart of :func:`measure_activation_elements`."""
    c = cfg.embed_channels
    total = 0
    first_active = 0 if cfg.use_multicontext else len(cfg.levels) - 1
    for idx in range(first_active, len(cfg.levels)):
        lv = cfg.levels[idx]
        g3 = lv.token_edge ** 3
        gc3 = cfg.cat_grid_edge(idx) ** 3 if cfg.use_cat else 0
        total += c * lv.context_extent ** 3              # SFE features
        total += c * g3                                  # patch embedding
        total += c * gc3                                 # CAT init
        t_layers = lv.svhat_layers_per_block
        per_layer = c * g3 + c * gc3                     # SVHAT output pair
        per_layer += cfg.skip_channels * g3              # ITE skip
        if cfg.use_cat:
            per_layer += cfg.skip_channels * gc3         # CAT skip
        per_block = t_layers * per_layer + c * g3 + (c * gc3 if cfg.use_cat else 0)
        total += lv.num_dchat_blocks * per_block
    fin = cfg.finest
    e3 = fin.context_extent ** 3
    half = c // 2
    total += c * e3                                      # token deconvolution
    total += 2 * c * e3                                  # pre-reconstruction convs
    total += half * e3                                   # channel halving
    edge = fin.context_extent
    for r in upsample_stages(cfg.scale):
        total += half * r ** 3 * edge ** 3               # ICNR pre-convolution
        edge *= r
    total += cfg.in_channels * edge ** 3                 # output projection
    return total


@dataclass
class ProfileRow:
    resolution: int
    valid: bool
    reason: str
    levels: tuple                        # per-level TokenCounts
    n_ites_total: int
    params: int
    activation_elements: int
    activation_bytes: int
    measured_bytes: int | None = None


@dataclass
class MemoryProfile:
    config_name: str
    rows: list[ProfileRow]

    def to_csv(self) -> str:
        lines = ["resolution,valid,reason,levels,per_level_ites,n_ites_total,"
                 "params,activation_elements,activation_bytes,measured_bytes"]
        for r in self.rows:
            ites = "/".join(str(tc.n_ites) for tc in r.levels)
            measured = "" if r.measured_bytes is None else str(r.measured_bytes)
            lines.append(f"{r.resolution},{int(r.valid)},{r.reason},{len(r.levels)},"
                         f"{ites},{r.n_ites_total},{r.params},"
                         f"{r.activation_elements},{r.activation_bytes},{measured}")
        return "\n".join(lines) + "\n"


def scale_config_to_resolution(cfg: ModelConfig, resolution: int) -> ModelConfig:
    """Rescale all context extents so the outermost equals `resolution`."""
    levels = tuple(
        replace(lv, context_extent=resolution // 2 ** k)
        for k, lv in enumerate(cfg.levels))
    return replace(cfg, levels=levels)


def profile_memory(cfg: ModelConfig, resolutions: list[int], name: str = "model",
                   measure: bool = False) -> MemoryProfile:
    """Analytic token/parameter/activation accounting per input resolution.

    Invalid geometries are kept as marked rows.  With `measure`, a real
    forward pass is instrumented via the activation hooks (float32 bytes).
    """
    rows = []
    for res in resolutions:
        try:
            scaled = scale_config_to_resolution(cfg, res)
        except ConfigError as exc:
            rows.append(ProfileRow(res, False, str(exc), (), 0, 0, 0, 0))
            continue
        counts = derive_token_counts(scaled)
        elements = analytic_activation_elements(scaled)
        row = ProfileRow(
            resolution=res, valid=True, reason="", levels=counts,
            n_ites_total=sum(tc.n_ites for tc in counts),
            params=analytic_param_count(scaled),
            activation_elements=elements, activation_bytes=4 * elements)
        if measure:
            torch.manual_seed(0)
            model = MtvnetModel(scaled).eval()
            contexts = [torch.zeros(1, scaled.in_channels, e, e, e)
                        for e in model.context_extents]
            row.measured_bytes = 4 * measure_activation_elements(model, contexts)
        rows.append(row)
    return MemoryProfile(config_name=name, rows=rows)


# ---------------------------------------------------------------------------
# Plot rendering
# ---------------------------------------------------------------------------

def render_memory_curves(profiles: list[MemoryProfile], path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for profile in profiles:
        valid = [r for r in profile.rows if r.valid]
        ax.plot([r.resolution for r in valid],
                [r.activation_bytes / 2 ** 20 for r in valid],
                marker="o", label=profile.config_name)
    ax.set_xlabel("input resolution (voxels per edge)")
    ax.set_ylabel("activation memory (MiB)")
    ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    _save_figure(fig, path)


def render_lam_heatmap(lam: LamMap, path, scale: int = 1) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.patches as patches
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(lam.slice_average, cmap="inferno")
    (h0, h1), (w0, w1), _ = lam.prediction_box
    rect = patches.Rectangle((w0 / scale - 0.5, h0 / scale - 0.5),
                             (w1 - w0) / scale, (h1 - h0) / scale,
                             linewidth=1.5, edgecolor="red", facecolor="none")
    ax.add_patch(rect)
    ax.set_title(f"diffusion index {lam.di:.2f}")
    ax.set_axis_off()
    fig.tight_layout()
    _save_figure(fig, path)


def _save_figure(fig, path) -> None:
    from .volumes import atomic_write_bytes

    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120)
    import matplotlib.pyplot as plt
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())
