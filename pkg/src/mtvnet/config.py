"""Model and experiment configuration.

Configs are stored as flat ``key = value`` text files ('#' starts a comment,
blank lines are ignored).  Recognized keys:

    preset                          name of a built-in preset used for defaults
    level.<i>.context_extent        input cube edge (LR voxels) at level i (1 = coarsest)
    level.<i>.patch_size            voxels per token edge at level i
    level.<i>.num_dchat_blocks      DCHAT blocks at level i
    level.<i>.svhat_layers_per_block
    window_size                     attention window edge in tokens (M)
    cat_size                        carrier-token edge per window (c)
    embed_channels                  embedding channels (C_emb)
    skip_channels                   dense-skip compressed channels (C_skip)
    in_channels                     image channels
    scale                           upsampling factor
    heads                           attention heads
    mlp_ratio                       MLP hidden/embed ratio
    use_cyclic_shift / use_cat / use_multicontext   feature flags (true/false)
    batch_size, lr, beta1, beta2, total_iters, seed, loss
    milestones                      comma-separated LR-halving iterations
    milestone_fracs                 alternative: fractions of total_iters

Values from a config file override preset defaults; programmatic overrides
(e.g. CLI ``--set key=value``) override both.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

logger = logging.getLogger(__name__)

MAX_LEVELS = 3

# LR halving points as fractions of the full 100k-iteration schedule.
MILESTONE_FRACS = (0.50, 0.70, 0.85, 0.95)


class ConfigError(ValueError):
    """Raised when a config fails to parse or violates an invariant."""


@dataclass(frozen=True)
class LevelSpec:
    """Geometry and depth of one network level (coarsest first)."""

    context_extent: int
    patch_size: int
    num_dchat_blocks: int
    svhat_layers_per_block: int = 6

    @property
    def token_edge(self) -> int:
        return self.context_extent // self.patch_size


@dataclass(frozen=True)
class ModelConfig:
    levels: tuple[LevelSpec, ...]
    window_size: int = 8
    cat_size: int = 4
    embed_channels: int = 128
    skip_channels: int = 64
    in_channels: int = 1
    scale: int = 4
    heads: int = 4
    mlp_ratio: float = 2.0
    use_cyclic_shift: bool = True
    use_cat: bool = True
    use_multicontext: bool = True

    def __post_init__(self):
        validate_model_config(self)

    @property
    def cat_stride(self) -> int:
        """Kernel/stride of the CAT init convolution, floor(M/c)."""
        return self.window_size // self.cat_size

    @property
    def finest(self) -> LevelSpec:
        return self.levels[-1]

    def cat_grid_edge(self, level: int) -> int:
        return self.levels[level].token_edge // self.cat_stride

    def windows_per_edge(self, level: int) -> int:
        return self.levels[level].token_edge // self.window_size


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 5
    lr: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    milestones: tuple[int, ...] = (50_000, 70_000, 85_000, 95_000)
    total_iters: int = 100_000
    loss: str = "l1"
    seed: int = 0

    def __post_init__(self):
        validate_train_config(self)


@dataclass(frozen=True)
class TokenCounts:
    n_ites: int
    n_windows: int
    n_cats: int


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def validate_model_config(cfg: ModelConfig) -> None:
    _require(1 <= len(cfg.levels) <= MAX_LEVELS,
             f"level count must be in 1..{MAX_LEVELS}, got {len(cfg.levels)}")
    _require(cfg.window_size >= 1, "window_size must be >= 1")
    _require(1 <= cfg.cat_size <= cfg.window_size,
             f"cat_size must satisfy 1 <= c <= window_size, got c={cfg.cat_size}")
    if cfg.use_cyclic_shift:
        _require(cfg.window_size % 2 == 0,
                 f"window_size must be even with use_cyclic_shift, got {cfg.window_size}")
        _require(cfg.cat_size % 2 == 0,
                 f"cat_size must be even with use_cyclic_shift, got {cfg.cat_size}")
    _require(cfg.window_size % cfg.cat_size == 0,
             f"cat_size must divide window_size so each window owns cat_size^3 CATs "
             f"(M={cfg.window_size}, c={cfg.cat_size})")
    _require(cfg.embed_channels % cfg.heads == 0,
             f"embed_channels ({cfg.embed_channels}) must be divisible by heads ({cfg.heads})")
    _require(cfg.embed_channels % 2 == 0,
             "embed_channels must be even (channels are halved before upsampling)")
    _require(cfg.skip_channels >= 1, "skip_channels must be >= 1")
    _require(cfg.in_channels >= 1, "in_channels must be >= 1")
    _require(cfg.mlp_ratio > 0, "mlp_ratio must be > 0")
    _require(cfg.scale >= 1, "scale must be >= 1")
    _require(upsample_stages(cfg.scale) is not None,
             f"scale must factor into 2s and 3s, got {cfg.scale}")
    for i, lv in enumerate(cfg.levels):
        _require(lv.patch_size >= 1 and lv.context_extent >= 1,
                 f"level {i + 1}: extents must be positive")
        _require(1 <= lv.num_dchat_blocks <= 3,
                 f"level {i + 1}: num_dchat_blocks must be in 1..3, "
                 f"got {lv.num_dchat_blocks}")
        _require(lv.svhat_layers_per_block >= 1,
                 f"level {i + 1}: svhat_layers_per_block must be >= 1")
        _require(lv.context_extent % 2 == 0,
                 f"level {i + 1}: context_extent must be even for centered crops, "
                 f"got {lv.context_extent}")
        _require(lv.context_extent % lv.patch_size == 0,
                 f"level {i + 1}: context_extent {lv.context_extent} not divisible by "
                 f"patch_size {lv.patch_size}")
        _require(lv.token_edge % cfg.window_size == 0,
                 f"level {i + 1}: token grid edge {lv.token_edge} not divisible by "
                 f"window_size {cfg.window_size}")
    for i in range(len(cfg.levels) - 1):
        outer, inner = cfg.levels[i], cfg.levels[i + 1]
        _require(outer.context_extent == 2 * inner.context_extent,
                 f"level {i + 1} context_extent ({outer.context_extent}) must be twice "
                 f"level {i + 2}'s ({inner.context_extent})")


def validate_train_config(cfg: TrainConfig) -> None:
    _require(cfg.batch_size >= 1, "batch_size must be >= 1")
    _require(cfg.lr > 0, "lr must be > 0")
    _require(0 <= cfg.betas[0] < 1 and 0 <= cfg.betas[1] < 1,
             f"betas must be in [0, 1), got {cfg.betas}")
    _require(cfg.total_iters >= 1, "total_iters must be >= 1")
    _require(all(m2 > m1 for m1, m2 in zip(cfg.milestones, cfg.milestones[1:])),
             f"milestones must be strictly increasing, got {cfg.milestones}")
    _require(all(0 < m < cfg.total_iters for m in cfg.milestones),
             f"milestones must lie in (0, total_iters), got {cfg.milestones} "
             f"with total_iters={cfg.total_iters}")
    _require(cfg.loss == "l1", f"unsupported loss '{cfg.loss}'")
    _require(cfg.seed >= 0, "seed must be >= 0")


def upsample_stages(scale: int) -> list[int] | None:
    """Factor `scale` into a cascade of x2 then x3 pixel-shuffle stages."""
    if scale < 1:
        return None
    stages = []
    rem = scale
    while rem % 2 == 0:
        stages.append(2)
        rem //= 2
    while rem % 3 == 0:
        stages.append(3)
        rem //= 3
    return stages if rem == 1 else None


def scaled_milestones(total_iters: int, fracs=MILESTONE_FRACS) -> tuple[int, ...]:
    """LR-halving iterations at the standard schedule fractions of
    `total_iters` (deduplicated, so tiny runs stay valid)."""
    ms = dict.fromkeys(int(math.floor(f * total_iters)) for f in fracs)
    return tuple(m for m in ms if 0 < m < total_iters)


def derive_token_counts(cfg: ModelConfig) -> tuple[TokenCounts, ...]:
    """Per-level ITE/window/CAT counts implied by the geometry."""
    out = []
    for lv in cfg.levels:
        g = lv.token_edge
        nw = (g // cfg.window_size) ** 3
        out.append(TokenCounts(n_ites=g ** 3, n_windows=nw,
                               n_cats=nw * cfg.cat_size ** 3))
    return tuple(out)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

def _mri_train(total_iters: int = 100_000) -> TrainConfig:
    return TrainConfig(batch_size=5, lr=2e-4, betas=(0.9, 0.999),
                       milestones=scaled_milestones(total_iters),
                       total_iters=total_iters, loss="l1", seed=0)


def preset(name: str) -> tuple[ModelConfig, TrainConfig]:
    """Built-in configurations.

    L1/L2/L3 are the full-scale single-, two- and three-level setups
    (C_emb=128, C_skip=64, M=8, c=4, six SVHAT layers per block).  'desk'
    is a small CPU-friendly configuration used by the test suite.
    """
    if name == "L1":
        model = ModelConfig(levels=(LevelSpec(32, 2, 3),), scale=4)
        return model, _mri_train()
    if name == "L2":
        model = ModelConfig(levels=(LevelSpec(64, 4, 2), LevelSpec(32, 2, 3)), scale=4)
        return model, _mri_train()
    if name == "L3":
        model = ModelConfig(
            levels=(LevelSpec(128, 8, 1), LevelSpec(64, 4, 2), LevelSpec(32, 2, 3)),
            scale=4)
        return model, _mri_train()
    if name == "desk":
        model = ModelConfig(levels=(LevelSpec(16, 2, 1, svhat_layers_per_block=2),),
                            window_size=4, cat_size=2, embed_channels=32,
                            skip_channels=16, heads=4, scale=2)
        train = TrainConfig(batch_size=4, lr=1e-3, betas=(0.9, 0.999),
                            milestones=scaled_milestones(2000),
                            total_iters=2000, loss="l1", seed=0)
        return model, train
    raise ConfigError(f"unknown preset '{name}' (known: L1, L2, L3, desk)")


PRESET_NAMES = ("L1", "L2", "L3", "desk")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_BOOL_WORDS = {"true": True, "1": True, "yes": True,
               "false": False, "0": False, "no": False}


def _parse_bool(key: str, raw: str) -> bool:
    try:
        return _BOOL_WORDS[raw.strip().lower()]
    except KeyError:
        raise ConfigError(f"{key}: expected true/false, got '{raw}'") from None


def _parse_int(key: str, raw: str) -> int:
    try:
        return int(raw.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got '{raw}'") from None


def _parse_float(key: str, raw: str) -> float:
    try:
        return float(raw.strip())
    except ValueError:
        raise ConfigError(f"{key}: expected a number, got '{raw}'") from None


def _parse_int_list(key: str, raw: str) -> tuple[int, ...]:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(_parse_int(key, part) for part in raw.split(","))


_MODEL_INT_KEYS = {"window_size", "cat_size", "embed_channels", "skip_channels",
                   "in_channels", "scale", "heads"}
_MODEL_BOOL_KEYS = {"use_cyclic_shift", "use_cat", "use_multicontext"}
_LEVEL_FIELDS = {"context_extent", "patch_size", "num_dchat_blocks",
                 "svhat_layers_per_block"}
_TRAIN_INT_KEYS = {"batch_size", "total_iters", "seed"}


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse flat key/value text into an ordered dict of raw strings."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{line.strip()}'")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'")
        out[key] = value.strip()
    return out


def configs_from_items(items: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    """Build validated configs from raw key/value pairs."""
    items = dict(items)
    base_name = items.pop("preset", None)
    if base_name is not None:
        model, train = preset(base_name)
    else:
        model, train = ModelConfig(levels=(LevelSpec(32, 2, 3),)), TrainConfig()

    level_fields: dict[int, dict[str, int]] = {}
    model_kw: dict[str, object] = {}
    train_kw: dict[str, object] = {}
    betas = list(train.betas)
    milestone_fracs: tuple[float, ...] | None = None

    for key, raw in items.items():
        if key.startswith("level."):
            parts = key.split(".")
            if len(parts) != 3 or parts[2] not in _LEVEL_FIELDS:
                raise ConfigError(f"unknown level key '{key}'")
            idx = _parse_int(key, parts[1])
            if idx < 1:
                raise ConfigError(f"{key}: level indices start at 1")
            level_fields.setdefault(idx, {})[parts[2]] = _parse_int(key, raw)
        elif key in _MODEL_INT_KEYS:
            model_kw[key] = _parse_int(key, raw)
        elif key in _MODEL_BOOL_KEYS:
            model_kw[key] = _parse_bool(key, raw)
        elif key == "mlp_ratio":
            model_kw[key] = _parse_float(key, raw)
        elif key in _TRAIN_INT_KEYS:
            train_kw[key] = _parse_int(key, raw)
        elif key == "lr":
            train_kw[key] = _parse_float(key, raw)
        elif key == "beta1":
            betas[0] = _parse_float(key, raw)
        elif key == "beta2":
            betas[1] = _parse_float(key, raw)
        elif key == "milestones":
            train_kw[key] = _parse_int_list(key, raw)
        elif key == "milestone_fracs":
            milestone_fracs = tuple(_parse_float(key, p) for p in raw.split(","))
        elif key == "loss":
            train_kw[key] = raw
        else:
            raise ConfigError(f"unknown config key '{key}'")

    if level_fields:
        indices = sorted(level_fields)
        if indices != list(range(1, len(indices) + 1)):
            raise ConfigError(f"level indices must be contiguous from 1, got {indices}")
        levels = []
        for idx in indices:
            fields_ = level_fields[idx]
            missing = {"context_extent", "patch_size", "num_dchat_blocks"} - set(fields_)
            if missing:
                raise ConfigError(f"level {idx}: missing {sorted(missing)}")
            levels.append(LevelSpec(**fields_))
        model_kw["levels"] = tuple(levels)

    model = replace(model, **model_kw)
    train_kw["betas"] = (betas[0], betas[1])
    if milestone_fracs is not None:
        if "milestones" in train_kw:
            raise ConfigError("specify milestones or milestone_fracs, not both")
        total = train_kw.get("total_iters", train.total_iters)
        train_kw["milestones"] = scaled_milestones(int(total), milestone_fracs)
    train = replace(train, **train_kw)
    return model, train


def load_config(path, overrides: dict[str, str] | None = None) -> tuple[ModelConfig, TrainConfig]:
    """Load configs from a flat key/value file, applying optional overrides."""
    with open(path, "r", encoding="utf-8") as fh:
        items = parse_kv_text(fh.read())
    for key, value in (overrides or {}).items():
        items[key] = value
    model, train = configs_from_items(items)
    logger.info("resolved config from %s:\n%s", path, render_config(model, train))
    return model, train


def render_config(model: ModelConfig, train: TrainConfig) -> str:
    """Canonical flat-text form; load(render(...)) reproduces the configs."""
    lines = []
    for i, lv in enumerate(model.levels, start=1):
        lines.append(f"level.{i}.context_extent = {lv.context_extent}")
        lines.append(f"level.{i}.patch_size = {lv.patch_size}")
        lines.append(f"level.{i}.num_dchat_blocks = {lv.num_dchat_blocks}")
        lines.append(f"level.{i}.svhat_layers_per_block = {lv.svhat_layers_per_block}")
    lines.append(f"window_size = {model.window_size}")
    lines.append(f"cat_size = {model.cat_size}")
    lines.append(f"embed_channels = {model.embed_channels}")
    lines.append(f"skip_channels = {model.skip_channels}")
    lines.append(f"in_channels = {model.in_channels}")
    lines.append(f"scale = {model.scale}")
    lines.append(f"heads = {model.heads}")
    lines.append(f"mlp_ratio = {model.mlp_ratio!r}")
    lines.append(f"use_cyclic_shift = {str(model.use_cyclic_shift).lower()}")
    lines.append(f"use_cat = {str(model.use_cat).lower()}")
    lines.append(f"use_multicontext = {str(model.use_multicontext).lower()}")
    lines.append(f"batch_size = {train.batch_size}")
    lines.append(f"lr = {train.lr!r}")
    lines.append(f"beta1 = {train.betas[0]!r}")
    lines.append(f"beta2 = {train.betas[1]!r}")
    lines.append(f"milestones = {','.join(str(m) for m in train.milestones)}")
    lines.append(f"total_iters = {train.total_iters}")
    lines.append(f"loss = {train.loss}")
    lines.append(f"seed = {train.seed}")
    return "\n".join(lines) + "\n"


def save_config(model: ModelConfig, train: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(render_config(model, train))
