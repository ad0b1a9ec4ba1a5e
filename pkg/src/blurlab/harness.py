"""Config-driven experiment runner.

A run pretrains a baseline classifier on sharp images, fine-tunes it
under each configured blur distribution, evaluates every model over the
condition x scale grid, and writes a report directory: CSV tables, PGM
invariance heatmaps, PNG charts, checkpoints, and a manifest.

Reports are deterministic: numbers come out byte-identical for the same
config file, so reruns can be diffed.  The report directory is written
to a temporary sibling and renamed into place at the end; a crashed run
never leaves a half-written report at the final path.
"""

from __future__ import annotations

import configparser
import hashlib
import os
import re
import shutil
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .dataset import (
    NUM_CLASSES,
    SEG_CLASSES,
    generate_shapeseg,
    generate_shapestex,
)
from .errors import ConfigError
from .imaging import (
    Image,
    assign_kernel,
    center_crop,
    convolve,
    quantize8,
    resize,
    save_image,
)
from .metrics import (
    MiouAccumulator,
    boundary_band,
    hamming_invariance_map,
    mean_entropy,
    mean_true_cross_entropy,
    topk_accuracy,
)
from .net import (
    BlurDistribution,
    Model,
    ShakeBank,
    TrainPipeline,
    TrainSchedule,
    TrainStage,
    blurnet_s,
    build_model,
    finetune,
    forward,
    hypercolumn_features,
    log_softmax,
    save_checkpoint,
    softmax,
    train,
)
from .psf import Kernel, box_kernel, delta_kernel, disk_kernel, gaussian_kernel
from .seeding import derive_seed, generator

__all__ = [
    "ExperimentConfig",
    "FinetuneSetting",
    "load_config",
    "run_experiment",
    "emit_plots",
]

_BASELINE = "baseline"
_EVAL_CHUNK = 50


# ---------------------------------------------------------------------------
# Config


@dataclass(frozen=True)
class FinetuneSetting:
    name: str
    components: str
    stages: tuple[TrainStage, ...]
    batch_size: int
    momentum: float
    pre_scales: tuple[int, ...]


@dataclass(frozen=True)
class ExperimentConfig:
    path: str
    sha256: str
    train_count: int
    val_count: int
    render_size: int
    architecture: str
    pretrain_stages: tuple[TrainStage, ...]
    pretrain_batch: int
    pretrain_momentum: float
    pretrain_scales: tuple[int, ...]
    finetunes: tuple[FinetuneSetting, ...]
    canonical: int
    net_scale: int
    crop: int
    conditions: tuple[str, ...]
    scales: tuple[tuple[int, ...], ...]
    metrics: tuple[int, ...]  # top-k values
    entropy_scale: int
    shake_eval_base: int
    shake_eval_size: int
    shake_train_base: int
    shake_train_size: int
    invariance_pairs: int
    invariance_condition: str
    invariance_scale: int
    invariance_models: tuple[str, ...]
    seg_train_count: int
    seg_val_count: int
    seg_conditions: tuple[str, ...]
    seg_pixels_per_image: int
    seg_stages: tuple[TrainStage, ...]
    seg_batch: int
    seg_momentum: float
    seg_distance: float
    master_seed: int
    out_dir: str


def _parse_stages(text: str, where: str) -> tuple[TrainStage, ...]:
    """Parse '2@0.001,1@0.0001' into TrainStage tuples."""
    stages = []
    for part in _split(text):
        m = re.fullmatch(r"(\d+)@([0-9.eE+-]+)", part)
        if not m:
            raise ConfigError(f"{where}: bad stage {part!r}, expected EPOCHS@LR")
        stages.append(TrainStage(int(m.group(1)), float(m.group(2))))
    if not stages:
        raise ConfigError(f"{where}: empty stage list")
    return tuple(stages)


def _split(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


_CONDITION_RE = re.compile(r"^(sharp|d[1-9]\d*|box[hv]\d+|gauss[0-9.]+|shake)$")


def condition_kernel(token: str, eval_bank: ShakeBank | None = None):
    """Map a condition token to a kernel, or to a per-item callable for banks."""
    if token == "sharp":
        return delta_kernel()
    if token.startswith("d") and token[1:].isdigit():
        return disk_kernel(float(token[1:]))
    m = re.fullmatch(r"box([hv])(\d+)", token)
    if m:
        return box_kernel(int(m.group(2)), m.group(1))
    m = re.fullmatch(r"gauss([0-9.]+)", token)
    if m:
        return gaussian_kernel(float(m.group(1)))
    if token == "shake":
        if eval_bank is None:
            raise ConfigError("shake condition needs an evaluation bank")
        def per_item(item_id: int) -> Kernel:
            return eval_bank.kernel(assign_kernel(item_id, len(eval_bank)))
        return per_item
    raise ConfigError(f"unknown blur condition {token!r}")


def parse_components(text: str, train_bank: ShakeBank, where: str) -> BlurDistribution:
    """Parse 'sharp=0.2,d1=0.2,shake=0.6' into a BlurDistribution."""
    comps = []
    for part in _split(text):
        if "=" not in part:
            raise ConfigError(f"{where}: bad component {part!r}, expected NAME=WEIGHT")
        name, _, wtext = part.partition("=")
        name = name.strip()
        try:
            weight = float(wtext)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad weight in {part!r}") from exc
        if name == "sharp":
            source = None
        elif name == "shake":
            source = train_bank
        else:
            source = condition_kernel(name)
            if not isinstance(source, Kernel):
                raise ConfigError(f"{where}: {name!r} is not usable in a mixture")
        comps.append((source, weight))
    if not comps:
        raise ConfigError(f"{where}: no components")
    try:
        return BlurDistribution(comps)
    except Exception as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _parse_scales(text: str, where: str) -> tuple[tuple[int, ...], ...]:
    cells = []
    for part in _split(text):
        try:
            cells.append(tuple(int(s) for s in part.split("+")))
        except ValueError as exc:
            raise ConfigError(f"{where}: bad scale cell {part!r}") from exc
    if not cells:
        raise ConfigError(f"{where}: empty scale list")
    return tuple(cells)


def scale_cell_name(cell: tuple[int, ...]) -> str:
    return "+".join(str(s) for s in cell)


class _Section:
    """One config section with typed, error-annotated accessors."""

    def __init__(self, parser: configparser.ConfigParser, name: str):
        self.name = name
        self.data = dict(parser[name]) if parser.has_section(name) else {}

    def get(self, key: str, default=None, required: bool = False) -> str:
        if key in self.data:
            return self.data[key]
        if required:
            raise ConfigError(f"[{self.name}] missing required key {key!r}")
        return default

    def get_int(self, key: str, default=None, required: bool = False, minimum=None) -> int:
        raw = self.get(key, None, required)
        if raw is None:
            value = default
        else:
            try:
                value = int(raw)
            except ValueError as exc:
                raise ConfigError(f"[{self.name}] {key} = {raw!r} is not an integer") from exc
        if minimum is not None and value < minimum:
            raise ConfigError(f"[{self.name}] {key} must be >= {minimum}, got {value}")
        return value

    def get_float(self, key: str, default=None) -> float:
        raw = self.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError as exc:
            raise ConfigError(f"[{self.name}] {key} = {raw!r} is not a number") from exc


def load_config(path: str) -> ExperimentConfig:
    """Parse and validate a flat key=value config file."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    sha = hashlib.sha256(raw).hexdigest()
    parser = configparser.ConfigParser(delimiters=("=",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(raw.decode("utf-8"))
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc

    ds = _Section(parser, "dataset")
    model = _Section(parser, "model")
    pre = _Section(parser, "pretrain")
    ft_defaults = _Section(parser, "finetune_defaults")
    degrade = _Section(parser, "degrade")
    ev = _Section(parser, "eval")
    shake = _Section(parser, "shake")
    inv = _Section(parser, "invariance")
    seg = _Section(parser, "segmentation")
    run = _Section(parser, "run")

    arch = model.get("architecture", "blurnet-s")
    if arch != "blurnet-s":
        raise ConfigError(f"[model] unknown architecture {arch!r}")

    canonical = degrade.get_int("canonical", 96, minimum=32)
    net_scale = degrade.get_int("net_scale", 64, minimum=8)
    crop = degrade.get_int("crop", 64, minimum=8)

    def scales_of(section: _Section, key: str, default: str) -> tuple[int, ...]:
        vals = tuple(int(v) for v in _split(section.get(key, default)))
        if not vals:
            raise ConfigError(f"[{section.name}] {key} is empty")
        bad = [v for v in vals if round(v * net_scale / canonical) < crop]
        if bad:
            raise ConfigError(
                f"[{section.name}] {key}: pre-scale {bad[0]} leaves less than a "
                f"{crop}px crop after the {net_scale}/{canonical} resize"
            )
        return vals

    pretrain_scales = scales_of(pre, "pre_scales", str(canonical))

    shake_eval_base = shake.get_int("eval_bank_base", 1_000_000)
    shake_eval_size = shake.get_int("eval_bank_size", 100, minimum=1)
    shake_train_base = shake.get_int("train_bank_base", 2_000_000)
    shake_train_size = shake.get_int("train_bank_size", 10_000, minimum=1)
    eval_overlap = range(
        max(shake_eval_base, shake_train_base),
        min(shake_eval_base + shake_eval_size, shake_train_base + shake_train_size),
    )
    if len(eval_overlap) > 0:
        raise ConfigError("[shake] evaluation and training banks overlap")

    conditions = tuple(_split(ev.get("conditions", "sharp,d1,d2,d3,d4")))
    for token in conditions:
        if not _CONDITION_RE.fullmatch(token):
            raise ConfigError(f"[eval] unknown condition {token!r}")
    scales = _parse_scales(ev.get("scales", "64"), "[eval] scales")
    for cell in scales:
        for s in cell:
            if s < crop:
                raise ConfigError(
                    f"[eval] scale {s} is below the model crop {crop}"
                )
    metrics = []
    for token in _split(ev.get("metrics", "top1")):
        m = re.fullmatch(r"top(\d+)", token)
        if not m or not 1 <= int(m.group(1)) <= NUM_CLASSES:
            raise ConfigError(f"[eval] unknown metric {token!r}")
        metrics.append(int(m.group(1)))
    entropy_scale = ev.get_int("entropy_scale", net_scale)
    if entropy_scale < crop:
        raise ConfigError("[eval] entropy_scale is below the model crop")

    # fine-tune settings: sections named "finetune NAME", in file order
    dummy_bank = ShakeBank([0])  # components validated for syntax only here
    finetunes = []
    for section_name in parser.sections():
        if not section_name.startswith("finetune "):
            continue
        name = section_name[len("finetune "):].strip()
        if not re.fullmatch(r"[A-Za-z0-9_.-]+", name):
            raise ConfigError(f"bad finetune setting name {name!r}")
        if name == _BASELINE:
            raise ConfigError(f"finetune setting may not be named {_BASELINE!r}")
        sec = _Section(parser, section_name)
        components = sec.get("components", required=True)
        parse_components(components, dummy_bank, f"[{section_name}]")
        finetunes.append(
            FinetuneSetting(
                name=name,
                components=components,
                stages=_parse_stages(
                    sec.get("stages", ft_defaults.get("stages", "2@0.001,1@0.0001")),
                    f"[{section_name}] stages",
                ),
                batch_size=int(sec.get("batch_size", ft_defaults.get("batch_size", "128"))),
                momentum=float(sec.get("momentum", ft_defaults.get("momentum", "0.9"))),
                pre_scales=scales_of(
                    sec if "pre_scales" in sec.data else ft_defaults,
                    "pre_scales",
                    str(canonical),
                ),
            )
        )
    names = [f.name for f in finetunes]
    if len(set(names)) != len(names):
        raise ConfigError("duplicate finetune setting names")

    inv_models = tuple(_split(inv.get("models", _BASELINE)))
    known = {_BASELINE, *names}
    for m in inv_models:
        if m not in known:
            raise ConfigError(f"[invariance] unknown model {m!r}")
    inv_condition = inv.get("condition", "d4")
    if not _CONDITION_RE.fullmatch(inv_condition):
        raise ConfigError(f"[invariance] unknown condition {inv_condition!r}")

    seg_conditions = tuple(_split(seg.get("conditions", "sharp,d1,d2,d3,d4")))
    for token in seg_conditions:
        if not _CONDITION_RE.fullmatch(token) or token == "shake":
            raise ConfigError(f"[segmentation] unsupported condition {token!r}")

    config = ExperimentConfig(
        path=os.path.abspath(path),
        sha256=sha,
        train_count=ds.get_int("train_count", 2000, minimum=NUM_CLASSES),
        val_count=ds.get_int("val_count", 1000, minimum=NUM_CLASSES),
        render_size=ds.get_int("render_size", 96, minimum=32),
        architecture=arch,
        pretrain_stages=_parse_stages(pre.get("stages", "10@0.01"), "[pretrain] stages"),
        pretrain_batch=pre.get_int("batch_size", 8, minimum=1),
        pretrain_momentum=pre.get_float("momentum", 0.9),
        pretrain_scales=pretrain_scales,
        finetunes=tuple(finetunes),
        canonical=canonical,
        net_scale=net_scale,
        crop=crop,
        conditions=conditions,
        scales=scales,
        metrics=tuple(metrics),
        entropy_scale=entropy_scale,
        shake_eval_base=shake_eval_base,
        shake_eval_size=shake_eval_size,
        shake_train_base=shake_train_base,
        shake_train_size=shake_train_size,
        invariance_pairs=inv.get_int("pairs", 100, minimum=1),
        invariance_condition=inv_condition,
        invariance_scale=inv.get_int("scale", net_scale),
        invariance_models=inv_models,
        seg_train_count=seg.get_int("train_count", 300, minimum=0),
        seg_val_count=seg.get_int("val_count", 100, minimum=0),
        seg_conditions=seg_conditions,
        seg_pixels_per_image=seg.get_int("pixels_per_image", 128, minimum=1),
        seg_stages=_parse_stages(seg.get("stages", "4@0.5"), "[segmentation] stages"),
        seg_batch=seg.get_int("batch_size", 256, minimum=1),
        seg_momentum=seg.get_float("momentum", 0.9),
        seg_distance=seg.get_float("distance", 4.0),
        master_seed=run.get_int("master_seed", required=True),
        out_dir=run.get("out_dir", "out/experiment"),
    )
    if config.invariance_scale < config.crop:
        raise ConfigError("[invariance] scale is below the model crop")
    return config


# ---------------------------------------------------------------------------
# Runner


class _Manifest:
    def __init__(self):
        self.lines: list[str] = []
        self.failed: list[str] = []

    def record(self, key: str, value: str) -> None:
        self.lines.append(f"{key} = {value}")

    def stage_ok(self, name: str, seconds: float) -> None:
        self.lines.append(f"stage {name} = OK {seconds:.2f}s")

    def stage_failed(self, name: str, exc: BaseException) -> None:
        self.failed.append(name)
        self.lines.append(f"stage {name} = FAILED {type(exc).__name__}: {exc}")

    def stage_skipped(self, name: str, why: str) -> None:
        self.lines.append(f"stage {name} = SKIPPED ({why})")

    def write(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.lines) + "\n")


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def _write_csv(path: str, header: list[str], rows: list[list[str]]) -> None:
    # RFC-4180-style: our fields never contain commas/quotes, so plain join
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


class Experiment:
    """A single run's state: datasets, banks, models, cached predictions."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        self.eval_bank = ShakeBank.from_range(config.shake_eval_base, config.shake_eval_size)
        self.train_bank = ShakeBank.from_range(config.shake_train_base, config.shake_train_size)
        self.train_examples = None
        self.val_examples = None
        self.models: dict[str, Model] = {}
        self.results: dict[tuple[str, str, int], np.ndarray] = {}  # (model, cond, scale) -> logp
        self.val_labels: np.ndarray | None = None

    # -- stages -------------------------------------------------------------

    def generate_data(self) -> None:
        cfg = self.config
        seed = derive_seed(cfg.master_seed, "dataset")
        self.train_examples = generate_shapestex(
            cfg.train_count, cfg.render_size, seed=seed, split="train"
        )
        self.val_examples = generate_shapestex(
            cfg.val_count, cfg.render_size, seed=seed, split="val"
        )
        self.val_labels = np.array([ex.label for ex in self.val_examples])

    def pretrain(self) -> None:
        cfg = self.config
        model = build_model(blurnet_s(NUM_CLASSES), seed=derive_seed(cfg.master_seed, "init"))
        schedule = TrainSchedule(
            stages=cfg.pretrain_stages,
            batch_size=cfg.pretrain_batch,
            momentum=cfg.pretrain_momentum,
            seed=derive_seed(cfg.master_seed, "pretrain"),
        )
        pipeline = TrainPipeline(cfg.pretrain_scales, cfg.canonical, cfg.net_scale, cfg.crop)
        result = train(
            model, self.train_examples, BlurDistribution.sharp_only(), schedule, pipeline
        )
        self.models[_BASELINE] = result.model

    def run_finetune(self, setting: FinetuneSetting) -> None:
        cfg = self.config
        blur = parse_components(setting.components, self.train_bank, setting.name)
        schedule = TrainSchedule(
            stages=setting.stages,
            batch_size=setting.batch_size,
            momentum=setting.momentum,
            seed=derive_seed(cfg.master_seed, "finetune", setting.name),
        )
        pipeline = TrainPipeline(setting.pre_scales, cfg.canonical, cfg.net_scale, cfg.crop)
        result = finetune(
            self.models[_BASELINE], self.train_examples, blur, schedule, pipeline
        )
        self.models[setting.name] = result.model

    # -- evaluation ---------------------------------------------------------

    def _degrade_val_at_canonical(self, token: str) -> list[Image]:
        """Blur every val image at the canonical scale (cached per call)."""
        cfg = self.config
        source = condition_kernel(token, self.eval_bank)
        out = []
        for ex in self.val_examples:
            kernel = source(ex.item_id) if callable(source) else source
            img = resize(ex.image, cfg.canonical)
            out.append(quantize8(convolve(img, kernel)))
        return out

    def _logprobs(self, model: Model, crops: list[Image]) -> np.ndarray:
        rows = []
        for start in range(0, len(crops), _EVAL_CHUNK):
            logits = forward(model, crops[start : start + _EVAL_CHUNK])
            rows.append(log_softmax(logits))
        return np.concatenate(rows, axis=0)

    def evaluate_grid(self) -> None:
        cfg = self.config
        single_scales = sorted({s for cell in cfg.scales for s in cell})
        if cfg.entropy_scale not in single_scales:
            single_scales.append(cfg.entropy_scale)
        model_names = [_BASELINE] + [f.name for f in cfg.finetunes]
        for token in cfg.conditions:
            blurred = self._degrade_val_at_canonical(token)
            for scale in single_scales:
                crops = [center_crop(resize(b, scale), cfg.crop) for b in blurred]
                for name in model_names:
                    if name not in self.models:
                        continue
                    self.results[(name, token, scale)] = self._logprobs(
                        self.models[name], crops
                    )

    def cell_probs(self, model_name: str, token: str, cell: tuple[int, ...]) -> np.ndarray:
        logps = [self.results[(model_name, token, s)] for s in cell]
        return softmax(np.mean(logps, axis=0))

    # -- tables -------------------------------------------------------------

    def accuracy_rows(self) -> list[list[str]]:
        cfg = self.config
        rows = []
        for name in [_BASELINE] + [f.name for f in cfg.finetunes]:
            if name not in self.models:
                continue
            for token in cfg.conditions:
                for cell in cfg.scales:
                    probs = self.cell_probs(name, token, cell)
                    for k in cfg.metrics:
                        value = topk_accuracy(list(probs), self.val_labels, k)
                        rows.append(
                            [name, token, scale_cell_name(cell), f"top{k}", _fmt(value)]
                        )
        return rows

    def entropy_rows(self) -> list[list[str]]:
        cfg = self.config
        rows = []
        for name in [_BASELINE] + [f.name for f in cfg.finetunes]:
            if name not in self.models:
                continue
            for token in cfg.conditions:
                probs = softmax(self.results[(name, token, cfg.entropy_scale)])
                rows.append([name, token, "entropy", _fmt(mean_entropy(list(probs)))])
                rows.append(
                    [
                        name,
                        token,
                        "cross_entropy",
                        _fmt(mean_true_cross_entropy(list(probs), self.val_labels)),
                    ]
                )
        return rows

    def scale_rows(self) -> list[list[str]]:
        """Baseline-only condition x scale pivot (the scale-interaction table)."""
        cfg = self.config
        rows = []
        for token in cfg.conditions:
            for cell in cfg.scales:
                probs = self.cell_probs(_BASELINE, token, cell)
                value = topk_accuracy(list(probs), self.val_labels, 1)
                rows.append([token, scale_cell_name(cell), _fmt(value)])
        return rows

    # -- invariance ---------------------------------------------------------

    def invariance_outputs(self):
        """Mean per-tap Hamming distances and mean resampled maps per model."""
        cfg = self.config
        count = min(cfg.invariance_pairs, len(self.val_examples))
        kernel = condition_kernel(cfg.invariance_condition, self.eval_bank)
        rows = []
        heatmaps = {}
        for name in cfg.invariance_models:
            if name not in self.models:
                continue
            model = self.models[name]
            tap_sums: dict[str, float] = {}
            map_sums: dict[str, np.ndarray] = {}
            for ex in self.val_examples[:count]:
                k = kernel(ex.item_id) if callable(kernel) else kernel
                base = resize(ex.image, cfg.canonical)
                sharp = center_crop(
                    resize(quantize8(base), cfg.invariance_scale), cfg.crop
                )
                blurred = center_crop(
                    resize(quantize8(convolve(base, k)), cfg.invariance_scale), cfg.crop
                )
                inv = hamming_invariance_map(model, sharp, blurred)
                for tap, value in inv.tap_means().items():
                    tap_sums[tap] = tap_sums.get(tap, 0.0) + value
                for tap, grid in inv.resampled().items():
                    map_sums[tap] = map_sums.get(tap, 0.0) + grid
            for tap in sorted(tap_sums):
                rows.append([name, tap, _fmt(tap_sums[tap] / count)])
                heatmaps[(name, tap)] = np.clip(map_sums[tap] / count, 0.0, 1.0)
        return rows, heatmaps

    # -- segmentation -------------------------------------------------------

    def _seg_head_train(
        self, model: Model, examples, conditions: list[str], seed: int
    ) -> tuple[np.ndarray, np.ndarray]:
        """Train a per-pixel softmax head on subsampled hypercolumn features."""
        cfg = self.config
        rng = generator(seed)
        kernels = [condition_kernel(t) for t in conditions]
        feats = []
        labels = []
        for i, ex in enumerate(examples):
            kernel = kernels[i % len(kernels)]
            img = quantize8(convolve(resize(ex.image, cfg.canonical, "geometric_mean"), kernel))
            hc = hypercolumn_features(model, img)
            h, w, d = hc.shape
            idx = rng.choice(h * w, size=min(cfg.seg_pixels_per_image, h * w), replace=False)
            feats.append(hc.reshape(h * w, d)[idx])
            labels.append(ex.mask.reshape(-1)[idx])
        x = np.concatenate(feats, axis=0)
        y = np.concatenate(labels, axis=0)
        w = np.zeros((x.shape[1], SEG_CLASSES))
        b = np.zeros(SEG_CLASSES)
        vel_w = np.zeros_like(w)
        vel_b = np.zeros_like(b)
        n = len(y)
        for stage in self.config.seg_stages:
            for _ in range(stage.epochs):
                order = rng.permutation(n)
                for start in range(0, n, cfg.seg_batch):
                    sel = order[start : start + cfg.seg_batch]
                    logits = x[sel] @ w + b
                    probs = softmax(logits)
                    probs[np.arange(len(sel)), y[sel]] -= 1.0
                    probs /= len(sel)
                    gw = x[sel].T @ probs
                    gb = probs.sum(axis=0)
                    vel_w = cfg.seg_momentum * vel_w + gw
                    vel_b = cfg.seg_momentum * vel_b + gb
                    w -= stage.lr * vel_w
                    b -= stage.lr * vel_b
        return w, b

    def segmentation_rows(self) -> list[list[str]]:
        cfg = self.config
        if cfg.seg_train_count == 0 or cfg.seg_val_count == 0:
            return []
        seed = derive_seed(cfg.master_seed, "segmentation")
        seg_train = generate_shapeseg(
            cfg.seg_train_count, cfg.render_size, seed=seed, split="train"
        )
        seg_val = generate_shapeseg(
            cfg.seg_val_count, cfg.render_size, seed=seed, split="val"
        )
        heads = {}
        if _BASELINE in self.models:
            heads[_BASELINE] = self._seg_head_train(
                self.models[_BASELINE],
                seg_train,
                ["sharp"],
                derive_seed(cfg.master_seed, "seg-head", _BASELINE),
            )
        # The head retrained under blur uses the first fine-tuned model whose
        # mixture spans sharp plus at least one disk radius.
        mixed_name = None
        for f in cfg.finetunes:
            if f.name not in self.models:
                continue
            sources = [p.partition("=")[0].strip() for p in _split(f.components)]
            if "sharp" in sources and any(s.startswith("d") for s in sources):
                mixed_name = f.name
                break
        if mixed_name is not None:
            heads[mixed_name] = self._seg_head_train(
                self.models[mixed_name],
                seg_train,
                list(cfg.seg_conditions),
                derive_seed(cfg.master_seed, "seg-head", mixed_name),
            )
        rows = []
        for name, (w, b) in heads.items():
            model = self.models[name]
            for token in cfg.seg_conditions:
                kernel = condition_kernel(token)
                plain = MiouAccumulator(SEG_CLASSES)
                banded = MiouAccumulator(SEG_CLASSES)
                any_band = False
                for ex in seg_val:
                    img = quantize8(
                        convolve(resize(ex.image, cfg.canonical, "geometric_mean"), kernel)
                    )
                    hc = hypercolumn_features(model, img)
                    h, wdt, d = hc.shape
                    pred = (hc.reshape(h * wdt, d) @ w + b).argmax(axis=1).reshape(h, wdt)
                    plain.add(pred, ex.mask)
                    band = boundary_band(ex.mask, cfg.seg_distance)
                    if band.any():
                        any_band = True
                        banded.add(pred, ex.mask, where=band)
                miou_value = plain.value()
                band_value = banded.value() if any_band else None
                rows.append(
                    [name, token, "miou", _fmt(miou_value) if miou_value is not None else "undefined"]
                )
                rows.append(
                    [
                        name,
                        token,
                        "boundary_miou",
                        _fmt(band_value) if band_value is not None else "undefined",
                    ]
                )
        return rows


def run_experiment(config: ExperimentConfig, out_dir: str | None = None) -> str:
    """Run the full experiment; returns the final report directory path."""
    out = os.path.abspath(out_dir or config.out_dir)
    tmp = out + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    os.makedirs(os.path.join(tmp, "checkpoints"))
    os.makedirs(os.path.join(tmp, "invariance"))
    os.makedirs(os.path.join(tmp, "plots"))

    manifest = _Manifest()
    manifest.record("config_path", config.path)
    manifest.record("config_sha256", config.sha256)
    manifest.record("master_seed", str(config.master_seed))
    manifest.record("package_version", __version__)
    manifest.record("python_version", sys.version.split()[0])
    manifest.record("numpy_version", np.__version__)

    t_start = time.time()
    exp = Experiment(config)

    def stage(name: str, fn, *deps: str) -> bool:
        missing = [d for d in deps if d in manifest.failed]
        if missing:
            manifest.stage_skipped(name, f"depends on failed {missing[0]}")
            manifest.failed.append(name)
            return False
        t0 = time.time()
        try:
            fn()
            manifest.stage_ok(name, time.time() - t0)
            return True
        except Exception as exc:  # noqa: BLE001 - stage isolation is the point
            manifest.stage_failed(name, exc)
            return False

    stage("dataset", exp.generate_data)
    stage("pretrain", exp.pretrain, "dataset")
    for setting in config.finetunes:
        stage(f"finetune:{setting.name}", lambda s=setting: exp.run_finetune(s), "pretrain")

    def do_eval():
        exp.evaluate_grid()
        _write_csv(
            os.path.join(tmp, "accuracy.csv"),
            ["model", "condition", "scale", "metric", "value"],
            exp.accuracy_rows(),
        )
        _write_csv(
            os.path.join(tmp, "entropy.csv"),
            ["model", "condition", "metric", "value"],
            exp.entropy_rows(),
        )
        _write_csv(
            os.path.join(tmp, "scale.csv"),
            ["condition", "scale", "value"],
            exp.scale_rows(),
        )

    stage("eval", do_eval, "pretrain")

    def do_invariance():
        rows, heatmaps = exp.invariance_outputs()
        _write_csv(
            os.path.join(tmp, "invariance.csv"), ["model", "tap", "value"], rows
        )
        for (name, tap), grid in heatmaps.items():
            save_image(
                quantize8(Image(grid)),
                os.path.join(tmp, "invariance", f"{name}_{tap}.pgm"),
            )

    stage("invariance", do_invariance, "pretrain")

    def do_segmentation():
        rows = exp.segmentation_rows()
        _write_csv(
            os.path.join(tmp, "miou.csv"), ["model", "condition", "metric", "value"], rows
        )

    stage("segmentation", do_segmentation, "pretrain")

    def do_checkpoints():
        for name, model in exp.models.items():
            save_checkpoint(model, os.path.join(tmp, "checkpoints", f"{name}.ckpt"))

    stage("checkpoints", do_checkpoints, "pretrain")
    stage("plots", lambda: emit_plots(tmp, os.path.join(tmp, "plots")), "eval")

    manifest.record("wall_clock_seconds", f"{time.time() - t_start:.2f}")
    manifest.write(os.path.join(tmp, "manifest.txt"))

    if os.path.exists(out):
        shutil.rmtree(out)
    os.rename(tmp, out)
    return out


# ---------------------------------------------------------------------------
# Plots


def emit_plots(report_dir: str, out_dir: str | None = None) -> list[str]:
    """Render accuracy-vs-blur line charts, one per evaluation scale.

    Reads accuracy.csv from ``report_dir``.  An empty or missing table
    produces no files (with a warning on stderr) and succeeds.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    path = os.path.join(report_dir, "accuracy.csv")
    out = out_dir or os.path.join(report_dir, "plots")
    rows = []
    if os.path.exists(path):
        with open(path, encoding="utf-8") as fh:
            header = fh.readline()
            for line in fh:
                parts = line.rstrip("\n").split(",")
                if len(parts) == 5:
                    rows.append(parts)
    if not rows:
        print("emit_plots: no accuracy rows, nothing to draw", file=sys.stderr)
        return []
    os.makedirs(out, exist_ok=True)
    scales = []
    for r in rows:
        if r[2] not in scales:
            scales.append(r[2])
    conditions = []
    for r in rows:
        if r[1] not in conditions:
            conditions.append(r[1])
    models = []
    for r in rows:
        if r[0] not in models:
            models.append(r[0])
    files = []
    for scale in scales:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        for name in models:
            ys = [
                float(r[4])
                for c in conditions
                for r in rows
                if r[0] == name and r[1] == c and r[2] == scale and r[3] == "top1"
            ]
            if len(ys) == len(conditions):
                ax.plot(range(len(conditions)), ys, marker="o", label=name)
        ax.set_xticks(range(len(conditions)))
        ax.set_xticklabels(conditions)
        ax.set_ylim(0.0, 1.0)
        ax.set_xlabel("blur condition")
        ax.set_ylabel("top-1 accuracy")
        ax.set_title(f"evaluation scale {scale}")
        ax.legend(fontsize=8)
        fig.tight_layout()
        fname = os.path.join(out, f"accuracy_{scale.replace('+', 'p')}.png")
        fig.savefig(fname, dpi=110)
        plt.close(fig)
        files.append(fname)
    return files
