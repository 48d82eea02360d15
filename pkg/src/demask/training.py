"""Training orchestration: alternating adversarial optimization for the
inpainting pair, supervised loops for the segmenter and landmark predictor,
deterministic batch scheduling, and checkpoint persistence.

Batches are drawn by a stateless per-iteration RNG keyed on (seed,
iteration), so resuming from a checkpoint reproduces the exact schedule.
Checkpoints are single-file containers: a JSON header (names, shapes,
offsets) followed by raw little-endian tensor data.
"""

import io
import json
import logging
import os
from collections import deque
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ConfigError, NumericError, TrainingError
from .gender import GenderClassifier, GenderClassifierConfig
from .imaging import ImageTensor, merge_inpainted, psnr
from .inpaint import (
    DiscriminatorConfig,
    GeneratorConfig,
    InpaintGenerator,
    LossWeights,
    PatchDiscriminator,
    RandomFeatureExtractor,
    adversarial_losses,
    assemble_generator_input,
    discriminate,
    generate,
    perceptual_loss,
    pixel_loss,
    style_loss,
    total_loss,
    tv_loss,
)
from .landmarks import (
    AdaptiveWingParams,
    LandmarkPredictor,
    LandmarkPredictorConfig,
    adaptive_wing_loss,
    render_guidance,
    render_heatmaps,
    weighted_loss_map,
)
from .segmentation import MaskSegmenter, SegmenterConfig, segmentation_loss
from .synthdata import Manifest, SyntheticPair, load_entry

logger = logging.getLogger(__name__)

# Reference values from the full-scale training regime; desk-scale runs use
# far smaller budgets and do not target these.
FULL_SCALE_INPAINT_ITERATIONS = 500_000
FULL_SCALE_SEGMENTER_ITERATIONS = 10_000
FULL_SCALE_SEGMENTER_FINAL_LOSS = 0.0878  # multi-head detector, recorded only

CHECKPOINT_MAGIC = b"DMCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str = "adam"
    beta1: float = 0.0
    beta2: float = 0.9
    lr_generator: float = 1e-4
    lr_discriminator: float = 1e-5
    batch_size: int = 4
    iterations: int = 2000

    def __post_init__(self):
        if self.algorithm != "adam":
            raise ConfigError(f"unsupported optimizer {self.algorithm!r}")
        if self.lr_generator < 0 or self.lr_discriminator < 0:
            raise ConfigError("learning rates must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")


@dataclass
class InpaintTrainState:
    generator: InpaintGenerator
    discriminator: PatchDiscriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    extractor: RandomFeatureExtractor
    optimizer_config: OptimizerConfig
    seed: int
    gender: str | None = None
    guidance_sigma: float = 2.0
    iteration: int = 0
    loss_history: deque = field(default_factory=lambda: deque(maxlen=200))


def new_inpaint_state(generator_config: GeneratorConfig = GeneratorConfig(),
                      discriminator_config: DiscriminatorConfig = DiscriminatorConfig(),
                      optimizer_config: OptimizerConfig = OptimizerConfig(),
                      seed: int = 0, gender: str | None = None,
                      extractor_seed: int = 0,
                      guidance_sigma: float = 2.0) -> InpaintTrainState:
    torch.manual_seed(seed)
    generator = InpaintGenerator(generator_config)
    discriminator = PatchDiscriminator(discriminator_config)
    opt_g = torch.optim.Adam(generator.parameters(), lr=optimizer_config.lr_generator,
                             betas=(optimizer_config.beta1, optimizer_config.beta2))
    opt_d = torch.optim.Adam(discriminator.parameters(),
                             lr=optimizer_config.lr_discriminator,
                             betas=(optimizer_config.beta1, optimizer_config.beta2))
    return InpaintTrainState(generator, discriminator, opt_g, opt_d,
                             RandomFeatureExtractor(seed=extractor_seed),
                             optimizer_config, seed, gender, guidance_sigma)


def pair_tensors(pair: SyntheticPair, guidance_sigma: float):
    """(masked, clean, mask, guidance) tensors for one synthetic pair."""
    to_chw = lambda img: torch.from_numpy(
        np.ascontiguousarray(img.data, dtype=np.float32)).permute(2, 0, 1)
    guidance = render_guidance(pair.landmarks, pair.clean.height, guidance_sigma)
    return (to_chw(pair.masked), to_chw(pair.clean),
            torch.from_numpy(pair.segmap.data[None].astype(np.float32)),
            torch.from_numpy(guidance[None].astype(np.float32)))


def _stack_batch(pairs, guidance_sigma):
    tensors = [pair_tensors(p, guidance_sigma) for p in pairs]
    masked, clean, mask, guide = (torch.stack(ts) for ts in zip(*tensors))
    return masked, clean, mask, guide


def train_step(state: InpaintTrainState, batch, weights: LossWeights = LossWeights()):
    """One discriminator update (adversarial term) followed by one generator
    update (full weighted objective). Returns the six-term loss breakdown.

    Pairs with an empty mask are skipped with a warning; a batch with no
    usable pair raises TrainingError.
    """
    usable = []
    for pair in batch:
        if pair.segmap.mask_pixel_count == 0:
            logger.warning("skipping pair with empty mask at iteration %d",
                           state.iteration)
            continue
        usable.append(pair)
    if not usable:
        raise TrainingError("no usable pairs in batch (all masks empty)")

    masked, clean, mask, guide = _stack_batch(usable, state.guidance_sigma)
    gen_input = assemble_generator_input(masked, guide, mask)

    state.generator.train()
    state.discriminator.train()
    inpainted = state.generator(gen_input)

    adv_g, adv_d = adversarial_losses(state.discriminator, inpainted, clean, guide)
    if not torch.isfinite(adv_d):
        raise NumericError(f"loss term 'adv_discriminator' is non-finite: {float(adv_d)!r}")
    state.opt_d.zero_grad()
    adv_d.backward(retain_graph=True)
    state.opt_d.step()

    # re-score the fake branch against the updated discriminator
    adv_g_new = ((discriminate(state.discriminator, inpainted, guide) - 1.0) ** 2).mean()

    parts = {
        "pixel": pixel_loss(inpainted, clean, mask),
        "perceptual": perceptual_loss(inpainted, clean, state.extractor),
        "style": style_loss(inpainted, clean, mask, state.extractor),
        "tv": tv_loss(inpainted),
        "adv_generator": adv_g_new,
    }
    total, breakdown = total_loss(parts, weights)
    state.opt_g.zero_grad()
    total.backward()
    state.opt_g.step()

    breakdown = type(breakdown)(
        pixel=breakdown.pixel, perceptual=breakdown.perceptual,
        style=breakdown.style, tv=breakdown.tv,
        adv_generator=breakdown.adv_generator, total=breakdown.total,
        adv_discriminator=float(adv_d))
    state.iteration += 1
    state.loss_history.append(breakdown)
    return breakdown


def _batch_indices(seed: int, iteration: int, n: int, batch_size: int) -> np.ndarray:
    rng = np.random.default_rng((seed, iteration))
    return rng.choice(n, size=min(batch_size, n), replace=False)


def load_pairs(manifest: Manifest, image_size: int):
    return [load_entry(e, image_size) for e in manifest.entries]


def train_inpainting(manifest: Manifest, gender: str | None,
                     optimizer_config: OptimizerConfig = OptimizerConfig(),
                     weights: LossWeights = LossWeights(),
                     generator_config: GeneratorConfig = GeneratorConfig(),
                     discriminator_config: DiscriminatorConfig = DiscriminatorConfig(),
                     seed: int = 0, checkpoint_path=None, checkpoint_every: int = 0,
                     log_every: int = 100) -> InpaintTrainState:
    """Train one gender-specific inpainting model over seeded batches."""
    filtered = manifest.filter_gender(gender) if gender else manifest
    if not filtered.entries:
        raise TrainingError(f"manifest has no entries for gender {gender!r}")
    pairs = load_pairs(filtered, generator_config.input_size)
    state = new_inpaint_state(generator_config, discriminator_config,
                              optimizer_config, seed, gender)
    for _ in range(optimizer_config.iterations):
        idx = _batch_indices(seed, state.iteration, len(pairs),
                             optimizer_config.batch_size)
        breakdown = train_step(state, [pairs[i] for i in idx], weights)
        if log_every and state.iteration % log_every == 0:
            logger.info("iter %d: total %.4f pixel %.4f advD %.4f",
                        state.iteration, breakdown.total, breakdown.pixel,
                        breakdown.adv_discriminator)
        if checkpoint_path and checkpoint_every and \
                state.iteration % checkpoint_every == 0:
            save_inpaint_checkpoint(state, checkpoint_path)
    if checkpoint_path:
        save_inpaint_checkpoint(state, checkpoint_path)
    return state


def merged_training_psnr(state: InpaintTrainState, pairs) -> float:
    """Mean PSNR of merged reconstructions against the clean images."""
    from .inpaint import generate
    values = []
    for pair in pairs:
        guide = render_guidance(pair.landmarks, pair.clean.height, state.guidance_sigma)
        out = generate(state.generator, pair.masked, guide, pair.segmap)
        merged = merge_inpainted(pair.masked, out, pair.segmap)
        values.append(psnr(merged, pair.clean))
    finite = [v for v in values if np.isfinite(v)]
    return float(np.mean(finite)) if finite else float("inf")


@dataclass(frozen=True)
class SegmenterTrainConfig:
    lr: float = 2.5e-4
    batch_size: int = 2
    iterations: int = FULL_SCALE_SEGMENTER_ITERATIONS
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.iterations < 1:
            raise ConfigError("invalid segmenter training config")


@dataclass
class SegmenterTrainResult:
    model: MaskSegmenter
    loss_history: list
    config: SegmenterTrainConfig


def train_segmenter(manifest: Manifest,
                    config: SegmenterTrainConfig = SegmenterTrainConfig(),
                    model_config: SegmenterConfig = SegmenterConfig(),
                    checkpoint_path=None) -> SegmenterTrainResult:
    """Minimize per-pixel cross-entropy of the segmenter on (masked, segmap)."""
    if not manifest.entries:
        raise TrainingError("manifest is empty")
    pairs = load_pairs(manifest, model_config.input_size)
    torch.manual_seed(config.seed)
    model = MaskSegmenter(model_config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    xs = torch.stack([torch.from_numpy(
        np.ascontiguousarray(p.masked.data, dtype=np.float32)).permute(2, 0, 1)
        for p in pairs])
    ys = torch.stack([torch.from_numpy(p.segmap.data[None].astype(np.float32))
                      for p in pairs])
    history = []
    model.train()
    for it in range(config.iterations):
        idx = _batch_indices(config.seed, it, len(pairs), config.batch_size)
        probs = torch.sigmoid(model(xs[idx]))
        loss = segmentation_loss(probs, ys[idx])
        if not torch.isfinite(loss):
            raise NumericError(f"segmentation loss non-finite at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss))
    result = SegmenterTrainResult(model, history, config)
    if checkpoint_path:
        save_model_checkpoint(checkpoint_path, "segmenter", model,
                              asdict(model_config), iteration=config.iterations,
                              seed=config.seed)
    return result


@dataclass(frozen=True)
class LandmarkTrainConfig:
    lr: float = 1e-3
    batch_size: int = 4
    iterations: int = 300
    seed: int = 0
    heatmap_sigma: float = 1.5
    weight_boost: float = 10.0
    weight_radius: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.iterations < 1:
            raise ConfigError("invalid landmark training config")


@dataclass
class LandmarkTrainResult:
    model: LandmarkPredictor
    loss_history: list
    config: LandmarkTrainConfig


def train_landmarks(manifest: Manifest,
                    config: LandmarkTrainConfig = LandmarkTrainConfig(),
                    model_config: LandmarkPredictorConfig = LandmarkPredictorConfig(),
                    wing_params: AdaptiveWingParams = AdaptiveWingParams(),
                    checkpoint_path=None) -> LandmarkTrainResult:
    """Adaptive-wing training of the hourglass predictor on masked faces.

    Every stack's heatmap output is supervised against the rendered ground
    truth, each pixel weighted by the dilated-foreground loss map.
    """
    if not manifest.entries:
        raise TrainingError("manifest is empty")
    pairs = load_pairs(manifest, model_config.input_size)
    torch.manual_seed(config.seed)
    model = LandmarkPredictor(model_config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    xs = torch.stack([torch.from_numpy(
        np.ascontiguousarray(p.masked.data, dtype=np.float32)).permute(2, 0, 1)
        for p in pairs])
    heats, weight_maps = [], []
    for p in pairs:
        gt = render_heatmaps(p.landmarks, model_config.heatmap_size,
                             config.heatmap_sigma)
        heats.append(torch.from_numpy(gt.data.astype(np.float32)))
        weight_maps.append(torch.from_numpy(weighted_loss_map(
            gt, config.weight_radius, config.weight_boost).astype(np.float32)))
    heats = torch.stack(heats)
    weight_maps = torch.stack(weight_maps)

    history = []
    model.train()
    for it in range(config.iterations):
        idx = _batch_indices(config.seed, it, len(pairs), config.batch_size)
        stacks = model(xs[idx])
        loss = sum(adaptive_wing_loss(s, heats[idx], wing_params, weight_maps[idx])
                   for s in stacks) / len(stacks)
        if not torch.isfinite(loss):
            raise NumericError(f"landmark loss non-finite at iteration {it}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss))
    result = LandmarkTrainResult(model, history, config)
    if checkpoint_path:
        save_model_checkpoint(checkpoint_path, "landmarks", model,
                              asdict(model_config), iteration=config.iterations,
                              seed=config.seed)
    return result


# --------------------------------------------------------------------------
# checkpoint container
# --------------------------------------------------------------------------

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _write_container(path, header: dict, tensors: dict) -> None:
    index = []
    payload = io.BytesIO()
    for name, tensor in tensors.items():
        arr = tensor.detach().cpu().numpy()
        if arr.dtype == np.float64:
            dtype = "float64"
        else:
            arr = arr.astype(np.float32)
            dtype = "float32"
        data = np.ascontiguousarray(arr).astype(_DTYPES[dtype]).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": dtype,
                      "offset": payload.tell(), "nbytes": len(data)})
        payload.write(data)
    header = dict(header)
    header["tensors"] = index
    blob = json.dumps(header).encode()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        fh.write(payload.getvalue())
    os.replace(tmp, path)


def _read_container(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    header_len = int.from_bytes(raw[4:12], "little")
    if len(raw) < 12 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + header_len])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(it := f"{path}: checkpoint version "
                              f"{header.get('version')!r} != {CHECKPOINT_VERSION}")
    payload = raw[12 + header_len:]
    tensors = {}
    for entry in header["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated payload at {entry['name']}")
        arr = np.frombuffer(payload[entry["offset"]:end],
                            dtype=_DTYPES[entry["dtype"]])
        tensors[entry["name"]] = torch.from_numpy(
            arr.reshape(entry["shape"]).copy())
    return header, tensors


def _split_module_tensors(module: nn.Module, prefix: str):
    tensors, ints = {}, {}
    for key, value in module.state_dict().items():
        name = f"{prefix}.{key}"
        if value.dtype.is_floating_point:
            tensors[name] = value
        else:
            ints[name] = value.tolist()
    return tensors, ints


def _optimizer_tensors(opt: torch.optim.Optimizer, prefix: str):
    tensors = {}
    sd = opt.state_dict()
    for pid, pstate in sd["state"].items():
        for key, value in pstate.items():
            tensors[f"{prefix}.{pid}.{key}"] = value
    return tensors, sd["param_groups"]


def _load_module(module: nn.Module, prefix: str, tensors: dict, ints: dict, path):
    sd = {}
    for key, value in module.state_dict().items():
        name = f"{prefix}.{key}"
        if value.dtype.is_floating_point:
            if name not in tensors:
                raise CheckpointError(f"{path}: missing tensor {name}")
            sd[key] = tensors[name].to(value.dtype)
        else:
            sd[key] = torch.tensor(ints[name], dtype=value.dtype).reshape(value.shape)
    try:
        module.load_state_dict(sd)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: state does not fit the configured "
                              f"model: {exc}") from exc


def _load_optimizer(opt: torch.optim.Optimizer, prefix: str, tensors: dict,
                    param_groups):
    state = {}
    for name, tensor in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        _, pid, key = name.rsplit(".", 2)
        state.setdefault(int(pid), {})[key] = tensor
    opt.load_state_dict({"state": state, "param_groups": param_groups})


def save_inpaint_checkpoint(state: InpaintTrainState, path) -> None:
    tensors, ints = {}, {}
    for prefix, module in (("generator", state.generator),
                           ("discriminator", state.discriminator)):
        t, i = _split_module_tensors(module, prefix)
        tensors.update(t)
        ints.update(i)
    opt_g_tensors, opt_g_groups = _optimizer_tensors(state.opt_g, "opt_g")
    opt_d_tensors, opt_d_groups = _optimizer_tensors(state.opt_d, "opt_d")
    tensors.update(opt_g_tensors)
    tensors.update(opt_d_tensors)
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": "inpaint",
        "gender": state.gender,
        "iteration": state.iteration,
        "seed": state.seed,
        "guidance_sigma": state.guidance_sigma,
        "config": {
            "generator": asdict(state.generator.config),
            "discriminator": asdict(state.discriminator.config),
            "optimizer": asdict(state.optimizer_config),
        },
        "param_groups": {"opt_g": opt_g_groups, "opt_d": opt_d_groups},
        "ints": ints,
    }
    _write_container(path, header, tensors)


def load_inpaint_checkpoint(path, expected_gender: str | None = None) -> InpaintTrainState:
    header, tensors = _read_container(path)
    if header.get("kind") != "inpaint":
        raise CheckpointError(f"{path}: kind {header.get('kind')!r}, expected 'inpaint'")
    if expected_gender is not None and header.get("gender") != expected_gender:
        raise CheckpointError(
            f"{path}: checkpoint is tagged gender={header.get('gender')!r}, "
            f"pipeline slot expects {expected_gender!r}")
    cfg = header["config"]
    gen_cfg = GeneratorConfig(**{**cfg["generator"],
                                 "dilation_rates": tuple(cfg["generator"]["dilation_rates"])})
    disc_cfg = DiscriminatorConfig(**{**cfg["discriminator"],
                                      "layers": tuple(cfg["discriminator"]["layers"])})
    opt_cfg = OptimizerConfig(**cfg["optimizer"])
    state = new_inpaint_state(gen_cfg, disc_cfg, opt_cfg, header["seed"],
                              header.get("gender"),
                              guidance_sigma=header.get("guidance_sigma", 2.0))
    ints = header.get("ints", {})
    _load_module(state.generator, "generator", tensors, ints, path)
    _load_module(state.discriminator, "discriminator", tensors, ints, path)
    _load_optimizer(state.opt_g, "opt_g", tensors, header["param_groups"]["opt_g"])
    _load_optimizer(state.opt_d, "opt_d", tensors, header["param_groups"]["opt_d"])
    state.iteration = header["iteration"]
    return state


def save_model_checkpoint(path, kind: str, model: nn.Module, config: dict,
                          iteration: int = 0, seed: int = 0,
                          gender: str | None = None) -> None:
    """Container for a single model without optimizer state."""
    tensors, ints = _split_module_tensors(model, "model")
    header = {"version": CHECKPOINT_VERSION, "kind": kind, "gender": gender,
              "iteration": iteration, "seed": seed, "config": config,
              "ints": ints}
    _write_container(path, header, tensors)


_MODEL_BUILDERS = {
    "segmenter": (SegmenterConfig, MaskSegmenter),
    "landmarks": (LandmarkPredictorConfig, LandmarkPredictor),
    "gender": (GenderClassifierConfig, GenderClassifier),
}


def load_model_checkpoint(path, expected_kind: str) -> nn.Module:
    header, tensors = _read_container(path)
    kind = header.get("kind")
    if kind != expected_kind:
        raise CheckpointError(f"{path}: kind {kind!r}, expected {expected_kind!r}")
    config_cls, model_cls = _MODEL_BUILDERS[kind]
    raw = dict(header["config"])
    for key, value in raw.items():
        if isinstance(value, list):
            raw[key] = tuple(value)
    model = model_cls(config_cls(**raw))
    _load_module(model, "model", tensors, header.get("ints", {}), path)
    model.eval()
    return model


# --------------------------------------------------------------------------
# key-value training config files
# --------------------------------------------------------------------------

_OPTIMIZER_KEYS = {f.name for f in
                   __import__("dataclasses").fields(OptimizerConfig)}
_WEIGHT_KEYS = {f.name for f in __import__("dataclasses").fields(LossWeights)}


def parse_config_text(text: str) -> dict:
    """Parse "key = value" lines; '#' starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = line.partition("=")
        key = key.strip()
        raw = raw.strip()
        try:
            value = int(raw)
        except ValueError:
            try:
                value = float(raw)
            except ValueError:
                value = raw
        values[key] = value
    return values


def load_training_config(path) -> tuple:
    """Read a key-value file into (OptimizerConfig, LossWeights, extras)."""
    with open(path) as fh:
        values = parse_config_text(fh.read())
    opt_kwargs = {k: v for k, v in values.items() if k in _OPTIMIZER_KEYS}
    weight_kwargs = {k: v for k, v in values.items() if k in _WEIGHT_KEYS}
    extras = {k: v for k, v in values.items()
              if k not in _OPTIMIZER_KEYS and k not in _WEIGHT_KEYS}
    return OptimizerConfig(**opt_kwargs), LossWeights(**weight_kwargs), extras
