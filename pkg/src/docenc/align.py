"""Stage-2 supervised autoregressive alignment at toy scale.

A two-layer MLP projector maps visual tokens into the embedding space of a
tiny causal text decoder; the training objective is teacher-forced
next-token cross-entropy over multimodal sequences. Also hosts the
grounding-task sample formatter and [0, 999] bounding-box normalization.
"""

from __future__ import annotations

import base64
import json
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    CheckpointIncompatibilityError,
    CoordRangeError,
    DegenerateSampleError,
    DivergenceError,
    GeometryError,
)
from .numkernel import (
    ParamStore,
    Rng,
    Tensor,
    concat,
    cross_entropy,
    gather_rows,
    gelu,
    layer_norm,
    matmul,
)
from .optim import AdamW, lr_at_step
from .vit import TokenGrid, ViTConfig, encode, init_blocks, transformer_block, weight_init

# --- toy vocabulary layout --------------------------------------------------
PAD, BOS, EOS, SEP = 0, 1, 2, 3
TASK_BBOX_TO_TEXT, TASK_TEXT_TO_BBOX, TASK_BBOX_TO_CATEGORY = 4, 5, 6
COORD_BASE = 7           # coordinate tokens: 7 .. 1006 for values 0 .. 999
N_COORD = 1000
WORD_BASE = COORD_BASE + N_COORD  # word/glyph tokens: 1007 .. 1038
N_WORD = 32
TOY_VOCAB = WORD_BASE + N_WORD

PROMPT_TEMPLATE_VERSION = "grounding-v1"

MIN_TEXT_TOKENS = 2
MAX_TEXT_TOKENS = 64
MIN_CONFIDENCE = 0.5


def coord_token(value: int) -> int:
    return COORD_BASE + int(value)


def word_token(word: str) -> int:
    return WORD_BASE + zlib.crc32(word.encode()) % N_WORD


@dataclass(frozen=True)
class ToyDecoderConfig:
    vocab_size: int = TOY_VOCAB
    dim: int = 32
    depth: int = 2
    heads: int = 4
    max_sequence: int = 128
    identity: str = "toy-decoder"

    def __post_init__(self):
        if self.vocab_size < 4:
            raise GeometryError("vocab must cover pad/bos/eos plus content tokens")
        if self.dim % self.heads:
            raise GeometryError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass(frozen=True)
class NormalizedBBox:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        for v in (self.x0, self.y0, self.x1, self.y1):
            if not 0 <= v <= 999:
                raise CoordRangeError(f"normalized coordinate {v} outside [0, 999]")
        if self.x0 > self.x1 or self.y0 > self.y1:
            raise CoordRangeError("bbox corners out of order")

    def tokens(self) -> list[int]:
        return [coord_token(v) for v in (self.x0, self.y0, self.x1, self.y1)]


@dataclass
class SFTSample:
    """One supervised sample: image, prompt tokens, target tokens, and a
    loss mask over the full prompt+target sequence."""

    image: np.ndarray | str | None
    prompt_tokens: list[int]
    target_tokens: list[int]
    loss_mask: list[bool] = field(default_factory=list)
    task: str = ""

    def __post_init__(self):
        if not self.loss_mask:
            self.loss_mask = ([False] * len(self.prompt_tokens)
                              + [True] * len(self.target_tokens))
        if len(self.loss_mask) != len(self.prompt_tokens) + len(self.target_tokens):
            raise GeometryError("loss mask length must match the token sequence")

    @property
    def tokens(self) -> list[int]:
        return self.prompt_tokens + self.target_tokens

    def to_json(self) -> str:
        rec = {
            "prompt_tokens": self.prompt_tokens,
            "target_tokens": self.target_tokens,
            "loss_mask": [int(b) for b in self.loss_mask],
            "task": self.task,
            "template_version": PROMPT_TEMPLATE_VERSION,
        }
        if isinstance(self.image, str):
            rec["image_path"] = self.image
        elif self.image is not None:
            img = np.asarray(self.image, dtype=np.float32)
            rec["image_shape"] = list(img.shape)
            rec["image_b64"] = base64.b64encode(img.tobytes()).decode()
        return json.dumps(rec)

    @classmethod
    def from_json(cls, line: str) -> "SFTSample":
        rec = json.loads(line)
        image = None
        if "image_path" in rec:
            image = rec["image_path"]
        elif "image_b64" in rec:
            raw = base64.b64decode(rec["image_b64"])
            image = np.frombuffer(raw, dtype=np.float32).reshape(rec["image_shape"])
        return cls(image=image,
                   prompt_tokens=list(rec["prompt_tokens"]),
                   target_tokens=list(rec["target_tokens"]),
                   loss_mask=[bool(b) for b in rec["loss_mask"]],
                   task=rec.get("task", ""))


# --- projector ---------------------------------------------------------------

def init_projector(d_in: int, hidden: int, d_out: int, rng: Rng) -> ParamStore:
    store = ParamStore(metadata={"seed": str(rng.seed), "role": "projector"})
    store["proj.w1"] = Tensor(weight_init(rng, (d_in, hidden)), requires_grad=True)
    store["proj.b1"] = Tensor(np.zeros(hidden, np.float32), requires_grad=True)
    store["proj.w2"] = Tensor(weight_init(rng, (hidden, d_out)), requires_grad=True)
    store["proj.b2"] = Tensor(np.zeros(d_out, np.float32), requires_grad=True)
    return store


def project_tokens(grid: TokenGrid, projector: ParamStore) -> Tensor:
    """Two-layer MLP mapping visual tokens into the text embedding space."""
    w1 = projector["proj.w1"]
    if w1.shape[0] != grid.dim:
        raise CheckpointIncompatibilityError(
            f"projector expects input width {w1.shape[0]}, grid has {grid.dim}")
    h = gelu(matmul(grid.data, w1) + projector["proj.b1"])
    return matmul(h, projector["proj.w2"]) + projector["proj.b2"]


# --- toy text decoder ---------------------------------------------------------

def init_decoder(config: ToyDecoderConfig, rng: Rng) -> ParamStore:
    store = ParamStore(metadata={"seed": str(rng.seed), "role": "decoder",
                                 "identity": config.identity})
    store["dec.tok_embed"] = Tensor(rng.normal((config.vocab_size, config.dim), config.dim ** -0.5),
                                    requires_grad=True)
    store["dec.pos_embed"] = Tensor(rng.normal((config.max_sequence, config.dim), 0.02),
                                    requires_grad=True)
    init_blocks(store, config.dim, config.depth, 4, rng.child("blocks"), prefix="dec.")
    store["dec.head.w"] = Tensor(weight_init(rng, (config.dim, config.vocab_size)),
                                 requires_grad=True)
    store["dec.head.b"] = Tensor(np.zeros(config.vocab_size, np.float32),
                                 requires_grad=True)
    return store


def decoder_logits(decoder: ParamStore, config: ToyDecoderConfig,
                   embeds: Tensor) -> Tensor:
    """Causal decoder forward over a sequence of input embeddings."""
    t = embeds.shape[0]
    if t > config.max_sequence:
        raise GeometryError(f"sequence length {t} exceeds max {config.max_sequence}")
    x = embeds + gather_rows(decoder["dec.pos_embed"], np.arange(t))
    for i in range(config.depth):
        x = transformer_block(x, decoder, f"dec.blocks.{i}.", config.heads,
                              causal=True)
    x = layer_norm(x, decoder["dec.final_ln.g"], decoder["dec.final_ln.b"])
    return matmul(x, decoder["dec.head.w"]) + decoder["dec.head.b"]


def ar_loss(decoder: ParamStore, config: ToyDecoderConfig,
            visual_embeds: Tensor | None, text_tokens, targets, mask) -> Tensor:
    """Teacher-forced next-token cross-entropy over masked text positions.

    Visual tokens precede the text tokens in the causal order; the loss is
    differentiable through decoder, projector, and encoder.
    """
    text_tokens = np.asarray(text_tokens, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if not (len(text_tokens) == len(targets) == len(mask)):
        raise GeometryError("text tokens, targets, and mask lengths must agree")
    if not mask.any():
        raise DegenerateSampleError("loss mask selects no positions")
    text_embeds = gather_rows(decoder["dec.tok_embed"], text_tokens)
    if visual_embeds is not None:
        n_vis = visual_embeds.shape[0]
        seq = concat([visual_embeds, text_embeds], axis=0)
    else:
        n_vis = 0
        seq = text_embeds
    logits = decoder_logits(decoder, config, seq)
    pos = np.nonzero(mask)[0] + n_vis
    return cross_entropy(gather_rows(logits, pos), targets[mask])


def sample_ar_loss(sample: SFTSample, encoder: ParamStore, enc_config: ViTConfig,
                   projector: ParamStore, decoder: ParamStore,
                   dec_config: ToyDecoderConfig) -> Tensor:
    """ar_loss for one SFTSample: the full sequence is fed with teacher
    forcing and each masked position is predicted from the previous one."""
    tokens = np.asarray(sample.tokens, dtype=np.int64)
    mask = np.asarray(sample.loss_mask, dtype=bool)
    # position t-1 predicts token t: inputs drop the last token, targets the first
    inputs, targets, tmask = tokens[:-1], tokens[1:], mask[1:]
    visual = None
    if sample.image is not None and not isinstance(sample.image, str):
        grid = encode(sample.image, encoder, enc_config)
        visual = project_tokens(grid, projector)
    return ar_loss(decoder, dec_config, visual, inputs, targets, tmask)


# --- grounding-task data formulation -----------------------------------------

def normalize_bbox(box, width: int, height: int) -> NormalizedBBox:
    """Map pixel coordinates onto the [0, 999] integer grid."""
    x0, y0, x1, y1 = box
    if width <= 0 or height <= 0:
        raise CoordRangeError("image dimensions must be positive")
    for v, dim, label in ((x0, width, "x0"), (x1, width, "x1"),
                          (y0, height, "y0"), (y1, height, "y1")):
        if not 0 <= v <= dim:
            raise CoordRangeError(f"{label}={v} outside image dimension {dim}")

    def q(v, dim):
        return min(int(np.floor(v / dim * 1000)), 999)

    return NormalizedBBox(q(x0, width), q(y0, height), q(x1, width), q(y1, height))


def tokenize_text(text: str) -> list[int]:
    return [word_token(w) for w in text.split()]


def format_grounding_tasks(tuples, width: int, height: int, rng: Rng,
                           image=None):
    """Expand (category, box, text[, confidence]) tuples into up to three
    samples each (bbox-to-text, text-to-bbox, bbox-to-category).

    Returns (samples, counters); tuples failing the length or confidence
    filters are dropped silently but counted.
    """
    samples: list[SFTSample] = []
    counters = {"kept": 0, "dropped_length": 0, "dropped_confidence": 0}
    for item in tuples:
        category, box, text = item[0], item[1], item[2]
        confidence = item[3] if len(item) > 3 else 1.0
        if confidence < MIN_CONFIDENCE:
            counters["dropped_confidence"] += 1
            continue
        words = tokenize_text(text)
        if not MIN_TEXT_TOKENS <= len(words) <= MAX_TEXT_TOKENS:
            counters["dropped_length"] += 1
            continue
        nb = normalize_bbox(box, width, height)
        cat = word_token(category)
        samples.append(SFTSample(
            image=image, task="bbox_to_text",
            prompt_tokens=[BOS, TASK_BBOX_TO_TEXT, *nb.tokens(), SEP],
            target_tokens=[*words, EOS]))
        samples.append(SFTSample(
            image=image, task="text_to_bbox",
            prompt_tokens=[BOS, TASK_TEXT_TO_BBOX, *words, SEP],
            target_tokens=[*nb.tokens(), EOS]))
        samples.append(SFTSample(
            image=image, task="bbox_to_category",
            prompt_tokens=[BOS, TASK_BBOX_TO_CATEGORY, *nb.tokens(), SEP],
            target_tokens=[cat, EOS]))
        counters["kept"] += 1
    return samples, counters


# --- alignment training --------------------------------------------------------

@dataclass(frozen=True)
class AlignTrainConfig:
    learning_rate: float = 3e-3
    epochs: int = 1
    batch_size: int = 8
    weight_decay: float = 0.0
    warmup_ratio: float = 0.03
    schedule: str = "cosine"


def train_align(encoder: ParamStore, enc_config: ViTConfig,
                decoder: ParamStore, dec_config: ToyDecoderConfig,
                projector: ParamStore, samples: list[SFTSample],
                config: AlignTrainConfig, rng: Rng,
                return_all: bool = False):
    """Full-parameter supervised alignment against one text decoder.

    Trains encoder + projector + decoder jointly and returns only the
    encoder weights, tagged with the decoder identity it was aligned to.
    """
    if not samples:
        raise DegenerateSampleError("no training samples")
    encoder = encoder.copy()
    decoder = decoder.copy()
    projector = projector.copy()
    opt = AdamW.from_stores([encoder, decoder, projector],
                            lr=config.learning_rate,
                            weight_decay=config.weight_decay)
    steps_per_epoch = max(1, len(samples) // config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    warmup = int(round(config.warmup_ratio * total_steps))
    order_rng = rng.child("order")

    step = 0
    for _ in range(config.epochs):
        order = order_rng.permutation(len(samples))
        for b in range(steps_per_epoch):
            batch = order[b * config.batch_size:(b + 1) * config.batch_size]
            if batch.size == 0:
                continue
            lr = lr_at_step(step, total_steps, config.learning_rate, warmup,
                            config.schedule)
            opt.zero_grad()
            total = None
            for i in batch:
                loss = sample_ar_loss(samples[i], encoder, enc_config,
                                      projector, decoder, dec_config)
                total = loss if total is None else total + loss
            total = total * (1.0 / batch.size)
            if not np.isfinite(float(total.data)):
                raise DivergenceError(step)
            total.backward()
            opt.step(lr=lr)
            step += 1

    encoder.metadata.update({
        "stage": "align",
        "aligned_to": dec_config.identity,
        "seed": str(rng.seed),
    })
    if return_all:
        # diagnostic escape hatch; the pipeline contract keeps encoder only
        return encoder, decoder, projector
    return encoder
