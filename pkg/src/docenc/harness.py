"""Experiment orchestration: binary checkpoint format, seed derivation,
and the end-to-end toy pipeline (pretrain -> align x n -> merge -> fuse ->
head finetune)."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as synth
from .align import (
    EOS,
    BOS,
    SEP,
    WORD_BASE,
    AlignTrainConfig,
    SFTSample,
    ToyDecoderConfig,
    init_decoder,
    init_projector,
    train_align,
)
from .errors import FormatError, GeometryError, UsageError
from .fusion import FrozenEncoder, fused_features
from .heads import (
    BBox,
    attention_pool,
    bbox_sample_loss,
    box_metrics,
    finetune,
    init_bbox_head,
    predict_bbox,
)
from .mae import MAEDecoderConfig, MAETrainConfig, train_mae
from .merge import (
    MergeCoefficients,
    MergeTrainConfig,
    TeacherSet,
    materialize,
    merge_pipeline,
    train_merge_coefficients,
)
from .numkernel import ParamStore, Rng, Tensor, derive_seed
from .vit import ViTConfig, init_params

MAGIC = b"DAVECKPT"
FORMAT_VERSION = 1
ALIGN_TO = 64
_DTYPE_F32 = 0


# ---------------------------------------------------------------------------
# checkpoint format
# ---------------------------------------------------------------------------

def save_checkpoint(store: ParamStore, path) -> None:
    """Write a bit-exact, versioned binary checkpoint.

    Layout: magic, u16 version, u16 reserved, u32 metadata length + JSON,
    u32 tensor count, sorted tensor table (name, dtype tag, shape, offset,
    byte length), then 64-byte-aligned little-endian f32 payloads.
    """
    meta = json.dumps(store.metadata, sort_keys=True).encode()
    names = store.names()
    header = bytearray()
    header += MAGIC
    header += struct.pack("<HH", FORMAT_VERSION, 0)
    header += struct.pack("<I", len(meta)) + meta
    header += struct.pack("<I", len(names))

    payloads = []
    table_entries = []
    for name in names:
        t = store[name]
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        nb = name.encode()
        table_entries.append((nb, t.data.shape, len(raw)))
        payloads.append(raw)

    # table size is fixed once entries are known; offsets come after it
    table_size = sum(2 + len(nb) + 1 + 1 + 4 * len(shape) + 8 + 8
                     for nb, shape, _ in table_entries)
    offset = len(header) + table_size
    table = bytearray()
    for (nb, shape, nbytes), raw in zip(table_entries, payloads):
        offset += (-offset) % ALIGN_TO
        table += struct.pack("<H", len(nb)) + nb
        table += struct.pack("<BB", _DTYPE_F32, len(shape))
        table += struct.pack(f"<{len(shape)}I", *shape)
        table += struct.pack("<QQ", offset, nbytes)
        offset += nbytes

    blob = bytearray(header) + table
    for raw in payloads:
        blob += b"\x00" * ((-len(blob)) % ALIGN_TO)
        blob += raw
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> ParamStore:
    """Load a checkpoint; rejects bad magic, version, or truncation without
    returning a partial store."""
    blob = Path(path).read_bytes()

    def need(n, offset, what):
        if offset + n > len(blob):
            raise FormatError(f"truncated checkpoint while reading {what}",
                              offset=offset)

    need(len(MAGIC), 0, "magic")
    if blob[:len(MAGIC)] != MAGIC:
        raise FormatError("bad magic bytes", offset=0)
    pos = len(MAGIC)
    need(4, pos, "version")
    version, _reserved = struct.unpack_from("<HH", blob, pos)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}", offset=pos)
    pos += 4
    need(4, pos, "metadata length")
    (meta_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    need(meta_len, pos, "metadata")
    metadata = json.loads(blob[pos:pos + meta_len].decode())
    pos += meta_len
    need(4, pos, "tensor count")
    (n_tensors,) = struct.unpack_from("<I", blob, pos)
    pos += 4

    entries = {}
    for _ in range(n_tensors):
        need(2, pos, "name length")
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        need(name_len, pos, "name")
        name = blob[pos:pos + name_len].decode()
        pos += name_len
        need(2, pos, "dtype/ndim")
        dtype, ndim = struct.unpack_from("<BB", blob, pos)
        if dtype != _DTYPE_F32:
            raise FormatError(f"unknown dtype tag {dtype}", offset=pos)
        pos += 2
        need(4 * ndim, pos, "shape")
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        need(16, pos, "payload location")
        offset, nbytes = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        if offset % ALIGN_TO:
            raise FormatError(f"payload for {name!r} not {ALIGN_TO}-byte aligned",
                              offset=offset)
        if offset + nbytes > len(blob):
            raise FormatError(f"truncated payload for {name!r}", offset=offset)
        expect = int(np.prod(shape, dtype=np.int64)) * 4 if shape else 4
        if nbytes != expect:
            raise FormatError(f"payload size for {name!r} disagrees with shape",
                              offset=offset)
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4,
                            offset=offset).reshape(shape).copy()
        entries[name] = Tensor(arr, requires_grad=True)
    return ParamStore(entries, metadata={k: str(v) for k, v in metadata.items()})


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# seeding
# ---------------------------------------------------------------------------

class SeedTree:
    """Per-stage seed derivation by labeled hashing, so inserting a stage
    does not shift the randomness of the others."""

    def __init__(self, seed: int):
        self.seed = int(seed)

    def child_seed(self, label: str) -> int:
        return derive_seed(self.seed, label)

    def child(self, label: str) -> Rng:
        return Rng(self.child_seed(label))


def seed_everything(seed: int) -> SeedTree:
    return SeedTree(seed)


# ---------------------------------------------------------------------------
# pipeline
# ---------------------------------------------------------------------------

ALL_STAGES = ("mae", "align", "merge", "fuse_head")


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/toy"
    stages: tuple[str, ...] = ALL_STAGES
    # stage 1
    encoder: ViTConfig = field(default_factory=ViTConfig)
    mae_decoder: MAEDecoderConfig = field(default_factory=MAEDecoderConfig)
    mae_train: MAETrainConfig = field(default_factory=lambda: MAETrainConfig(
        epochs=50, warmup_epochs=5, batch_size=16))
    mae_images: int = 64
    # stage 2
    n_decoders: int = 2
    align_samples: int = 320
    align_train: AlignTrainConfig = field(default_factory=AlignTrainConfig)
    decoder_dim: int = 32
    # merge
    merge_method: str = "learned"
    merge_train: MergeTrainConfig = field(default_factory=lambda: MergeTrainConfig(
        epochs=4, batch_size=32))
    merge_probe_images: int = 256
    # fusion + head
    generalist: ViTConfig = field(default_factory=lambda: ViTConfig(dim=32, heads=4))
    head_steps: int = 700
    head_lr: float = 3e-3
    eval_samples: int = 50

    def to_json(self) -> str:
        def enc(obj):
            if hasattr(obj, "__dataclass_fields__"):
                return {k: enc(getattr(obj, k)) for k in obj.__dataclass_fields__}
            if isinstance(obj, tuple):
                return list(obj)
            return obj
        return json.dumps(enc(self), sort_keys=True, indent=2)


def _ocr_samples(rng: Rng, n: int, size: int) -> list[SFTSample]:
    out = []
    for i in range(n):
        child = rng.child(f"ocr{i}")
        glyph = i % synth.GLYPH_COUNT
        img = synth.glyph_image(glyph, child, size)
        out.append(SFTSample(image=img, prompt_tokens=[BOS, SEP],
                             target_tokens=[WORD_BASE + glyph, EOS], task="ocr"))
    return out


def write_loss_csv(path, records, header="step,loss,lr") -> None:
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for rec in records:
            fh.write(",".join(str(v) for v in rec) + "\n")


def write_metrics_csv(path, rows) -> None:
    """Metric rows as (task, step, metric, value)."""
    with open(path, "w") as fh:
        fh.write("task,step,metric,value\n")
        for task, step, metric, value in rows:
            fh.write(f"{task},{step},{metric},{value}\n")


def run_pipeline(config: ExperimentConfig) -> dict:
    """Execute the selected stage sequence, writing checkpoints, loss CSVs,
    and a manifest recording stage order, seeds, and input/output hashes."""
    for stage in config.stages:
        if stage not in ALL_STAGES:
            raise UsageError(f"unknown stage {stage!r}; valid: {ALL_STAGES}")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tree = seed_everything(config.seed)
    manifest = {
        "seed": config.seed,
        "stages": list(config.stages),
        "inputs": {},
        "outputs": {},
        "stage_seeds": {s: tree.child_seed(s) for s in config.stages},
    }
    (out / "config.json").write_text(config.to_json())

    enc_cfg = config.encoder
    stage1_path = out / "stage1_encoder.ckpt"
    aligned_paths = [out / f"aligned_{k}.ckpt" for k in range(config.n_decoders)]
    merged_path = out / "merged_encoder.ckpt"
    head_path = out / "bbox_head.ckpt"

    if "mae" in config.stages:
        rng = tree.child("mae")
        images = synth.mae_pretrain_images(rng.child("data"), config.mae_images,
                                           enc_cfg.image_size)
        encoder, records = train_mae(images, enc_cfg, config.mae_decoder,
                                     config.mae_train, rng.child("train"))
        save_checkpoint(encoder, stage1_path)
        write_loss_csv(out / "mae_loss.csv", records)
        manifest["outputs"]["stage1_encoder"] = file_sha256(stage1_path)

    if "align" in config.stages:
        manifest["inputs"]["stage1_encoder"] = file_sha256(stage1_path)
        base_encoder = load_checkpoint(stage1_path)
        rng = tree.child("align")
        samples = _ocr_samples(rng.child("data"), config.align_samples,
                               enc_cfg.image_size)
        for k in range(config.n_decoders):
            dec_cfg = ToyDecoderConfig(dim=config.decoder_dim,
                                       identity=f"toy-decoder-{k}")
            krng = rng.child(f"decoder{k}")
            decoder = init_decoder(dec_cfg, krng.child("init"))
            projector = init_projector(enc_cfg.dim, 2 * dec_cfg.dim, dec_cfg.dim,
                                       krng.child("proj"))
            aligned = train_align(base_encoder, enc_cfg, decoder, dec_cfg,
                                  projector, samples, config.align_train,
                                  krng.child("train"))
            save_checkpoint(aligned, aligned_paths[k])
            manifest["outputs"][f"aligned_{k}"] = file_sha256(aligned_paths[k])

    if "merge" in config.stages:
        for k, p in enumerate(aligned_paths):
            manifest["inputs"][f"aligned_{k}"] = file_sha256(p)
        teachers = TeacherSet([load_checkpoint(p) for p in aligned_paths], enc_cfg)
        rng = tree.child("merge")
        probe = synth.mae_pretrain_images(rng.child("probe"),
                                          config.merge_probe_images,
                                          enc_cfg.image_size)
        if config.merge_method == "learned":
            coeffs, trace = train_merge_coefficients(teachers, probe,
                                                     config.merge_train,
                                                     rng.child("train"))
            merged = materialize(coeffs, teachers)
            (out / "merge_coefficients.json").write_text(coeffs.to_json())
            write_loss_csv(out / "merge_loss.csv", trace, header="step,loss")
        else:
            merged = merge_pipeline(teachers, probe, config.merge_method,
                                    config.merge_train, rng.child("train"))
        merged.metadata["method"] = config.merge_method
        save_checkpoint(merged, merged_path)
        manifest["outputs"]["merged_encoder"] = file_sha256(merged_path)

    if "fuse_head" in config.stages:
        manifest["inputs"]["merged_encoder"] = file_sha256(merged_path)
        specialist = load_checkpoint(merged_path)
        rng = tree.child("fuse_head")
        generalist = FrozenEncoder(init_params(config.generalist,
                                               rng.child("generalist")),
                                   config.generalist)
        head = init_bbox_head(config.generalist.dim + enc_cfg.dim,
                              rng.child("head"))
        train_rng = rng.child("data")
        samples = [synth.square_localization_sample(train_rng.child(f"t{i}"),
                                                    enc_cfg.image_size)
                   for i in range(256)]

        def features(image):
            return fused_features(generalist, specialist, enc_cfg, image).grid

        records = finetune(features, head,
                           lambda grid, s: bbox_sample_loss(grid, s, head),
                           samples, [specialist], steps=config.head_steps,
                           lr=config.head_lr, rng=rng.child("train"))
        generalist.verify_frozen()
        save_checkpoint(head, head_path)
        write_loss_csv(out / "head_loss.csv", records, header="step,loss")
        manifest["outputs"]["bbox_head"] = file_sha256(head_path)

        eval_rng = rng.child("eval")
        ious, hits = [], []
        rows = []
        for i in range(config.eval_samples):
            img, gold = synth.square_localization_sample(eval_rng.child(f"e{i}"),
                                                         enc_cfg.image_size)
            grid = features(img)
            pred = predict_bbox(attention_pool(grid, head), head)
            m = box_metrics(pred, BBox(*[float(v) for v in gold]))
            ious.append(m["iou"])
            hits.append(m["center_hit"])
            rows.append(("locate_square", i, "iou", m["iou"]))
        metrics = {
            "mean_iou": float(np.mean(ious)),
            "center_accuracy": float(np.mean(hits)),
            "n_eval": config.eval_samples,
        }
        manifest["metrics"] = metrics
        write_metrics_csv(out / "head_metrics.csv", rows)
        (out / "metrics.json").write_text(json.dumps(metrics, sort_keys=True,
                                                     indent=2))

    if config.merge_method == "none":
        manifest["baseline"] = "single-decoder (no merge)"
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True,
                                                  indent=2))
    return manifest
