"""Checkpoint format, seed tree, CSV artifacts, pipeline stages, and CLI."""

import json
import struct

import numpy as np
import pytest

from conftest import assert_stores_equal
from docenc.cli import _apply_config_file, build_parser, main
from docenc.errors import FormatError, UsageError
from docenc.harness import (
    ALIGN_TO,
    ALL_STAGES,
    MAGIC,
    ExperimentConfig,
    SeedTree,
    file_sha256,
    load_checkpoint,
    run_pipeline,
    save_checkpoint,
    seed_everything,
    write_loss_csv,
    write_metrics_csv,
)
from docenc.mae import MAETrainConfig
from docenc.numkernel import ParamStore, Rng, Tensor
from docenc.vit import ViTConfig, init_params

TINY = ViTConfig(image_size=16, patch_size=8, dim=8, depth=1, heads=2, mlp_ratio=2)


def _tiny_store():
    store = init_params(TINY, Rng(0))
    store.metadata["stage"] = "test"
    return store


# --- checkpoint format -----------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    store = _tiny_store()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(store, p1)
    loaded = load_checkpoint(p1)
    assert_stores_equal(store, loaded)
    assert loaded.metadata == store.metadata
    save_checkpoint(loaded, p2)
    assert file_sha256(p1) == file_sha256(p2)


def test_checkpoint_payloads_aligned(tmp_path):
    path = tmp_path / "c.ckpt"
    save_checkpoint(_tiny_store(), path)
    blob = path.read_bytes()
    # walk the header/table exactly as written and check each payload offset
    pos = len(MAGIC) + 4
    (meta_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4 + meta_len
    (n,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", blob, pos)
        pos += 2 + name_len
        _, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2 + 4 * ndim
        offset, nbytes = struct.unpack_from("<QQ", blob, pos)
        pos += 16
        assert offset % ALIGN_TO == 0
        assert offset + nbytes <= len(blob)


def test_checkpoint_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    save_checkpoint(_tiny_store(), path)
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError) as exc:
        load_checkpoint(path)
    assert exc.value.offset == 0


def test_checkpoint_wrong_version_rejected(tmp_path):
    path = tmp_path / "ver.ckpt"
    save_checkpoint(_tiny_store(), path)
    blob = bytearray(path.read_bytes())
    struct.pack_into("<H", blob, len(MAGIC), 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)


def test_checkpoint_truncation_rejected(tmp_path):
    path = tmp_path / "trunc.ckpt"
    save_checkpoint(_tiny_store(), path)
    blob = path.read_bytes()
    for cut in (4, len(blob) // 2, len(blob) - 8):
        path.write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            load_checkpoint(path)


def test_checkpoint_unaligned_offset_rejected(tmp_path):
    store = ParamStore()
    store["w"] = Tensor(np.arange(4, dtype=np.float32))
    path = tmp_path / "mis.ckpt"
    save_checkpoint(store, path)
    blob = bytearray(path.read_bytes())
    pos = len(MAGIC) + 4
    (meta_len,) = struct.unpack_from("<I", blob, pos)
    pos += 4 + meta_len + 4          # metadata + tensor count
    (name_len,) = struct.unpack_from("<H", blob, pos)
    pos += 2 + name_len + 2 + 4      # name + dtype/ndim + one shape dim
    (offset,) = struct.unpack_from("<Q", blob, pos)
    struct.pack_into("<Q", blob, pos, offset + 1)
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="aligned"):
        load_checkpoint(path)


def test_checkpoint_metadata_survives(tmp_path):
    store = ParamStore(metadata={"stage": "align", "aligned_to": "toy-decoder-1"})
    store["x"] = Tensor(np.ones((2, 2), np.float32))
    path = tmp_path / "meta.ckpt"
    save_checkpoint(store, path)
    assert load_checkpoint(path).metadata["aligned_to"] == "toy-decoder-1"


# --- seed tree ---------------------------------------------------------------------

def test_seed_tree_label_determinism():
    tree = seed_everything(7)
    assert tree.child_seed("mae") == SeedTree(7).child_seed("mae")
    assert tree.child_seed("mae") != tree.child_seed("align")
    assert tree.child_seed("mae") != seed_everything(8).child_seed("mae")


def test_seed_tree_collision_scan():
    tree = seed_everything(0)
    labels = list(ALL_STAGES) + [f"stage{i}" for i in range(200)]
    seeds = [tree.child_seed(lbl) for lbl in labels]
    assert len(set(seeds)) == len(labels)


def test_seed_tree_streams_uniform_and_independent():
    # chi-square critical values at p = 0.01 with df = 9: 21.666
    tree = seed_everything(123)
    a = tree.child("alpha").integers(0, 10, (10_000,))
    b = tree.child("beta").integers(0, 10, (10_000,))
    for draws in (a, b):
        counts = np.bincount(draws, minlength=10)
        stat = ((counts - 1000.0) ** 2 / 1000.0).sum()
        assert stat < 21.666  # uniformity not rejected at p = 0.01
    # independence: 4x4 contingency of coarse bins, df = 9
    qa, qb = a[:10_000] // 3, b[:10_000] // 3
    qa, qb = np.clip(qa, 0, 3), np.clip(qb, 0, 3)
    table = np.zeros((4, 4))
    np.add.at(table, (qa, qb), 1)
    expected = table.sum(1, keepdims=True) * table.sum(0, keepdims=True) / table.sum()
    stat = ((table - expected) ** 2 / expected).sum()
    assert stat < 21.666


# --- CSV artifacts ---------------------------------------------------------------------

def test_write_loss_csv(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_csv(path, [(0, 1.5, 0.001), (1, 1.2, 0.0009)])
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,loss,lr"
    assert lines[1] == "0,1.5,0.001"
    assert len(lines) == 3


def test_write_metrics_csv(tmp_path):
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, [("locate", 0, "iou", 0.75)])
    lines = path.read_text().strip().splitlines()
    assert lines == ["task,step,metric,value", "locate,0,iou,0.75"]


def test_experiment_config_serializes():
    cfg = ExperimentConfig(seed=3, stages=("mae",))
    payload = json.loads(cfg.to_json())
    assert payload["seed"] == 3
    assert payload["stages"] == ["mae"]
    assert payload["encoder"]["dim"] == 64


# --- pipeline stages ------------------------------------------------------------------

def _tiny_experiment(tmp_path, stages, **kw):
    return ExperimentConfig(
        seed=0, output_dir=str(tmp_path / "run"), stages=stages,
        encoder=TINY,
        mae_train=MAETrainConfig(epochs=2, warmup_epochs=0, batch_size=4),
        mae_images=8, n_decoders=2, align_samples=8, decoder_dim=8,
        merge_probe_images=4, **kw)


def test_pipeline_unknown_stage_rejected(tmp_path):
    with pytest.raises(UsageError, match="fuse_head"):
        run_pipeline(_tiny_experiment(tmp_path, ("mae", "polish")))


def test_pipeline_mae_stage_outputs(tmp_path):
    cfg = _tiny_experiment(tmp_path, ("mae",))
    manifest = run_pipeline(cfg)
    out = tmp_path / "run"
    ckpt = out / "stage1_encoder.ckpt"
    assert ckpt.exists()
    assert manifest["outputs"]["stage1_encoder"] == file_sha256(ckpt)
    assert (out / "mae_loss.csv").exists()
    assert json.loads((out / "manifest.json").read_text()) == manifest
    assert load_checkpoint(ckpt).metadata["stage"] == "mae"


def test_pipeline_input_hashes_match_consumed_files(tmp_path):
    cfg = _tiny_experiment(tmp_path, ("mae", "align"))
    manifest = run_pipeline(cfg)
    out = tmp_path / "run"
    assert manifest["inputs"]["stage1_encoder"] == file_sha256(
        out / "stage1_encoder.ckpt")
    for k in range(2):
        assert (out / f"aligned_{k}.ckpt").exists()
    assert (manifest["outputs"]["aligned_0"]
            != manifest["outputs"]["aligned_1"])  # distinct decoder seeds


def test_pipeline_merge_none_marks_baseline(tmp_path):
    cfg = _tiny_experiment(tmp_path, ("mae", "align", "merge"),
                           merge_method="none")
    manifest = run_pipeline(cfg)
    assert manifest["baseline"] == "single-decoder (no merge)"
    merged = load_checkpoint(tmp_path / "run" / "merged_encoder.ckpt")
    assert merged.metadata["method"] == "none"
    teacher0 = load_checkpoint(tmp_path / "run" / "aligned_0.ckpt")
    for name in teacher0.names():
        np.testing.assert_array_equal(merged[name].data, teacher0[name].data)


# --- CLI ---------------------------------------------------------------------------------

def test_cli_grad_check_returns_zero(capsys):
    assert main(["grad-check"]) == 0
    assert "grad_check" in capsys.readouterr().out


def test_cli_analyze_patches(tmp_path, capsys):
    rc = main(["analyze-patches", "--out", str(tmp_path), "--images", "12",
               "--sample-n", "12"])
    assert rc == 0
    ordering = json.loads((tmp_path / "ordering.json").read_text())
    assert ordering["a_below_b"] is True
    assert (tmp_path / "corpus_a_hist.csv").exists()
    assert (tmp_path / "corpus_b.json").exists()


def test_cli_pretrain_mae(tmp_path, capsys):
    rc = main(["pretrain-mae", "--out", str(tmp_path), "--images", "4",
               "--epochs", "2", "--batch-size", "2", "--image-size", "16",
               "--patch-size", "8", "--dim", "8", "--depth", "1",
               "--heads", "2"])
    assert rc == 0
    assert (tmp_path / "stage1_encoder.ckpt").exists()
    assert "final loss" in capsys.readouterr().out


def test_cli_config_file_flag_precedence(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"images": 99, "seed": 5}))
    parser = build_parser()

    def parsed(argv):
        args = parser.parse_args(argv)
        sub = next(a for a in parser._actions
                   if isinstance(a, __import__("argparse")._SubParsersAction))
        chosen = sub.choices[args.command]
        args._defaults = {a.dest: a.default for a in chosen._actions}
        return _apply_config_file(args)

    # defaults give way to the config file
    args = parsed(["pretrain-mae", "--config", str(cfg_path)])
    assert args.images == 99 and args.seed == 5
    # explicit flags beat the config file unless --strict-config
    args = parsed(["pretrain-mae", "--config", str(cfg_path), "--images", "7"])
    assert args.images == 7
    args = parsed(["pretrain-mae", "--config", str(cfg_path), "--images", "7",
                   "--strict-config"])
    assert args.images == 99
