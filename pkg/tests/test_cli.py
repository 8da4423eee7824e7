import json
from pathlib import Path

import numpy as np
import pytest

from fusionreid import cli
from fusionreid import datagen as dg
from fusionreid.runconfig import apply_overrides, default_config, load_config
from fusionreid.errors import ConfigError

# small config so CLI runs stay fast
FAST = [
    "dataset.num_identities=6",
    "dataset.images_per_identity=4",
    "dataset.eval_identities=2",
    "dataset.height=32",
    "dataset.width=16",
    "model.patch_size=8",
    "model.image={\"depth\":1,\"width\":16,\"heads\":2,\"mlp_ratio\":2,\"max_positions\":64}",
    "model.text={\"depth\":1,\"width\":16,\"heads\":2,\"mlp_ratio\":2,\"max_positions\":64}",
    "model.fusion={\"depth\":1,\"width\":16,\"heads\":2,\"mlp_ratio\":2,\"max_positions\":64}",
    "pretrain.total_steps=4",
    "pretrain.warmup_steps=1",
    "pretrain.batch_size=6",
    "pretrain.image_mask_ratio=0.3",
    "pretrain.text_mask_ratio=0.3",
    "finetune.total_steps=4",
    "finetune.warmup_steps=1",
    "finetune.batch_size=4",
    "finetune.p=2",
    "finetune.k=2",
    "eval.max_rank=5",
]


def fast_args(extra):
    out = []
    for item in FAST:
        out += ["--set", item]
    return out + extra


def make_dataset(tmp_path):
    code = cli.main(["synth"] + fast_args(["--out", str(tmp_path / "synthrun")]))
    assert code == 0
    return str(tmp_path / "synthrun" / "dataset")


# ---------------------------------------------------------------------------
# config machinery
# ---------------------------------------------------------------------------

def test_default_config_is_valid():
    load_config(None, [])


def test_unknown_key_rejected():
    with pytest.raises(ConfigError, match="nonsense"):
        load_config(None, ["finetune.nonsense=3"])


def test_override_parsing_types():
    cfg = apply_overrides(default_config(), ["finetune.lr=0.25", "eval.feature_path=image"])
    assert cfg["finetune"]["lr"] == 0.25
    assert cfg["eval"]["feature_path"] == "image"


def test_config_file_merge(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"finetune": {"total_steps": 70}}))
    cfg = load_config(str(path), [])
    assert cfg["finetune"]["total_steps"] == 70
    assert cfg["dataset"]["num_identities"] == 20  # untouched default


def test_invalid_config_exits_2_without_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    code = cli.main(["synth", "--set", "dataset.num_identities=0",
                     "--out", str(out)])
    assert code == 2
    assert not out.exists()  # validation precedes any write


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def test_synth_writes_dataset_and_config(tmp_path):
    out = tmp_path / "run"
    code = cli.main(["synth"] + fast_args(["--out", str(out)]))
    assert code == 0
    assert (out / "config.json").exists()
    files = sorted((out / "dataset" / "images").glob("*.ppm"))
    assert len(files) == 24  # 6 identities x 4 images
    manifest = json.loads((out / "dataset" / "manifest.json").read_text())
    assert len(manifest["samples"]) == 24


def test_synth_determinism_byte_identical(tmp_path):
    cli.main(["synth"] + fast_args(["--out", str(tmp_path / "a")]))
    cli.main(["synth"] + fast_args(["--out", str(tmp_path / "b")]))
    ma = (tmp_path / "a" / "dataset" / "manifest.json").read_bytes()
    mb = (tmp_path / "b" / "dataset" / "manifest.json").read_bytes()
    assert ma == mb
    for f in sorted((tmp_path / "a" / "dataset" / "images").iterdir()):
        twin = tmp_path / "b" / "dataset" / "images" / f.name
        assert f.read_bytes() == twin.read_bytes()


def test_synth_roundtrip_through_loader(tmp_path):
    path = make_dataset(tmp_path)
    ds = dg.load_dataset(path)
    assert ds.num_identities == 6
    assert all(s.image.shape == (32, 16, 3) for s in ds.samples)


# ---------------------------------------------------------------------------
# pretrain / finetune
# ---------------------------------------------------------------------------

def test_pretrain_smoke_run(tmp_path):
    data = make_dataset(tmp_path)
    out = tmp_path / "pre"
    code = cli.main(["pretrain", "--dataset", data] + fast_args(["--out", str(out)]))
    assert code == 0
    log = (out / "train_log.csv").read_text().strip().splitlines()
    assert len(log) == 1 + 4  # header + total_steps rows
    assert (out / "checkpoint.bin").exists()
    assert (out / "loss_curves.png").exists()
    assert (out / "loss_report.json").exists()


def test_pretrain_mask_strategy_flag(tmp_path):
    data = make_dataset(tmp_path)
    a = cli.main(["pretrain", "--dataset", data] + fast_args(
        ["--set", "pretrain.mask_strategy=random", "--out", str(tmp_path / "r")]))
    b = cli.main(["pretrain", "--dataset", data] + fast_args(
        ["--set", "pretrain.mask_strategy=region", "--out", str(tmp_path / "g")]))
    assert a == 0 and b == 0
    ra = (tmp_path / "r" / "train_log.csv").read_text()
    rb = (tmp_path / "g" / "train_log.csv").read_text()
    assert ra != rb  # different planners, different trajectories


def test_pretrain_resume_reproduces_log(tmp_path):
    data = make_dataset(tmp_path)
    full = tmp_path / "full"
    cli.main(["pretrain", "--dataset", data] + fast_args(["--out", str(full)]))
    # interrupted at 2 of 4 steps, then resumed to completion
    half = tmp_path / "half"
    cli.main(["pretrain", "--dataset", data, "--max-steps", "2"] +
             fast_args(["--out", str(half)]))
    resumed = tmp_path / "resumed"
    code = cli.main(["pretrain", "--dataset", data,
                     "--resume", str(half / "checkpoint.bin")] +
                    fast_args(["--out", str(resumed)]))
    assert code == 0
    full_rows = (full / "train_log.csv").read_text().strip().splitlines()
    half_rows = (half / "train_log.csv").read_text().strip().splitlines()
    resumed_rows = (resumed / "train_log.csv").read_text().strip().splitlines()
    assert half_rows == full_rows[:3]                 # header + steps 0,1
    assert resumed_rows[1:] == full_rows[3:]          # steps 2,3 bit-identical


def test_finetune_smoke_and_eval_after(tmp_path):
    data = make_dataset(tmp_path)
    out = tmp_path / "ft"
    code = cli.main(["finetune", "--dataset", data, "--eval-after"] +
                    fast_args(["--out", str(out)]))
    assert code == 0
    assert (out / "checkpoint.bin").exists()
    payload = json.loads((out / "eval" / "eval_result.json").read_text())
    assert 0.0 <= payload["mAP"] <= 1.0
    assert (out / "eval" / "per_query_ap.csv").exists()
    assert (out / "eval" / "cmc_curve.png").exists()


def test_finetune_from_pretrained_differs_from_scratch(tmp_path):
    data = make_dataset(tmp_path)
    pre = tmp_path / "pre"
    cli.main(["pretrain", "--dataset", data] + fast_args(["--out", str(pre)]))
    cli.main(["finetune", "--dataset", data] + fast_args(["--out", str(tmp_path / "scratch")]))
    cli.main(["finetune", "--dataset", data, "--init", str(pre / "checkpoint.bin")] +
             fast_args(["--out", str(tmp_path / "warm")]))
    a = (tmp_path / "scratch" / "train_log.csv").read_text()
    b = (tmp_path / "warm" / "train_log.csv").read_text()
    assert a != b


# ---------------------------------------------------------------------------
# eval / gradcam / ablate
# ---------------------------------------------------------------------------

def finetuned_checkpoint(tmp_path):
    data = make_dataset(tmp_path)
    out = tmp_path / "ft"
    cli.main(["finetune", "--dataset", data] + fast_args(["--out", str(out)]))
    return data, str(out / "checkpoint.bin")


def test_eval_command(tmp_path):
    data, ckpt = finetuned_checkpoint(tmp_path)
    out = tmp_path / "ev"
    code = cli.main(["eval", "--dataset", data, "--checkpoint", ckpt] +
                    fast_args(["--out", str(out)]))
    assert code == 0
    payload = json.loads((out / "eval" / "eval_result.json").read_text())
    assert len(payload["cmc"]) == 5


def test_eval_missing_checkpoint_is_data_error(tmp_path):
    data = make_dataset(tmp_path)
    code = cli.main(["eval", "--dataset", data, "--checkpoint",
                     str(tmp_path / "nope.bin")] +
                    fast_args(["--out", str(tmp_path / "ev")]))
    assert code == 3


def test_gradcam_command(tmp_path):
    data, ckpt = finetuned_checkpoint(tmp_path)
    out = tmp_path / "gc"
    code = cli.main(["gradcam", "--dataset", data, "--checkpoint", ckpt,
                     "--ids", "0,3"] + fast_args(["--out", str(out)]))
    assert code == 0
    files = sorted((out / "gradcam").iterdir())
    names = [f.name for f in files]
    assert "sample000000.pgm" in names
    assert "sample000000_overlay.ppm" in names
    assert "sample000000.csv" in names
    assert "sample000000.png" in names
    assert "sample000003.pgm" in names


def test_gradcam_determinism(tmp_path):
    data, ckpt = finetuned_checkpoint(tmp_path)
    for name in ("g1", "g2"):
        cli.main(["gradcam", "--dataset", data, "--checkpoint", ckpt,
                  "--ids", "1"] + fast_args(["--out", str(tmp_path / name)]))
    a = (tmp_path / "g1" / "gradcam" / "sample000001.csv").read_bytes()
    b = (tmp_path / "g2" / "gradcam" / "sample000001.csv").read_bytes()
    assert a == b


def test_gradcam_bad_ids_exit_2(tmp_path):
    data, ckpt = finetuned_checkpoint(tmp_path)
    code = cli.main(["gradcam", "--dataset", data, "--checkpoint", ckpt,
                     "--ids", "zebra"] + fast_args(["--out", str(tmp_path / "gz")]))
    assert code == 2


def test_ablate_emits_three_rows(tmp_path):
    data = make_dataset(tmp_path)
    out = tmp_path / "ab"
    code = cli.main(["ablate", "--dataset", data, "--seeds", "0"] +
                    fast_args(["--out", str(out)]))
    assert code == 0
    rows = (out / "ablation.csv").read_text().strip().splitlines()
    assert rows[0] == "arm,mAP,rank1"
    assert [r.split(",")[0] for r in rows[1:]] == ["baseline", "random_mask", "region_mask"]
    summary = json.loads((out / "ablation_summary.json").read_text())
    assert "untrained_mAP" in summary
    assert (out / "ablation.png").exists()


def test_output_root_env_var(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    code = cli.main(["synth"] + fast_args([]))  # no --out given
    assert code == 0
    assert (tmp_path / "root" / "synth" / "dataset" / "manifest.json").exists()
