import numpy as np
import pytest

from frozensr import cli, imagecore, training
from frozensr.errors import ConfigError
from frozensr.model import Checkpoint, ModelConfig, init_parameters, load_checkpoint, parameter_count, save_checkpoint

TINY = ModelConfig(scale=4, depth=2, base_channels=4)


@pytest.fixture
def dataset(tmp_path, tissue):
    src = tmp_path / "src"
    src.mkdir()
    for k in range(2):
        imagecore.save_image(tissue(k, 128), src / f"s{k}.png")
    out = tmp_path / "ds"
    assert cli.main(["prepare", "--src-dir", str(src), "--out-dir", str(out), "--scale", "4",
                     "--size", "64", "--stride", "32", "--split-fraction", "0.25"]) == 0
    return out


@pytest.fixture
def ckpt_path(tmp_path):
    path = tmp_path / "tiny.ckpt"
    save_checkpoint(Checkpoint(TINY, init_parameters(TINY, 0)), path)
    return path


def _write_config(path, **values):
    path.write_text("".join(f"{k} = {v}\n" for k, v in values.items()), encoding="utf-8")
    return path


# --- run configuration ------------------------------------------------------


def test_parse_run_config_types_and_comments():
    rc = cli.parse_run_config(
        "# run\n\ndata_dir = a/b   # trailing\nout_dir=out\nlearning_rate = 1e-4\nattention_enabled = False\ndepth = 2\n"
    )
    assert rc.data_dir == "a/b" and rc.out_dir == "out"
    assert rc.learning_rate == 1e-4 and rc.attention_enabled is False and rc.depth == 2
    assert str(rc.checkpoint_path).endswith("model.ckpt")


@pytest.mark.parametrize(
    "text,match",
    [
        ("out_dir = x\n", "data_dir"),
        ("data_dir = x\n", "out_dir"),
        ("data_dir = x\nout_dir = y\nwarp = 9\n", "unknown key"),
        ("data_dir = x\nout_dir = y\nout_dir = z\n", "duplicate"),
        ("data_dir = x\nout_dir = y\ndepth = two\n", "depth expects int"),
        ("data_dir = x\nout_dir = y\nattention_enabled = yes\n", "attention_enabled"),
        ("data_dir x\n", "key = value"),
    ],
)
def test_parse_run_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        cli.parse_run_config(text)


def test_train_reports_missing_data_dir(tmp_path, capsys):
    cfg = _write_config(tmp_path / "run.cfg", data_dir=tmp_path / "missing", out_dir=tmp_path / "out")
    assert cli.main(["train", "--config", str(cfg)]) == 1
    assert "data_dir" in capsys.readouterr().err


def test_train_then_eval(tmp_path, dataset, capsys):
    cfg = _write_config(
        tmp_path / "run.cfg", data_dir=dataset, out_dir=tmp_path / "run", depth=2, base_channels=4,
        epochs=1, learning_rate=1e-3, val_interval=2,
    )
    assert cli.main(["train", "--config", str(cfg)]) == 0
    log = training.TrainingLog.read_csv(tmp_path / "run" / "training_log.csv")
    assert log.rows[0].step == 0 and log.rows[-1].step > 0
    ckpt = load_checkpoint(tmp_path / "run" / "model.ckpt")
    assert ckpt.config.scale == 4 and ckpt.config.depth == 2

    assert cli.main(["eval", "--checkpoint", str(tmp_path / "run" / "model.ckpt"), "--data-dir", str(dataset),
                     "--out-dir", str(tmp_path / "ev")]) == 0
    out = capsys.readouterr().out
    assert "bicubic (" in out and "ours mean" in out
    recs = training.read_records_csv(tmp_path / "ev" / "model_metrics.csv")
    agg = training.read_records_csv(tmp_path / "ev" / "model_aggregate.csv")[0]
    assert agg.psnr_db == pytest.approx(np.mean([r.psnr_db for r in recs]), abs=1e-9)
    assert (tmp_path / "ev" / "bicubic_metrics.csv").is_file()


def test_eval_rejects_unsupported_scale(tmp_path, dataset, ckpt_path, capsys):
    meta = dataset / "dataset.json"
    meta.write_text(meta.read_text().replace('"scale": 4', '"scale": 1'))
    assert cli.main(["eval", "--checkpoint", str(ckpt_path), "--data-dir", str(dataset)]) == 1
    assert "x1" in capsys.readouterr().err


# --- infer / stitch ---------------------------------------------------------


@pytest.mark.parametrize("side", [64, 32])
def test_infer_upscales(tmp_path, ckpt_path, rng, side):
    imagecore.save_image(rng.random((side, side, 3)), tmp_path / "in.png")
    assert cli.main(["infer", "--checkpoint", str(ckpt_path), "--input", str(tmp_path / "in.png"),
                     "--output", str(tmp_path / "out.png")]) == 0
    assert imagecore.load_image(tmp_path / "out.png").shape == (side * 4, side * 4, 3)


def test_infer_untrained_matches_bilinear(tmp_path, ckpt_path, tissue):
    lr = imagecore.box_downsample(tissue(3, 64), 4)
    imagecore.save_image(lr, tmp_path / "in.png")
    cli.main(["infer", "--checkpoint", str(ckpt_path), "--input", str(tmp_path / "in.png"),
              "--output", str(tmp_path / "out.png")])
    expected = imagecore.to_uint8(imagecore.bilinear_upsample(imagecore.load_image(tmp_path / "in.png"), 4))
    got = imagecore.to_uint8(imagecore.load_image(tmp_path / "out.png"))
    assert np.abs(got.astype(int) - expected).max() <= 1


def test_infer_rejects_bad_dimensions(tmp_path, rng, capsys):
    path = tmp_path / "deep.ckpt"
    cfg = ModelConfig(scale=4, depth=4, base_channels=2)
    save_checkpoint(Checkpoint(cfg, init_parameters(cfg, 0)), path)
    imagecore.save_image(rng.random((33, 33, 3)), tmp_path / "in.png")
    assert cli.main(["infer", "--checkpoint", str(path), "--input", str(tmp_path / "in.png"),
                     "--output", str(tmp_path / "out.png")]) == 1
    assert "multiples of 4" in capsys.readouterr().err


def test_stitch_grid(tmp_path, rng):
    full = rng.random((64, 64, 3))
    (tmp_path / "p").mkdir()
    for k, patch in enumerate(imagecore.split_grid(full, 4, 4)):
        imagecore.save_image(patch, tmp_path / "p" / f"tile_{k:02d}.png")
    assert cli.main(["stitch", "--patch-dir", str(tmp_path / "p"), "--output", str(tmp_path / "full.png")]) == 0
    assert np.array_equal(imagecore.load_image(tmp_path / "full.png"), imagecore.to_uint8(full) / 255.0)

    (tmp_path / "p" / "tile_15.png").unlink()
    assert cli.main(["stitch", "--patch-dir", str(tmp_path / "p"), "--output", str(tmp_path / "x.png")]) == 1


# --- report / bench ---------------------------------------------------------


def test_report_montage_and_captions(tmp_path, dataset, ckpt_path):
    out = tmp_path / "rep"
    assert cli.main(["report", "--checkpoint", str(ckpt_path), "--data-dir", str(dataset), "--out-dir", str(out),
                     "--n-examples", "50"]) == 0
    montages = sorted(out.glob("*_montage.png"))
    test_pairs = [ln for ln in (dataset / "manifest.jsonl").read_text().splitlines() if '"test"' in ln]
    assert len(montages) == len(test_pairs)
    assert imagecore.load_image(montages[0]).shape == (64, 192, 3)

    assert cli.main(["eval", "--checkpoint", str(ckpt_path), "--data-dir", str(dataset),
                     "--out-dir", str(tmp_path / "ev")]) == 0
    recs = {r.item_id: r for r in training.read_records_csv(tmp_path / "ev" / "model_metrics.csv")}
    for m in montages:
        pid = m.name[: -len("_montage.png")]
        caption = (out / f"{pid}_caption.txt").read_text()
        ssim_s, psnr_s = caption.split("ours (")[1].rstrip(")\n").split("/")
        assert float(ssim_s) == pytest.approx(recs[pid].ssim, abs=1e-9)
        assert float(psnr_s) == pytest.approx(recs[pid].psnr_db, abs=1e-9)


def test_bench_output(ckpt_path, capsys):
    assert cli.main(["bench", "--checkpoint", str(ckpt_path), "-n", "3"]) == 0
    header, values = capsys.readouterr().out.strip().splitlines()
    assert header == "mean_ms,std_ms,param_count"
    mean_ms, std_ms, count = values.split(",")
    assert float(mean_ms) > 0 and float(std_ms) >= 0
    assert int(count) == parameter_count(TINY)


def test_prepare_is_idempotent(tmp_path, dataset, tissue):
    first = (dataset / "manifest.jsonl").read_bytes()
    assert cli.main(["prepare", "--src-dir", str(tmp_path / "src"), "--out-dir", str(dataset), "--scale", "4",
                     "--size", "64", "--stride", "32", "--split-fraction", "0.25"]) == 0
    assert (dataset / "manifest.jsonl").read_bytes() == first
    assert len(list((dataset / "hr").glob("*.png"))) == 2 * 9
