import numpy as np
import pytest

from pseudoflow import diffcore as dc
from pseudoflow import pipeline
from pseudoflow.cli import main
from pseudoflow.pipeline import PipelineConfig, generate_pseudo_labels, init_params
from pseudoflow.scenes import generate_synthetic_scene, read_scene, sample_labels, scene_to_bytes, write_scene

SMALL = ["--set", "enc_widths=8,8", "--set", "enc_radii=0.5,1.0", "--set", "enc_ratios=1,0.5",
         "--set", "corr_hidden=8"]


def _small_config(**kw):
    return PipelineConfig(enc_widths=(8, 8), enc_radii=(0.5, 1.0), enc_ratios=(1.0, 0.5), corr_hidden=8, **kw)


@pytest.fixture
def data(tmp_path):
    assert main(["gen", "--scenes", "3", "--points", "64", "--seed", "1", "--out", str(tmp_path / "d")]) == 0
    return tmp_path / "d"


def test_gen_point_count_and_replay(tmp_path, capsys):
    assert main(["gen", "--scenes", "2", "--points", "8", "--out", str(tmp_path / "a")]) == 0
    out = capsys.readouterr().out
    assert "n=8" in out and "# end config" in out
    assert read_scene(tmp_path / "a" / "scene_0000.ssfl").n == 8
    assert main(["gen", "--scenes", "2", "--points", "8", "--out", str(tmp_path / "b")]) == 0
    for name in ("scene_0000.ssfl", "scene_0001.ssfl"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_gen_rejects_bad_arguments(tmp_path, capsys):
    assert main(["gen", "--scenes", "1", "--points", "0", "--out", str(tmp_path)]) == 2
    assert main(["gen", "--scenes", "1", "--points", "4", "--noise", "-1", "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--points", "4"])
    assert exc.value.code == 2


def test_train_zero_epochs_writes_init(tmp_path, data, capsys):
    ckpt = tmp_path / "w.ssfw"
    rc = main(["train", "--data", str(data), *SMALL, "--set", "epochs=0", "--ratio", "1/16", "--out", str(ckpt)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "label_ratio = 1/16" in out and "epochs=0" in out
    assert dc.load_params(ckpt).equal(init_params(_small_config(epochs=0)))
    assert (tmp_path / "w.ssfw.report.txt").read_text().startswith("# training report")


def test_train_rerun_is_identical(tmp_path, data, capsys):
    args = ["train", "--data", str(data), *SMALL, "--set", "epochs=2", "--ratio", "1/8"]
    assert main([*args, "--out", str(tmp_path / "a.ssfw")]) == 0
    first = capsys.readouterr().out
    assert main([*args, "--out", str(tmp_path / "b.ssfw")]) == 0
    second = capsys.readouterr().out

    def final(text):
        return next(line.split()[1] for line in text.splitlines() if line.startswith("epochs="))

    assert final(first) == final(second)
    assert (tmp_path / "a.ssfw").read_bytes() == (tmp_path / "b.ssfw").read_bytes()


def test_train_nonfinite_loss_exit_code(tmp_path, data, monkeypatch, capsys):
    monkeypatch.setattr(pipeline, "scene_loss", lambda prep, params, cfg: dc.as_tensor(np.inf))
    rc = main(["train", "--data", str(data), *SMALL, "--set", "epochs=1", "--ratio", "1/8",
               "--out", str(tmp_path / "w.ssfw")])
    assert rc == 3
    assert "epoch 0" in capsys.readouterr().err


def test_train_missing_data_is_io_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--out", str(tmp_path / "w")]) == 1


def test_train_bad_override_is_usage_error(tmp_path, data, capsys):
    assert main(["train", "--data", str(data), "--set", "epochs", "--out", str(tmp_path / "w")]) == 2
    assert main(["train", "--data", str(data), "--set", "nope=1", "--out", str(tmp_path / "w")]) == 2


def test_label_without_correlation_is_coarse(tmp_path, data, capsys):
    src = data / "scene_0000.ssfl"
    out = tmp_path / "lab.ssfl"
    assert main(["label", "--data", str(src), "--no-correlation", "--ratio", "1/8", "--out", str(out)]) == 0
    scene = read_scene(src)
    cfg = PipelineConfig(label_ratio="1/8", use_correlation=False)
    labels = sample_labels(scene, "1/8", 0)
    want = generate_pseudo_labels(scene, None, cfg, labels)
    got = read_scene(out)
    assert np.array_equal(got.flow, want)
    assert np.array_equal(got.labels.indices, labels.indices)
    assert np.array_equal(got.flow[labels.indices], scene.flow[labels.indices])


def test_label_translation_scene_is_exact(tmp_path, capsys):
    scene = generate_synthetic_scene(n_points=64, translation=[0.5, 0.0, -0.25], seed=4)
    write_scene(scene, tmp_path / "t.ssfl")
    ckpt = tmp_path / "w.ssfw"
    dc.save_params(init_params(_small_config(), seed=2), ckpt)
    rc = main(["label", "--data", str(tmp_path / "t.ssfl"), "--ckpt", str(ckpt), *SMALL, "--ratio", "1/8",
               "--out", str(tmp_path / "o.ssfl")])
    assert rc == 0
    assert "epe=0.000000" in capsys.readouterr().out


def test_label_width_mismatch_exit_code(tmp_path, data, capsys):
    ckpt = tmp_path / "w.ssfw"
    dc.save_params(init_params(_small_config()), ckpt)
    rc = main(["label", "--data", str(data / "scene_0000.ssfl"), "--ckpt", str(ckpt), *SMALL,
               "--set", "corr_hidden=4", "--ratio", "1/8", "--out", str(tmp_path / "o.ssfl")])
    assert rc == 4
    assert "corr" in capsys.readouterr().err


def test_label_needs_checkpoint(tmp_path, data, capsys):
    rc = main(["label", "--data", str(data / "scene_0000.ssfl"), "--out", str(tmp_path / "o.ssfl")])
    assert rc == 2


def test_corrupt_checkpoint_exit_code(tmp_path, data, capsys):
    ckpt = tmp_path / "w.ssfw"
    ckpt.write_bytes(b"SSFW\x01\x00garbage")
    rc = main(["label", "--data", str(data / "scene_0000.ssfl"), "--ckpt", str(ckpt), "--ratio", "1/8",
               "--out", str(tmp_path / "o.ssfl")])
    assert rc == 4


def _write_pred(tmp_path, gt, offset):
    pred = gt.with_flow(gt.flow + np.array([offset, 0.0, 0.0]))
    write_scene(pred, tmp_path / "pred.ssfl")
    return tmp_path / "pred.ssfl"


def test_eval_thresholds(tmp_path, capsys):
    gt = generate_synthetic_scene(n_points=32, seed=5)
    write_scene(gt, tmp_path / "gt.ssfl")
    assert main(["eval", "--pred", str(tmp_path / "gt.ssfl"), "--gt", str(tmp_path / "gt.ssfl")]) == 0
    assert "epe=0.000000 as=1.000000" in capsys.readouterr().out
    assert main(["eval", "--pred", str(_write_pred(tmp_path, gt, 0.04)), "--gt", str(tmp_path / "gt.ssfl")]) == 0
    assert "as=1.000000" in capsys.readouterr().out
    assert main(["eval", "--pred", str(_write_pred(tmp_path, gt, 0.5)), "--gt", str(tmp_path / "gt.ssfl")]) == 0
    assert "out=1.000000" in capsys.readouterr().out


def test_eval_count_mismatch(tmp_path, capsys):
    write_scene(generate_synthetic_scene(n_points=32, seed=5), tmp_path / "a.ssfl")
    write_scene(generate_synthetic_scene(n_points=40, seed=5), tmp_path / "b.ssfl")
    assert main(["eval", "--pred", str(tmp_path / "a.ssfl"), "--gt", str(tmp_path / "b.ssfl")]) == 2


def test_eval_damaged_file(tmp_path, capsys):
    gt = generate_synthetic_scene(n_points=32, seed=5)
    (tmp_path / "bad.ssfl").write_bytes(scene_to_bytes(gt)[:-7])
    write_scene(gt, tmp_path / "gt.ssfl")
    assert main(["eval", "--pred", str(tmp_path / "bad.ssfl"), "--gt", str(tmp_path / "gt.ssfl")]) == 4


def _table(text):
    return [line for line in text.splitlines() if " passed in " not in line]


def test_gradcheck_passes_and_repeats(capsys):
    assert main(["gradcheck", "--seed", "3"]) == 0
    first = capsys.readouterr().out
    assert main(["gradcheck", "--seed", "3"]) == 0
    assert _table(first) == _table(capsys.readouterr().out)
    assert "FAILED" not in first


def test_gradcheck_corrupt_fails(capsys):
    assert main(["gradcheck", "--corrupt", "chamfer"]) == 3
    assert "FAILED chamfer" in capsys.readouterr().err
    assert main(["gradcheck", "--corrupt", "no-such-check"]) == 2


def test_ablate_prints_five_rows(tmp_path, capsys):
    assert main(["gen", "--scenes", "3", "--points", "64", "--out", str(tmp_path / "d")]) == 0
    capsys.readouterr()
    table = tmp_path / "table.txt"
    rc = main(["ablate", "--data", str(tmp_path / "d"), *SMALL, "--set", "epochs=1", "--ratio", "1/8",
               "--eval-fraction", "0.34", "--out", str(table), "--save-full", str(tmp_path / "full.ssfw")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "train scenes = 2, eval scenes = 1" in out
    rows = table.read_text().splitlines()
    assert len(rows) == 6
    assert [r.split()[0] for r in rows[1:]] == ["baseline", "corr", "corr+mem", "corr+smooth", "corr+mem+smooth"]
    assert dc.load_params(tmp_path / "full.ssfw").names()


def test_ablate_split_too_small(tmp_path, capsys):
    assert main(["gen", "--scenes", "1", "--points", "64", "--out", str(tmp_path / "d")]) == 0
    assert main(["ablate", "--data", str(tmp_path / "d"), "--ratio", "1/8"]) == 2


def _label_epe(scene, ckpt, out, capsys):
    assert main(["label", "--data", str(scene), "--ckpt", str(ckpt), "--out", str(out)]) == 0
    line = capsys.readouterr().out.splitlines()[-1]
    return float(line.split()[0].split("=")[1])


@pytest.mark.slow
def test_trained_checkpoint_beats_untrained(tmp_path, capsys):
    assert main(["gen", "--scenes", "20", "--points", "256", "--seed", "5", "--out", str(tmp_path / "tr")]) == 0
    assert main(["gen", "--scenes", "4", "--points", "256", "--seed", "6", "--out", str(tmp_path / "ev")]) == 0
    assert main(["train", "--data", str(tmp_path / "tr"), "--set", "epochs=0", "--out", str(tmp_path / "init.ssfw")]) == 0
    assert main(["train", "--data", str(tmp_path / "tr"), "--out", str(tmp_path / "trained.ssfw")]) == 0
    capsys.readouterr()
    scenes = sorted((tmp_path / "ev").iterdir())
    before = np.mean([_label_epe(s, tmp_path / "init.ssfw", tmp_path / "o.ssfl", capsys) for s in scenes])
    after = np.mean([_label_epe(s, tmp_path / "trained.ssfw", tmp_path / "o.ssfl", capsys) for s in scenes])
    assert after < before
