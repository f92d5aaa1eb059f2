import json

import numpy as np
import pytest

from csaseg import cli, model_io
from csaseg.synthetic import two_region_image, two_region_model, two_region_truth


@pytest.fixture
def tiny_bundle(tmp_path, tiny_model, tiny_classes):
    path = tmp_path / "tiny.scwt"
    model_io.save_model(path, tiny_model, tiny_classes)
    return path


@pytest.fixture
def tiny_image(tmp_path, rng):
    path = tmp_path / "img.ppm"
    model_io.write_ppm(path, rng.integers(0, 256, (20, 28, 3), dtype=np.uint8))
    return path


SMALL = ["--short-side", "24", "--window", "16", "--stride", "8"]


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def test_segment_modes_same_shape(tiny_bundle, tiny_image, tmp_path, capsys):
    shapes = []
    for mode in ("csa", "vanilla", "sharpen:0", "ensemble:2:3"):
        out = tmp_path / f"{mode}.pgm"
        code, stdout, _ = run(["segment", "--model", tiny_bundle, "--image", tiny_image, "--out", out, "--mode", mode, "--json", *SMALL], capsys)
        assert code == 0
        record = json.loads(stdout)
        assert record["shape"] == [20, 28]
        shapes.append(model_io.read_pgm(out).shape)
    assert set(shapes) == {(20, 28)}


def test_local_one_matches_identity(tiny_bundle, tiny_image, tmp_path, capsys):
    masks = []
    for mode in ("local:1", "identity"):
        out = tmp_path / f"{mode.replace(':', '')}.pgm"
        assert run(["segment", "--model", tiny_bundle, "--image", tiny_image, "--out", out, "--mode", mode, *SMALL], capsys)[0] == 0
        masks.append(model_io.read_pgm(out))
    np.testing.assert_array_equal(*masks)


def test_two_region_segment(tmp_path, capsys):
    model, classes = two_region_model()
    bundle = tmp_path / "two.scwt"
    model_io.save_model(bundle, model, classes)
    image = tmp_path / "two.ppm"
    model_io.write_ppm(image, two_region_image(336, 448))
    out = tmp_path / "two.pgm"
    assert run(["segment", "--model", bundle, "--image", image, "--out", out], capsys)[0] == 0
    np.testing.assert_array_equal(model_io.read_pgm(out), two_region_truth(336, 448))


def test_attn_dump(tiny_bundle, tiny_image, tmp_path, capsys):
    out_dir = tmp_path / "attn"
    code, stdout, _ = run(
        ["attn-dump", "--model", tiny_bundle, "--image", tiny_image, "--layer", 1, "--point", "2,3", "--out-dir", out_dir, "--short-side", 24, "--json"],
        capsys,
    )
    assert code == 0
    record = json.loads(stdout)
    assert record["layer"] == 1 and record["grid"] == [6, 9]
    maps = model_io.read_container(out_dir / "attn.scwt")
    assert sorted(maps) == ["head0", "head1", "head2", "head3", "mean"]
    for name, heat in maps.items():
        assert heat.shape == (6, 9)
        assert abs(float(heat.sum(dtype=np.float64)) - 1.0) < 1e-5
        assert model_io.read_pgm(out_dir / f"{name}.pgm").shape == (6, 9)


def test_attn_dump_point_outside_grid(tiny_bundle, tiny_image, tmp_path, capsys):
    code, _, err = run(["attn-dump", "--model", tiny_bundle, "--image", tiny_image, "--point", "9,9", "--out-dir", tmp_path, "--short-side", 24], capsys)
    assert code == 2 and "outside" in err


def write_eval_set(tmp_path, rng, n=3):
    images, gt = tmp_path / "images", tmp_path / "gt"
    images.mkdir()
    gt.mkdir()
    for i in range(n):
        model_io.write_ppm(images / f"{i}.ppm", rng.integers(0, 256, (16, 20, 3), dtype=np.uint8))
        mask = rng.integers(0, 3, (16, 20))
        mask[0] = 255
        model_io.write_mask_pgm(gt / f"{i}.pgm", mask)
    return images, gt


def test_eval_json(tiny_bundle, tmp_path, rng, capsys, monkeypatch):
    images, gt = write_eval_set(tmp_path, rng)
    argv = ["eval", "--model", tiny_bundle, "--images", images, "--gt", gt, "--json", "--short-side", 16, "--window", 16, "--stride", 8]
    monkeypatch.setenv("CSA_THREADS", "1")
    code, serial, _ = run(argv, capsys)
    assert code == 0
    lines = [json.loads(line) for line in serial.splitlines()]
    assert [l["class"] for l in lines[:3]] == ["class0", "class1", "class2"]
    assert lines[-1]["images"] == 3 and 0.0 <= lines[-1]["miou"] <= 1.0
    monkeypatch.setenv("CSA_THREADS", "4")
    assert run(argv, capsys)[1] == serial


def test_eval_text(tiny_bundle, tmp_path, rng, capsys):
    images, gt = write_eval_set(tmp_path, rng, n=1)
    code, out, _ = run(["eval", "--model", tiny_bundle, "--images", images, "--gt", gt, "--short-side", 16, "--window", 16, "--stride", 8], capsys)
    assert code == 0 and "mIoU" in out


def test_eval_missing_ground_truth(tiny_bundle, tmp_path, rng, capsys):
    images, gt = write_eval_set(tmp_path, rng, n=1)
    (gt / "0.pgm").unlink()
    assert run(["eval", "--model", tiny_bundle, "--images", images, "--gt", gt], capsys)[0] == 3


def test_bad_thread_count(tiny_bundle, tmp_path, rng, capsys, monkeypatch):
    images, gt = write_eval_set(tmp_path, rng, n=1)
    monkeypatch.setenv("CSA_THREADS", "lots")
    assert run(["eval", "--model", tiny_bundle, "--images", images, "--gt", gt, *SMALL], capsys)[0] == 2


def test_unknown_mode_exits_2(tiny_bundle, tiny_image, tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["segment", "--model", str(tiny_bundle), "--image", str(tiny_image), "--out", str(tmp_path / "x.pgm"), "--mode", "local:2"])
    assert exc.value.code == 2


def test_bad_slide_config_exits_2(tiny_bundle, tiny_image, tmp_path, capsys):
    code, _, err = run(["segment", "--model", tiny_bundle, "--image", tiny_image, "--out", tmp_path / "x.pgm", "--window", 10], capsys)
    assert code == 2 and "window" in err


def test_missing_file_exits_3(tiny_image, tmp_path, capsys):
    assert run(["segment", "--model", tmp_path / "nope.scwt", "--image", tiny_image, "--out", tmp_path / "x.pgm"], capsys)[0] == 3


def test_corrupt_container_exits_3(tiny_bundle, tiny_image, tmp_path, capsys):
    data = bytearray(tiny_bundle.read_bytes())
    data[40] ^= 0xFF
    tiny_bundle.write_bytes(bytes(data))
    assert run(["segment", "--model", tiny_bundle, "--image", tiny_image, "--out", tmp_path / "x.pgm"], capsys)[0] == 3


def test_model_error_exits_4(tmp_path, tiny_model, tiny_classes, tiny_image, capsys):
    entries = model_io.model_entries(tiny_model, tiny_classes)
    del entries["visual_proj"]
    path = tmp_path / "broken.scwt"
    model_io.write_container(path, entries)
    code, _, err = run(["segment", "--model", path, "--image", tiny_image, "--out", tmp_path / "x.pgm", *SMALL], capsys)
    assert code == 4 and "visual_proj" in err


def test_selftest(capsys):
    code, out, _ = run(["selftest", "--json"], capsys)
    assert code == 0
    records = [json.loads(line) for line in out.splitlines()]
    assert len(records) == 11 and all(r["pass"] for r in records)


def test_help_mentions_normalisation(capsys):
    with pytest.raises(SystemExit):
        cli.main(["segment", "--help"])
    assert "0.48145466" in capsys.readouterr().out
