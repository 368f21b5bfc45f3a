import numpy as np
import pytest

from lodet import dota
from lodet.config import RunConfig, dump_config, load_config, lr_at, parse_config
from lodet.dsc_head import encode_obb
from lodet.synthetic import SceneSpec, generate_synthetic_dataset, load_image


# ------------------------------------------------------------ annotations

def test_parse_single_line(tmp_path):
    p = tmp_path / "a.txt"
    p.write_text("0 0 10 0 10 4 0 4 ship 0\n")
    objs, diags = dota.parse_dota_annotations(p)
    assert diags == [] and len(objs) == 1
    assert objs[0].category == "ship" and not objs[0].difficult
    assert np.array_equal(objs[0].quad, [[0, 0], [10, 0], [10, 4], [0, 4]])


def test_parse_empty_file(tmp_path):
    p = tmp_path / "e.txt"
    p.write_text("")
    assert dota.parse_dota_annotations(p) == ([], [])


def test_parse_corrupted_line_reported(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("0 0 10 0 10 4 0 4 ship 0\n0 0 1O 0 10 4 0 4 ship 0\n1 1 5 1 5 5 1 5 car 1\n")
    objs, diags = dota.parse_dota_annotations(p)
    assert [o.category for o in objs] == ["ship", "car"]
    assert objs[1].difficult
    assert len(diags) == 1 and diags[0].line == 2 and "c.txt:2" in str(diags[0])
    with pytest.raises(ValueError, match=":2:"):
        dota.parse_dota_annotations(p, strict=True)


def test_parse_headers_and_optional_difficult(tmp_path):
    p = tmp_path / "h.txt"
    p.write_text("imagesource:GoogleEarth\ngsd:0.146\n\n0 0 2 0 2 2 0 2 plane\n0 0 2 0 2 2 0 2 plane 7\n")
    objs, diags = dota.parse_dota_annotations(p)
    assert len(objs) == 1 and not objs[0].difficult
    assert len(diags) == 1 and diags[0].line == 5


def test_parse_missing_file(tmp_path):
    with pytest.raises(OSError):
        dota.parse_dota_annotations(tmp_path / "nope.txt")


def test_detection_file_round_trip(tmp_path):
    from lodet.geometry import DetectionRecord
    q = np.array([[1.5, 0], [4, 1.25], [3, 3], [0, 2]])
    path = tmp_path / "d.txt"
    dota.write_detections(path, [DetectionRecord("x", 1, 0.75, q)], ["ship", "car"])
    assert path.read_text().startswith("car 0.750000 1.500000 0.000000")
    [(c, s, quad)] = dota.read_detections(path, ["ship", "car"])
    assert c == 1 and s == 0.75 and np.array_equal(quad, q)


# ------------------------------------------------------------- generator

def single(rotation, aspect=(1.0, 2.0)):
    spec = SceneSpec(objects=(1, 1), classes=("rect",), rotation=rotation, aspect=aspect, num_train=4)
    return [sc.objects[0].quad for _, sc in generate_synthetic_dataset(spec)["train"]]


def test_axis_aligned_rect_code():
    for quad in single((0.0, 0.0)):
        _, code = encode_obb(quad)
        assert np.allclose(code, [0, 0, 0, 0, 1, 1], atol=1e-12)


def test_rotated_square_code():
    for quad in single((45.0, 45.0), aspect=(1.0, 1.0)):
        _, code = encode_obb(quad)
        assert np.allclose(code, [0.5, 0.5, 0.5, 0.5, 0, 0], atol=1e-9)


def test_generated_labels_are_representable_and_inside():
    spec = SceneSpec(num_train=20, objects=(1, 4))
    for _, sc in generate_synthetic_dataset(spec)["train"]:
        assert 1 <= len(sc.objects) <= 4
        for o in sc.objects:
            _, code = encode_obb(o.quad)
            assert code[0] + code[2] <= 1 + 1e-9 and code[1] + code[3] <= 1 + 1e-9
            assert o.quad.min() >= 0 and o.quad.max() <= spec.image_size


def test_shapes_are_painted():
    spec = SceneSpec(objects=(1, 1), classes=("rect",), num_train=1, seed=3)
    sc = generate_synthetic_dataset(spec)["train"][0][1]
    cx, cy = sc.objects[0].quad.mean(0).astype(int)
    corner = sc.image[0, 0].astype(int)
    assert np.abs(sc.image[cy, cx].astype(int) - corner).sum() > 30


def test_same_seed_byte_identical(tmp_path):
    spec = SceneSpec(num_train=6, num_val=2, seed=11)
    generate_synthetic_dataset(spec, tmp_path / "a")
    generate_synthetic_dataset(spec, tmp_path / "b")
    for sub in ("labels", "images"):
        for f in sorted((tmp_path / "a" / sub).iterdir()):
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes()
    assert (tmp_path / "a" / "val.txt").read_text().count("\n") == 2
    objs, diags = dota.parse_dota_annotations(next((tmp_path / "a" / "labels").iterdir()))
    assert objs and not diags


def test_different_seed_differs():
    a = generate_synthetic_dataset(SceneSpec(num_train=2, seed=0))["train"][0][1].image
    b = generate_synthetic_dataset(SceneSpec(num_train=2, seed=1))["train"][0][1].image
    assert not np.array_equal(a, b)


def test_scene_spec_errors():
    with pytest.raises(ValueError):
        SceneSpec(objects=(3, 1))
    with pytest.raises(ValueError):
        SceneSpec(classes=("circle",))
    with pytest.raises(ValueError):
        SceneSpec(scale=(10, 400))


def test_load_image_resizes(tmp_path):
    generate_synthetic_dataset(SceneSpec(num_train=1, image_size=96, scale=(20, 40)), tmp_path)
    img, orig = load_image(tmp_path / "images" / "00000.png", 64)
    assert img.shape == (3, 64, 64) and orig == (96, 96)
    assert 0 <= img.min() and img.max() <= 1


# ---------------------------------------------------------------- config

def test_lr_schedule_examples():
    cfg = RunConfig(epochs=101)
    assert lr_at(0, cfg) == pytest.approx(1.5e-4, abs=1e-18)
    assert lr_at(100, cfg) == pytest.approx(1e-6, abs=1e-18)
    assert lr_at(50, cfg) == pytest.approx(7.55e-5, abs=1e-15)
    lrs = [lr_at(e, cfg) for e in range(101)]
    assert all(a > b for a, b in zip(lrs, lrs[1:]))
    assert lr_at(0, RunConfig(epochs=1)) == 1.5e-4


def test_run_config_invariants():
    with pytest.raises(ValueError):
        RunConfig(epochs=0)
    with pytest.raises(ValueError):
        RunConfig(lr_initial=1e-6, lr_final=1e-5)
    with pytest.raises(ValueError):
        RunConfig(lr_final=0)
    with pytest.raises(ValueError):
        RunConfig(nms_thresh=1.0)
    assert RunConfig().nms_thresh == 0.45


def test_config_file_parse(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text("# comment\nwidth = 0.5   # neck\ninput_size=416\ndilations = 1, 2\nhflip = false\noptimizer = adam\n")
    cfg = load_config(p)
    assert (cfg.width, cfg.input_size, cfg.dilations, cfg.hflip, cfg.optimizer) == (0.5, 416, (1, 2), False, "adam")
    assert parse_config(dump_config(cfg)) == cfg


def test_config_file_errors():
    with pytest.raises(ValueError, match="unknown config key 'widht'"):
        parse_config("widht = 0.5")
    with pytest.raises(ValueError, match="cannot parse"):
        parse_config("epochs = many")
    with pytest.raises(ValueError, match="expected"):
        parse_config("epochs 5")
    with pytest.raises(ValueError):
        parse_config("epochs = 0")


def test_net_from_run_config():
    net = RunConfig(width=0.25, input_size=320).net(2)
    assert net.neck_widths == (256, 128, 64) and net.grids == [(40, 40), (20, 20), (10, 10)]
