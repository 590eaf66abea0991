import numpy as np
import pytest
import yaml
from PIL import Image

from piuq.data import (DataError, DomainImage, DomainTag, EvalPair, UnpairedDataset, ValueRange, denormalize,
                       export_dataset, load_image_directory, load_manifest, make_synthetic_dataset, normalize,
                       read_tensor_file, target_transform, to_model_range, to_raw_range, write_tensor_file)


def raw_image(px, tag=DomainTag.INPUT, sid="a"):
    return DomainImage(px, ValueRange.RAW, tag, sid)


def test_endpoints_and_midpoint():
    assert to_model_range(np.array([0.0, 127.5, 255.0])).tolist() == [-1.0, 0.0, 1.0]
    assert to_raw_range(np.array([-1.0])).tolist() == [0.0]


def test_round_trip_small_arrays():
    rng = np.random.default_rng(0)
    for _ in range(50):
        img = rng.uniform(0, 255, (8, 8, 1))
        assert np.max(np.abs(to_raw_range(to_model_range(img)) - img)) < 1e-6


def test_round_trip_domain_image():
    img = raw_image(np.random.default_rng(1).uniform(0, 255, (32, 32, 1)))
    n = normalize(img)
    assert n.value_range is ValueRange.MODEL
    assert np.max(np.abs(denormalize(n).pixels - img.pixels)) < 1e-6


def test_denormalize_clamps_overshoot():
    assert to_raw_range(np.array([1.2, -1.3])).tolist() == [255.0, 0.0]


def test_model_round_trip_on_valid_range():
    m = np.random.default_rng(2).uniform(-1, 1, (32, 32, 1))
    assert np.max(np.abs(to_model_range(to_raw_range(m)) - m)) < 1e-12


def test_normalize_rejects_out_of_range():
    with pytest.raises(DataError, match="outside"):
        to_model_range(np.array([300.0]))
    with pytest.raises(DataError):
        raw_image(np.full((32, 32, 1), 256.0))


def test_normalize_requires_raw():
    img = DomainImage(np.zeros((32, 32, 1)), ValueRange.MODEL, DomainTag.INPUT, "a")
    with pytest.raises(DataError):
        normalize(img)


@pytest.mark.parametrize("shape", [(32, 48, 1), (40, 40, 1), (8, 8, 1)])
def test_domain_image_shape_invariants(shape):
    with pytest.raises(DataError):
        raw_image(np.zeros(shape))


def test_domain_image_is_read_only():
    img = raw_image(np.zeros((32, 32)))
    assert img.pixels.shape == (32, 32, 1)
    with pytest.raises(ValueError):
        img.pixels[0, 0, 0] = 1


def test_synthetic_determinism():
    a = make_synthetic_dataset(3, 16, 32)
    b = make_synthetic_dataset(3, 16, 32)
    for x, y in zip(a.inputs + a.targets, b.inputs + b.targets):
        assert np.array_equal(x.pixels, y.pixels) and x.source_id == y.source_id
    c = make_synthetic_dataset(4, 16, 32)
    assert not np.array_equal(a.inputs[0].pixels, c.inputs[0].pixels)


def test_synthetic_eval_pairs_follow_transform():
    data = make_synthetic_dataset(0, 16, 64)
    for pair in data.eval_pairs:
        gt = target_transform(to_raw_range(pair.input.pixels))
        assert np.max(np.abs(gt - to_raw_range(pair.target.pixels))) < 1e-6


def test_synthetic_domains_disjoint():
    data = make_synthetic_dataset(0, 16, 32)
    ids_x = {i.source_id for i in data.inputs}
    ids_y = {i.source_id for i in data.targets}
    assert not ids_x & ids_y
    eval_ids = {p.input.source_id for p in data.eval_pairs} | {p.target.source_id for p in data.eval_pairs}
    assert not eval_ids & (ids_x | ids_y)


def test_synthetic_preconditions():
    with pytest.raises(DataError):
        make_synthetic_dataset(0, 16, 48)
    with pytest.raises(DataError):
        make_synthetic_dataset(0, 8, 32)


def test_dataset_rejects_shared_ids():
    x = DomainImage(np.zeros((32, 32, 1)), ValueRange.MODEL, DomainTag.INPUT, "p1")
    y = DomainImage(np.zeros((32, 32, 1)), ValueRange.MODEL, DomainTag.TARGET, "p1")
    with pytest.raises(DataError, match="both domains"):
        UnpairedDataset([x], [y])


def test_target_transform_inverts_and_blurs():
    img = np.zeros((32, 32, 1))
    img[8:24, 8:24] = 200.0
    out = target_transform(img)
    assert out[0, 0, 0] == pytest.approx(255.0)
    assert out[16, 16, 0] == pytest.approx(55.0, abs=1e-6)
    assert 55.0 < out[16, 8, 0] < 255.0


def _write_pngs(path, shapes):
    path.mkdir()
    for k, shape in enumerate(shapes):
        Image.fromarray(np.full(shape, 10 * k, dtype=np.uint8)).save(path / f"img{k}.png")


def test_load_image_directory(tmp_path):
    _write_pngs(tmp_path / "x", [(256, 256)] * 3)
    imgs = load_image_directory(tmp_path / "x", DomainTag.INPUT)
    assert len(imgs) == 3
    assert all(i.d == 256 and i.channels == 1 and i.value_range is ValueRange.MODEL for i in imgs)
    assert imgs[1].pixels.max() == pytest.approx(10 / 127.5 - 1)


def test_load_image_directory_rejects_non_square(tmp_path):
    _write_pngs(tmp_path / "x", [(256, 256), (255, 256)])
    with pytest.raises(DataError, match="img1.png"):
        load_image_directory(tmp_path / "x", DomainTag.INPUT)


def test_load_image_directory_empty(tmp_path):
    (tmp_path / "x").mkdir()
    with pytest.raises(DataError, match="empty domain"):
        load_image_directory(tmp_path / "x", DomainTag.INPUT)


def test_load_image_directory_unreadable(tmp_path):
    _write_pngs(tmp_path / "x", [(32, 32)])
    (tmp_path / "x" / "broken.png").write_bytes(b"not a png")
    with pytest.raises(DataError, match="broken.png"):
        load_image_directory(tmp_path / "x", DomainTag.INPUT)


def test_tensor_file_round_trip(tmp_path):
    arr = np.random.default_rng(0).standard_normal((3, 32, 32, 2)).astype(np.float32)
    write_tensor_file(tmp_path / "t.bin", arr)
    raw = (tmp_path / "t.bin").read_bytes()
    assert raw[:4] == b"PIUQ"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [32, 2, 3]
    assert np.array_equal(read_tensor_file(tmp_path / "t.bin"), arr)


def test_tensor_file_truncated(tmp_path):
    write_tensor_file(tmp_path / "t.bin", np.zeros((2, 32, 32, 1)))
    (tmp_path / "t.bin").write_bytes((tmp_path / "t.bin").read_bytes()[:-4])
    with pytest.raises(DataError):
        read_tensor_file(tmp_path / "t.bin")


def test_export_and_manifest_round_trip(tmp_path):
    data = make_synthetic_dataset(1, 16, 32)
    manifest = export_dataset(data, tmp_path)
    back = load_manifest(manifest)
    assert len(back.inputs) == 16 and len(back.eval_pairs) == 16
    assert np.max(np.abs(back.inputs[0].pixels - data.inputs[0].pixels)) < 1e-6


def test_synthetic_manifest(tmp_path):
    path = tmp_path / "m.yaml"
    path.write_text(yaml.safe_dump({"synthetic": {"seed": 2, "count_per_domain": 16, "d": 32}}))
    data = load_manifest(path)
    ref = make_synthetic_dataset(2, 16, 32)
    assert np.array_equal(data.inputs[3].pixels, ref.inputs[3].pixels)


def test_image_manifest(tmp_path):
    for sub in ("x", "y", "ex", "ey"):
        _write_pngs(tmp_path / sub, [(32, 32)] * 2)
    path = tmp_path / "m.yaml"
    path.write_text(yaml.safe_dump({"dataset": {"format": "images", "inputs": "x", "targets": "y",
                                                "eval_inputs": "ex", "eval_targets": "ey"}}))
    data = load_manifest(path)
    assert len(data.inputs) == 2 and len(data.eval_pairs) == 2
    assert isinstance(data.eval_pairs[0], EvalPair)


def test_manifest_requires_both_eval_halves(tmp_path):
    for sub in ("x", "y", "ex"):
        _write_pngs(tmp_path / sub, [(32, 32)])
    path = tmp_path / "m.yaml"
    path.write_text(yaml.safe_dump({"dataset": {"inputs": "x", "targets": "y", "eval_inputs": "ex"}}))
    with pytest.raises(DataError):
        load_manifest(path)
