import json

import numpy as np
import pytest
from PIL import Image
from pydantic import ValidationError

from conftest import write_manifest
from xai_eval.data import (
    ABDOMEN, BACKGROUND, HEAD, THORAX, Normalization, SegMask, SyntheticClass, SyntheticSpec,
    decode_mask, encode_mask, generate_synthetic, load_image, load_manifest, load_mask, render_sample,
    resize_bilinear, save_manifest, write_mask_png,
)
from xai_eval.errors import DataError, UsageError
from xai_eval.tensor import RngStream

BOMBUS = ["bombus_cryptarum", "bombus_lucorum", "bombus_magnus", "bombus_terrestris"]


def test_merge_map_reduces_class_count(tmp_path):
    """25 raw labels with a four-way merge give 22 classes"""
    counts = {f"species_{i:02d}": 2 for i in range(21)}
    counts.update({name: 3 for name in BOMBUS})
    path = write_manifest(tmp_path, counts, merge_map={name: "bombus_complex" for name in BOMBUS})
    manifest = load_manifest(path, check_files=False)
    assert manifest.num_classes == 22
    assert manifest.class_counts()["bombus_complex"] == 12
    assert sum(manifest.class_counts().values()) == sum(counts.values())
    assert manifest.class_index("bombus_magnus") == manifest.class_index("bombus_complex")


def test_empty_merge_map_is_identity(tmp_path):
    manifest = load_manifest(write_manifest(tmp_path, {"b": 1, "a": 2}), check_files=False)
    assert manifest.class_names == ("a", "b")
    assert [r.class_name for r in manifest.records] == [r.raw_label for r in manifest.records]


def test_class_indices_are_alphabetical(tmp_path):
    manifest = load_manifest(write_manifest(tmp_path, {"zeta": 1, "alpha": 1, "mid": 1}), check_files=False)
    assert manifest.class_names == ("alpha", "mid", "zeta")
    assert manifest.labels.tolist() == [2, 0, 1]


def test_unknown_merge_class(tmp_path):
    path = write_manifest(tmp_path, {"a": 1, "b": 1}, merge_map={"c": "a"})
    with pytest.raises(DataError, match="unknown classes: c"):
        load_manifest(path, check_files=False)


def test_duplicate_record_names_index(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"records": [
        {"image": "x.png", "label": "a"},
        {"image": "y.png", "label": "b"},
        {"image": "x.png", "label": "b"},
    ]}))
    with pytest.raises(DataError, match="Record 2: duplicate of record 0"):
        load_manifest(path, check_files=False)


def test_missing_image_names_index(tmp_path):
    path = write_manifest(tmp_path, {"a": 2})
    with pytest.raises(DataError, match="Record 0: image not found"):
        load_manifest(path)


def test_missing_manifest(tmp_path):
    with pytest.raises(DataError, match="Manifest not found"):
        load_manifest(tmp_path / "nope.json")


def test_manifest_schema_violation(tmp_path):
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps({"records": [{"image": "x.png"}]}))
    with pytest.raises(DataError, match="does not match the schema"):
        load_manifest(path, check_files=False)


def test_save_manifest_round_trip(tmp_path):
    manifest = load_manifest(write_manifest(tmp_path, {"a": 2, "b": 1}, split="test"), check_files=False)
    reloaded = load_manifest(save_manifest(manifest, tmp_path / "copy.json"), check_files=False)
    assert reloaded.class_names == manifest.class_names
    assert [r.image for r in reloaded.records] == [r.image for r in manifest.records]
    assert reloaded.splits() == ["test"]


def test_decode_near_red_is_head():
    mask = decode_mask(np.array([[[250, 5, 5]]], dtype=np.uint8))
    assert mask.labels[0, 0] == HEAD


def test_decode_anchor_colours():
    rgb = np.array([[[0, 0, 0], [255, 0, 0], [0, 255, 0], [0, 0, 255]]], dtype=np.uint8)
    assert decode_mask(rgb).labels.tolist() == [[BACKGROUND, HEAD, THORAX, ABDOMEN]]


def test_decode_out_of_tolerance_names_coordinates():
    rgb = np.zeros((4, 3, 3), dtype=np.uint8)
    rgb[2, 1] = (128, 128, 128)
    with pytest.raises(DataError, match=r"x=1, y=2"):
        decode_mask(rgb)


def test_decode_transparent_is_background():
    rgba = np.zeros((1, 2, 4), dtype=np.uint8)
    rgba[0, 0] = (128, 128, 128, 0)
    rgba[0, 1] = (0, 255, 0, 255)
    assert decode_mask(rgba).labels.tolist() == [[BACKGROUND, THORAX]]


def test_mask_png_round_trip(tmp_path):
    labels = np.random.default_rng(0).integers(0, 4, size=(9, 7)).astype(np.uint8)
    mask = SegMask(labels=labels)
    path = write_mask_png(mask, tmp_path / "mask.png")
    assert load_mask(path) == mask
    np.testing.assert_array_equal(decode_mask(encode_mask(mask)).labels, labels)


def test_load_mask_nearest_resize(tmp_path):
    labels = np.arange(16).reshape(4, 4) % 4
    path = write_mask_png(SegMask(labels=labels.astype(np.uint8)), tmp_path / "mask.png")
    resized = load_mask(path, size=(8, 8))
    np.testing.assert_array_equal(resized.labels, np.repeat(np.repeat(labels, 2, axis=0), 2, axis=1))


def test_mask_parts():
    mask = SegMask(labels=np.array([[0, 1], [2, 3]], dtype=np.uint8))
    assert mask.union.tolist() == [[False, True], [True, True]]
    assert mask.part("thorax").tolist() == [[False, False], [True, False]]
    with pytest.raises(UsageError):
        mask.part("wing")


def test_gray_image_normalises_to_zero(tmp_path):
    path = tmp_path / "gray.png"
    Image.fromarray(np.full((5, 6, 3), 128, dtype=np.uint8), mode="RGB").save(path)
    norm = Normalization(mean=(128 / 255.0,) * 3, std=(1.0, 1.0, 1.0))
    image = load_image(path, normalization=norm)
    assert image.shape == (3, 5, 6)
    assert image.dtype == np.float32
    assert not image.data.any()


def test_identity_normalisation_keeps_unit_range(tmp_path):
    path = tmp_path / "white.png"
    Image.fromarray(np.full((2, 2, 3), 255, dtype=np.uint8), mode="RGB").save(path)
    np.testing.assert_array_equal(load_image(path).data, np.ones((3, 2, 2), dtype=np.float32))


def test_non_positive_std_is_rejected():
    with pytest.raises(ValidationError):
        Normalization(std=(0.25, 0.0, 0.25))


def test_load_image_undecodable(tmp_path):
    path = tmp_path / "broken.png"
    path.write_bytes(b"not a png")
    with pytest.raises(DataError, match="Cannot decode"):
        load_image(path)


def test_bilinear_constant_and_ramp():
    constant = np.full((5, 4, 3), 0.3)
    np.testing.assert_allclose(resize_bilinear(constant, (10, 8)), np.full((10, 8, 3), 0.3))

    ramp = np.broadcast_to(np.arange(8.0)[None, :, None], (4, 8, 1)).copy()
    back = resize_bilinear(resize_bilinear(ramp, (8, 16)), (4, 8))
    np.testing.assert_allclose(back[:, 1:-1], ramp[:, 1:-1], atol=1e-9)


def small_spec(**kwargs) -> SyntheticSpec:
    params = {"image_size": 32, "object_size": (10, 20), "samples": {"train": 4, "test": 2}}
    params.update(kwargs)
    return SyntheticSpec(**params)


def test_synthetic_regeneration_is_byte_identical(tmp_path):
    spec = small_spec()
    first = generate_synthetic(spec, tmp_path / "a")
    generate_synthetic(spec, tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(files) == 2 * 3 * 6 + 1
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    assert first.manifest.splits() == ["test", "train"]
    assert first.manifest.class_counts() == {"disk": 6, "square": 6, "triangle": 6}


def test_synthetic_masks_decode_exactly(tmp_path):
    """Written masks decode back to the rendered labels for 102 samples"""
    spec = small_spec(samples={"train": 34})
    dataset = generate_synthetic(spec, tmp_path)
    by_name = {c.name: c for c in spec.classes}
    for rec in dataset.manifest.records:
        index = int(rec.stem.rsplit("_", 1)[1])
        _, rendered, meta = render_sample(spec, by_name[rec.class_name],
                                          RngStream(spec.seed, f"synthetic/train/{rec.class_name}/{index}"))
        decoded = load_mask(rec.mask)
        assert decoded == rendered
        assert int(decoded.union.sum()) == meta["pixels"] == rec.meta["pixels"]


def test_synthetic_object_stays_inside_bbox():
    spec = small_spec()
    pixels, mask, meta = render_sample(spec, spec.classes[2], RngStream(3, "bbox"))
    y0, x0, h, w = meta["bbox"]
    assert pixels.shape == (32, 32, 3)
    rows, cols = np.nonzero(mask.union)
    assert rows.min() >= y0 and rows.max() < y0 + h
    assert cols.min() >= x0 and cols.max() < x0 + w
    assert {HEAD, THORAX, ABDOMEN} <= set(np.unique(mask.labels).tolist())


def test_synthetic_without_part_masks_uses_single_part():
    spec = small_spec(part_masks=False)
    _, mask, _ = render_sample(spec, spec.classes[0], RngStream(1, "parts"))
    assert set(np.unique(mask.labels).tolist()) == {BACKGROUND, THORAX}


def test_synthetic_object_larger_than_frame(tmp_path):
    with pytest.raises(UsageError, match="does not fit"):
        generate_synthetic(small_spec(object_size=(10, 40)), tmp_path)


def test_synthetic_needs_two_classes():
    with pytest.raises(ValidationError):
        SyntheticSpec(classes=[SyntheticClass(name="disk", shape="disk", color=(255, 0, 0))])
