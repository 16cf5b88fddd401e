import json
from importlib import resources

import numpy as np
import pytest

from mapreg.errors import InvalidDepth, InvalidIntrinsics, TooFewDetections, UnknownClass, ValidationError
from mapreg.geometry import rotation
from mapreg.ingest import build_local_maps, ingest_scene, project_detection

VOCAB = ["tree", "lamp", "bench", "bin", "sign"]
K = {"fx": 1000.0, "fy": 1000.0, "cx": 640.0, "cy": 360.0}


def fixture_path():
    return resources.files("mapreg") / "fixtures" / "detections_2x4.json"


def box_at(u, half=10.0):
    return [u - half, 100.0, u + half, 200.0]


class TestProjection:
    def test_on_axis(self):
        np.testing.assert_array_equal(project_detection(K, box_at(640.0), 5.0), [0.0, 5.0])

    def test_hand_values(self):
        np.testing.assert_allclose(project_detection(K, box_at(740.0), 10.0), [1.0, 10.0], atol=1e-12)
        k2 = {"fx": 500.0, "fy": 500.0, "cx": 640.0, "cy": 360.0}
        np.testing.assert_allclose(project_detection(k2, box_at(390.0), 4.0), [-2.0, 4.0], atol=1e-12)

    def test_errors(self):
        with pytest.raises(InvalidIntrinsics):
            project_detection({**K, "fx": 0.0}, box_at(640), 1.0)
        with pytest.raises(InvalidIntrinsics):
            project_detection({"fx": 1.0}, box_at(640), 1.0)
        with pytest.raises(InvalidDepth):
            project_detection(K, box_at(640), 0.0)
        with pytest.raises(InvalidDepth):
            project_detection(K, box_at(640), -2.0)
        with pytest.raises(ValidationError):
            project_detection(K, [10, 10, 5, 20], 1.0)

    def test_pixel_scale_invariance(self, rng):
        for _ in range(20):
            k = {"fx": rng.uniform(300, 1500), "fy": 900.0, "cx": rng.uniform(200, 800), "cy": 300.0}
            u = rng.uniform(50, 1200)
            d = rng.uniform(1, 30)
            f = rng.uniform(0.25, 4)
            ks = {key: v * f for key, v in k.items()}
            a = project_detection(k, box_at(u), d)
            b = project_detection(ks, [c * f for c in box_at(u)], d)
            np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_linear_in_depth(self, rng):
        for _ in range(20):
            u, d = rng.uniform(0, 1280), rng.uniform(0.5, 40)
            np.testing.assert_allclose(project_detection(K, box_at(u), 2 * d),
                                       2 * project_detection(K, box_at(u), d), rtol=1e-14)


class TestBuildMaps:
    def test_fixture_matches_hand_projection(self):
        raw = json.loads(fixture_path().read_text())
        maps = build_local_maps(raw, VOCAB)
        assert len(maps) == 2 and all(len(m) == 4 for m in maps)
        for img, m in zip(raw["images"], maps):
            k = img["intrinsics"]
            for det, xy, cls, box, gid in zip(img["detections"], m.xy, m.classes, m.bbox, m.gt_object_id):
                x0, y0, x1, y1 = det["bbox"]
                u = (x0 + x1) / 2
                hand = [det["depth"] * (u - k["cx"]) / k["fx"], det["depth"]]
                np.testing.assert_allclose(xy, hand, atol=1e-12)
                assert VOCAB[cls] == det["label"]
                np.testing.assert_allclose(box, [x0 / img["width"], y0 / img["height"],
                                                 x1 / img["width"], y1 / img["height"]], atol=1e-15)
                assert gid == det["gt_object_id"]

    def test_too_few_detections(self):
        raw = json.loads(fixture_path().read_text())
        raw["images"][1]["detections"] = raw["images"][1]["detections"][:2]
        with pytest.raises(TooFewDetections):
            build_local_maps(raw, VOCAB)

    def test_unknown_label(self):
        raw = json.loads(fixture_path().read_text())
        raw["images"][0]["detections"][0]["label"] = "hydrant"
        with pytest.raises(UnknownClass):
            build_local_maps(raw, VOCAB)

    def test_bbox_outside_image(self):
        raw = json.loads(fixture_path().read_text())
        raw["images"][0]["detections"][0]["bbox"] = [1200, 0, 1300, 10]
        with pytest.raises(ValidationError):
            build_local_maps(raw, VOCAB)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError, match="not found"):
            build_local_maps(tmp_path / "nope.json", VOCAB)


def test_ingested_ground_truth_in_first_frame():
    s = ingest_scene(fixture_path(), VOCAB)
    assert s.has_ground_truth
    np.testing.assert_allclose(s.maps[0].camera_xy_gt, [0, 0], atol=1e-12)
    # the first image looks along +y from the origin, so its frame equals the world frame
    lookup = dict(zip(s.object_ids, s.object_xy))
    for m in s.maps:
        R = rotation(m.heading_gt - np.pi / 2)
        for gid, xy in zip(m.gt_object_id, m.xy):
            np.testing.assert_allclose((lookup[gid] - m.camera_xy_gt) @ R.T, xy, atol=1e-12)


def test_without_ground_truth():
    raw = json.loads(fixture_path().read_text())
    raw.pop("objects")
    s = ingest_scene(raw, VOCAB)
    assert not s.has_ground_truth and len(s.maps) == 2
