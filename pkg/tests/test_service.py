import base64

import numpy as np
import pytest
from fastapi.testclient import TestClient

from surfsplat.cli import main
from surfsplat.service import _parse_pose, _turbo, create_app, load_snapshot


@pytest.fixture(scope="module")
def snapshot(tmp_path_factory):
    data = tmp_path_factory.mktemp("svc") / "ds"
    run = tmp_path_factory.mktemp("svc_run")
    assert main(["gen-synthetic", "--preset", "two-object", "--out", str(data),
                 "--views", "2", "--size", "16", "--feature-dim", "2"]) == 0
    assert main(["train", "--data", str(data), "--out", str(run),
                 "--iterations", "3"]) == 0
    return load_snapshot(run / "checkpoint.glsc", data_root=data)


@pytest.fixture(scope="module")
def client(snapshot):
    return TestClient(create_app(snapshot, static_dir=None))


def home_pose(snapshot):
    return ",".join(str(x) for x in
                    snapshot.home_camera.world_to_camera[:3, :].reshape(-1))


class TestPoseParsing:
    def test_valid_pose(self):
        w2c = _parse_pose(",".join(["1,0,0,0", "0,1,0,0", "0,0,1,2"]))
        assert w2c.shape == (4, 4)
        assert w2c[2, 3] == 2.0

    def test_wrong_count_rejected(self):
        with pytest.raises(ValueError, match="12"):
            _parse_pose("1,2,3")

    def test_non_numeric_rejected(self):
        with pytest.raises(ValueError):
            _parse_pose(",".join(["x"] * 12))

    def test_non_orthonormal_rejected(self):
        with pytest.raises(ValueError, match="orthonormal"):
            _parse_pose(",".join(["5,0,0,0", "0,1,0,0", "0,0,1,0"]))


class TestTurbo:
    def test_range_and_shape(self):
        x = np.linspace(0, 1, 64)
        rgb = _turbo(x)
        assert rgb.shape == (64, 3)
        assert rgb.min() >= 0.0 and rgb.max() <= 1.0

    def test_ends_blue_to_red(self):
        lo, hi = _turbo(0.1), _turbo(0.9)
        assert lo[2] > lo[0]    # blue end
        assert hi[0] > hi[2]    # red end


class TestInfo:
    def test_info_fields(self, client, snapshot):
        r = client.get("/api/info")
        assert r.status_code == 200
        body = r.json()
        assert body["primitive_count"] == len(snapshot.scene)
        assert body["queries"] == ["object1", "object2"]
        assert body["has_head"] is True
        assert len(body["home_pose"]) == 12
        assert body["snapshot_hash"] == snapshot.content_hash
        assert "ETag" in r.headers


class TestRender:
    def test_color_png(self, client, snapshot):
        r = client.get("/api/render", params={"pose": home_pose(snapshot),
                                              "w": 32, "h": 32})
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"
        assert r.content[:8] == b"\x89PNG\r\n\x1a\n"

    def test_identical_requests_byte_identical(self, client, snapshot):
        params = {"pose": home_pose(snapshot), "w": 24, "h": 24,
                  "channel": "depth"}
        a = client.get("/api/render", params=params)
        b = client.get("/api/render", params=params)
        assert a.content == b.content
        assert a.headers["ETag"] == b.headers["ETag"]

    def test_channels_render(self, client, snapshot):
        for channel in ("color", "depth", "normal"):
            r = client.get("/api/render",
                           params={"pose": home_pose(snapshot), "w": 16,
                                   "h": 16, "channel": channel})
            assert r.status_code == 200, channel

    def test_attention_channel(self, client, snapshot):
        r = client.get("/api/render",
                       params={"pose": home_pose(snapshot), "w": 16, "h": 16,
                               "channel": "attention", "query": "object1"})
        assert r.status_code == 200

    def test_unknown_channel_400(self, client, snapshot):
        r = client.get("/api/render", params={"pose": home_pose(snapshot),
                                              "channel": "xray"})
        assert r.status_code == 400

    def test_bad_pose_400(self, client):
        r = client.get("/api/render", params={"pose": "1,2,3"})
        assert r.status_code == 400

    def test_bad_fov_400(self, client, snapshot):
        r = client.get("/api/render", params={"pose": home_pose(snapshot),
                                              "fov": 200})
        assert r.status_code == 400

    def test_oversize_400(self, client, snapshot):
        r = client.get("/api/render", params={"pose": home_pose(snapshot),
                                              "w": 4096})
        assert r.status_code == 400

    def test_unknown_attention_query_404(self, client, snapshot):
        r = client.get("/api/render",
                       params={"pose": home_pose(snapshot),
                               "channel": "attention", "query": "unicorn"})
        assert r.status_code == 404


class TestQuery:
    def test_selection_stats(self, client, snapshot):
        r = client.get("/api/query", params={"name": "object1",
                                             "threshold": 0.0})
        assert r.status_code == 200
        body = r.json()
        assert body["total"] == len(snapshot.scene)
        assert 0 <= body["selected"] <= body["total"]
        assert sum(body["score_histogram"]["counts"]) == body["total"]
        png = base64.b64decode(body["mask_png_base64"])
        assert png[:8] == b"\x89PNG\r\n\x1a\n"

    def test_threshold_monotone_counts(self, client):
        counts = [client.get("/api/query",
                             params={"name": "object1", "threshold": t}
                             ).json()["selected"]
                  for t in (-1.0, -0.5, 0.0, 0.5, 1.0)]
        assert all(a >= b for a, b in zip(counts, counts[1:]))

    def test_unknown_name_404(self, client):
        assert client.get("/api/query",
                          params={"name": "unicorn"}).status_code == 404

    def test_bad_threshold_400(self, client):
        assert client.get("/api/query",
                          params={"name": "object1", "threshold": 2.0}
                          ).status_code == 400


class TestMesh:
    def test_mesh_ply_and_cache(self, client, snapshot):
        a = client.get("/api/mesh")
        assert a.status_code == 200
        assert a.content.startswith(b"ply")
        b = client.get("/api/mesh")
        assert a.content == b.content
        assert False in snapshot.mesh_cache

    def test_semantic_mesh(self, client):
        r = client.get("/api/mesh", params={"semantic": 1})
        assert r.status_code == 200
        assert r.content.startswith(b"ply")


class TestImmutability:
    def test_request_storm_preserves_snapshot(self, client, snapshot):
        from surfsplat.service import _hash_snapshot

        before = snapshot.content_hash
        pose = home_pose(snapshot)
        for t in np.linspace(-1, 1, 5):
            client.get("/api/query", params={"name": "object2",
                                             "threshold": float(t)})
            client.get("/api/render", params={"pose": pose, "w": 16, "h": 16})
        client.get("/api/mesh")
        client.get("/api/info")
        after = _hash_snapshot(snapshot.scene, snapshot.head,
                               snapshot.queries)
        assert after == before
