"""Tests for the HTTP render service: revisions, edits, undo, renders."""

import io
import json
import threading
import warnings
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
from PIL import Image

with warnings.catch_warnings():
    warnings.simplefilter("ignore")  # starlette's httpx shim warns on import
    from fastapi.testclient import TestClient

from prosg.dataio import SyntheticConfig, generate_synthetic, load_scene
from prosg.fields import EncodingConfig
from prosg.rendering import RenderConfig
from prosg.sampling import SamplingConfig, pixel_directions, ray_box_intersect
from prosg.scenegraph import Pose, world_to_object, world_to_object_direction
from prosg.service import LAYER_BOUNDARY, create_app
from prosg.training import TrainConfig, load_state, train

TINY_FIELDS = {
    "background": {"hidden": 16, "z_dim": 4, "color_hidden": 8},
    "object": {"d_s": 8, "d_a": 8, "hidden": 16, "hidden_dim": 8, "blocks": 1,
               "enc_channels": (3, 8, 8)},
}


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    """Tiny scene, a 30-step checkpoint, and the poses needed by requests."""
    root = tmp_path_factory.mktemp("svc")
    scene = generate_synthetic(
        SyntheticConfig(width=32, height=24, n_frames=4, n_objects=1, lidar_stride=2, seed=5),
        root / "scene")
    dataset = load_scene(scene)
    config = TrainConfig(iterations=30, batch_rays=32, eval_every=0, checkpoint_every=0)
    render_config = RenderConfig(
        sampling=SamplingConfig(n_planes=8, n_box=3, d_far=40.0),
        encoding=EncodingConfig(l_position=3, l_direction=1),
    )
    train(dataset, config, root / "run", render_config=render_config,
          field_sizes=TINY_FIELDS)
    ckpt = root / "run" / "ckpt_00000030.prosg"
    pose_rows = json.loads((scene / "scene.json").read_text())["frames"][0]["pose"]
    return SimpleNamespace(ckpt=ckpt, scene=scene, pose=pose_rows)


@pytest.fixture()
def client(world):
    return TestClient(create_app(checkpoint=world.ckpt))


def render_body(world, **kw):
    body = {"pose": world.pose, "frame": 0, "width": 32, "height": 24}
    body.update(kw)
    return body


def decode_png(blob):
    with Image.open(io.BytesIO(blob)) as img:
        return np.asarray(img)


def split_multipart(blob):
    """Content-ID -> PNG bytes from the fixed-boundary multipart body."""
    parts = {}
    for chunk in blob.split(f"--{LAYER_BOUNDARY}".encode())[1:-1]:
        head, _, rest = chunk.partition(b"\r\n\r\n")
        name = next(line.split(b":", 1)[1].strip() for line in head.splitlines()
                    if line.lower().startswith(b"content-id"))
        parts[name.decode()] = rest[:-2]  # trailing CRLF
    return parts


class TestSessionLifecycle:
    def test_health_reports_the_loaded_checkpoint(self, client):
        doc = client.get("/api/health").json()
        assert doc["status"] == "ok"
        assert doc["revision"] == 0
        assert len(doc["checkpoint"]) == 16

    def test_endpoints_return_503_before_load(self, world):
        empty = TestClient(create_app())
        assert empty.get("/api/health").json() == {"status": "no checkpoint"}
        assert empty.get("/api/graph").status_code == 503
        assert empty.get("/api/revisions").status_code == 503
        assert empty.post("/api/edit", json={"ops": []}).status_code == 503
        assert empty.post("/api/undo").status_code == 503
        assert empty.post("/api/render", json=render_body(world)).status_code == 503


class TestGraphEndpoint:
    def test_fresh_session_exports_the_schema(self, client):
        r = client.get("/api/graph")
        assert r.status_code == 200
        assert r.headers["x-prosg-revision"] == "0"
        doc = r.json()
        assert doc["version"] == "prosg-graph/1"
        assert [n["id"] for n in doc["nodes"]] == ["obj_0"]
        assert sorted(doc["camera_poses"]) == ["0", "1", "2", "3"]
        assert doc["checkpoint"] == client.get("/api/health").json()["checkpoint"]

    def test_edit_is_reflected_and_history_grows(self, client):
        move = [[1, 0, 0, 2.0], [0, 1, 0, 0.5], [0, 0, 1, 0.4]]
        r = client.post("/api/edit", json={"ops": [
            {"op": "set_pose", "node": "obj_0", "frame": 0, "pose": move}]})
        assert r.status_code == 200
        assert r.json() == {"revision": 1}
        doc = client.get("/api/graph").json()
        assert doc["nodes"][0]["track"]["0"] == [[1.0, 0.0, 0.0, 2.0],
                                                 [0.0, 1.0, 0.0, 0.5],
                                                 [0.0, 0.0, 1.0, 0.4]]
        revs = client.get("/api/revisions").json()
        assert revs["current"] == 1
        assert len(revs["revisions"]) == 2
        assert revs["revisions"][1]["ops"][0]["op"] == "set_pose"


class TestEditEndpoint:
    def test_remove_then_undo_restores_byte_for_byte(self, client):
        original = client.get("/api/graph").content
        assert client.post("/api/edit", json={"ops": [
            {"op": "remove", "node": "obj_0"}]}).json() == {"revision": 1}
        assert client.get("/api/graph").json()["nodes"] == []
        assert client.post("/api/undo").json() == {"revision": 0}
        assert client.get("/api/graph").content == original

    def test_undo_with_no_history_conflicts(self, client):
        assert client.post("/api/undo").status_code == 409

    def test_stale_revision_precondition(self, client):
        ops = [{"op": "remove", "node": "obj_0"}]
        assert client.post("/api/edit", json={"ops": ops, "revision": 0}).status_code == 200
        r = client.post("/api/edit", json={"ops": [], "revision": 0})
        assert r.status_code == 409
        assert "stale" in r.json()["detail"]

    def test_non_orthonormal_pose_is_rejected_with_detail(self, client):
        bad = [[5, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]]
        r = client.post("/api/edit", json={"ops": [
            {"op": "set_pose", "node": "obj_0", "frame": 0, "pose": bad}]})
        assert r.status_code == 400
        assert "orthonormal" in r.json()["detail"]

    def test_unknown_node_404(self, client):
        r = client.post("/api/edit", json={"ops": [{"op": "remove", "node": "ghost"}]})
        assert r.status_code == 404
        assert "ghost" in r.json()["detail"]

    def test_insert_with_unknown_decoder_404(self, client):
        r = client.post("/api/edit", json={"ops": [
            {"op": "insert", "class": "zeppelin", "box": [1, 1, 1], "frame": 0,
             "pose": [[1, 0, 0, 3], [0, 1, 0, 0], [0, 0, 1, 0.5]]}]})
        assert r.status_code == 404
        assert "zeppelin" in r.json()["detail"]

    def test_insert_under_a_known_class_renders(self, client, world):
        cls = client.get("/api/graph").json()["nodes"][0]["class"]
        before = client.post("/api/render", json=render_body(world)).content
        r = client.post("/api/edit", json={"ops": [
            {"op": "insert", "node": "twin", "class": cls, "box": [0.8, 0.8, 0.8],
             "frame": 0, "pose": [[1, 0, 0, 2.5], [0, 1, 0, -0.5], [0, 0, 1, 0.4]]}]})
        assert r.status_code == 200
        assert "twin" in [n["id"] for n in client.get("/api/graph").json()["nodes"]]
        after = client.post("/api/render", json=render_body(world)).content
        assert after != before

    @pytest.mark.parametrize("body,fragment", [
        ({"ops": [{"op": "teleport", "node": "obj_0"}]}, "op"),
        ({"ops": {}}, "ops"),
        ({"ops": [{"op": "remove"}]}, "node"),
        ({"ops": [{"op": "insert", "class": "obj", "box": [1, 1], "frame": 0,
                   "pose": [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]]}]}, "box"),
        ({"ops": [{"op": "remove", "node": "obj_0", "speed": 9}]}, "speed"),
        ({"ops": [], "hints": True}, "hints"),
    ])
    def test_schema_violations_400(self, client, body, fragment):
        r = client.post("/api/edit", json=body)
        assert r.status_code == 400
        assert fragment in r.json()["detail"]

    def test_malformed_json_body_400(self, client):
        r = client.post("/api/edit", content=b"{oops",
                        headers={"content-type": "application/json"})
        assert r.status_code == 400


class TestRenderEndpoint:
    def test_png_and_determinism(self, client, world):
        r1 = client.post("/api/render", json=render_body(world))
        r2 = client.post("/api/render", json=render_body(world))
        assert r1.status_code == 200
        assert r1.headers["content-type"] == "image/png"
        assert r1.headers["x-prosg-revision"] == "0"
        assert r1.content[:8] == b"\x89PNG\r\n\x1a\n"
        assert r1.content == r2.content
        assert decode_png(r1.content).shape == (24, 32, 3)
        assert r1.headers["x-prosg-sequence"] != r2.headers["x-prosg-sequence"]

    def test_removal_changes_only_rays_that_hit_the_node(self, client, world):
        state, config = load_state(world.ckpt)
        graph = state.graphs[-1].graph
        node = graph.nodes["obj_0"]
        pose = Pose.from_matrix34(world.pose)
        pixels = np.stack(np.meshgrid(np.arange(32), np.arange(24)), axis=-1).reshape(-1, 2)
        dirs = pixel_directions(graph.intrinsics, pose, pixels)
        hits = np.zeros(len(dirs), dtype=bool)
        half = 0.5 * config.sampling.shadow_scale
        for i, d in enumerate(dirs):
            o_obj = world_to_object(pose.translation, node, 0)
            d_obj = world_to_object_direction(d, node, 0, normalize=False)
            hits[i] = ray_box_intersect(o_obj, d_obj, half_extent=half) is not None
        mask = hits.reshape(24, 32)

        before = decode_png(client.post("/api/render", json=render_body(world)).content)
        client.post("/api/edit", json={"ops": [{"op": "remove", "node": "obj_0"}]})
        r = client.post("/api/render", json=render_body(world))
        assert r.headers["x-prosg-revision"] == "1"
        after = decode_png(r.content)
        changed = np.any(before != after, axis=-1)
        assert changed.any()
        assert not np.any(changed & ~mask)

    def test_layers_reconstruct_the_composite(self, client, world):
        r = client.post("/api/render", json=render_body(world, layers=True))
        assert r.status_code == 200
        assert r.headers["content-type"].startswith("multipart/mixed")
        parts = split_multipart(r.content)
        assert set(parts) == {"full", "background", "obj_0"}
        full = decode_png(parts["full"]).astype(np.int64)
        total = sum(decode_png(parts[k]).astype(np.int64)
                    for k in parts if k != "full")
        assert np.array_equal(total, full)

    def test_oversized_request_422(self, client, world):
        assert client.post("/api/render",
                           json=render_body(world, width=321)).status_code == 422
        assert client.post("/api/render",
                           json=render_body(world, height=241)).status_code == 422

    @pytest.mark.parametrize("patch", [
        {"pose": [[1, 0], [0, 1]]},
        {"pose": [[3, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0]]},
        {"width": 0},
        {"frame": "zero"},
        {"layers": "yes"},
        {"viewport": "wide"},
    ])
    def test_invalid_fields_400(self, client, world, patch):
        assert client.post("/api/render",
                           json=render_body(world, **patch)).status_code == 400

    def test_timeout_504(self, world):
        client = TestClient(create_app(checkpoint=world.ckpt, timeout=1e-6))
        assert client.post("/api/render", json=render_body(world)).status_code == 504

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")  # inf propagates loudly
    def test_numeric_failure_500(self, world):
        app = create_app(checkpoint=world.ckpt)
        client = TestClient(app)
        params = app.state.session.current.state.graphs[-1].graph.background.parameters()
        params[sorted(params)[0]].data[...] = np.inf
        r = client.post("/api/render", json=render_body(world))
        assert r.status_code == 500
        assert "numeric" in r.json()["detail"]


class TestCrossInterface:
    def test_export_import_cli_renders_identically(self, client, world, tmp_path):
        from prosg.cli import main

        move = [[1, 0, 0, 2.0], [0, 1, 0, 0.5], [0, 0, 1, 0.4]]
        client.post("/api/edit", json={"ops": [
            {"op": "set_pose", "node": "obj_0", "frame": 0, "pose": move}]})
        (tmp_path / "graph.json").write_bytes(client.get("/api/graph").content)
        (tmp_path / "pose.json").write_text(json.dumps({"pose": world.pose}))
        service_png = client.post("/api/render", json=render_body(world)).content

        code = main(["render", str(world.ckpt), str(tmp_path / "out"),
                     "--pose", str(tmp_path / "pose.json"),
                     "--graph", str(tmp_path / "graph.json")])
        assert code == 0
        assert (tmp_path / "out" / "render_00000.png").read_bytes() == service_png


class TestAtomicity:
    def test_concurrent_renders_see_consistent_revisions(self, client, world):
        results = []

        def roam():
            r = client.post("/api/render", json=render_body(world))
            results.append((int(r.headers["x-prosg-revision"]), r.content))

        threads = [threading.Thread(target=roam) for _ in range(4)]
        for th in threads[:2]:
            th.start()
        client.post("/api/edit", json={"ops": [{"op": "remove", "node": "obj_0"}]})
        for th in threads[2:]:
            th.start()
        for th in threads:
            th.join()

        by_revision = {}
        for revision, blob in results:
            assert revision in (0, 1)
            by_revision.setdefault(revision, set()).add(blob)
        # a revision id pins the exact bytes: no render mixes two snapshots
        for blobs in by_revision.values():
            assert len(blobs) == 1

    def test_replay_reproduces_the_current_snapshot(self, client):
        move = [[1, 0, 0, 1.5], [0, 1, 0, 0.0], [0, 0, 1, 0.6]]
        client.post("/api/edit", json={"ops": [
            {"op": "set_pose", "node": "obj_0", "frame": 1, "pose": move}]})
        client.post("/api/edit", json={"ops": [{"op": "remove", "node": "obj_0"}]})
        client.post("/api/undo")
        doc = client.get("/api/graph").json()
        assert doc["nodes"][0]["track"]["1"] == [[1.0, 0.0, 0.0, 1.5],
                                                 [0.0, 1.0, 0.0, 0.0],
                                                 [0.0, 0.0, 1.0, 0.6]]
