from __future__ import annotations

import json
import threading
import urllib.error
import urllib.request

import pytest

from conftest import make_sequence
from gaitlab.core import serialize_skeleton_sequence
from gaitlab.review import RatingStore, ReviewCase, create_study
from gaitlab.server import StudyServer
from gaitlab.stats import LIKERT_DIMENSIONS
from gaitlab.util import rng_for

MODELS = ("aurora", "borealis", "cascade")


_PHRASES = {
    "aurora": "Cadence is elevated with shortened left steps in case {i}.",
    "borealis": "Gait appears irregular in case {i}; limited specifics given.",
    "cascade": "Case {i} shows reduced knee excursion and increased double support.",
}


def _cases(n, preview=""):
    # rationale text must not embed identities; blinding depends on it
    return [
        ReviewCase(
            case_id=f"case{i:03d}",
            preview=preview,
            rationales={m: _PHRASES[m].format(i=i) for m in MODELS},
        )
        for i in range(n)
    ]


def _get(port, path):
    req = urllib.request.Request(f"http://127.0.0.1:{port}{path}")
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as e:
        return e.code, e.read()


def _post(port, path, body):
    data = json.dumps(body).encode()
    req = urllib.request.Request(
        f"http://127.0.0.1:{port}{path}", data=data, headers={"Content-Type": "application/json"}
    )
    try:
        with urllib.request.urlopen(req, timeout=10) as resp:
            return resp.status, resp.read()
    except urllib.error.HTTPError as e:
        return e.code, e.read()


def _scores(base=4):
    return {lab: {d: base for d in LIKERT_DIMENSIONS} for lab in "ABC"}


@pytest.fixture()
def server(tmp_path):
    study = create_study(_cases(6), MODELS, ["r0", "r1"], seed=3)
    store = RatingStore(str(tmp_path / "ratings.jsonl"))
    srv = StudyServer(study, store, port=0)
    srv.start()
    yield srv
    srv.stop()


class TestEndpoints:
    def test_health(self, server):
        status, body = _get(server.port, "/api/health")
        assert status == 200
        assert json.loads(body) == {"ok": True}

    def test_full_walk_leaks_no_model_identity(self, server):
        collected = []
        for rater in ("r0", "r1"):
            while True:
                status, body = _get(server.port, f"/api/raters/{rater}/next")
                collected.append(body)
                payload = json.loads(body)
                if payload.get("complete"):
                    break
                status, body = _post(
                    server.port,
                    f"/api/raters/{rater}/ratings",
                    {"case_id": payload["case_id"], "scores": _scores(), "best": "B"},
                )
                collected.append(body)
                assert status == 200
        status, body = _get(server.port, "/api/summary")
        assert status == 200
        collected.append(body)
        blob = b"".join(collected).decode()
        for m in MODELS:
            assert m not in blob
        summary = json.loads(body)
        assert summary["rated"] == 6
        assert set(summary["preference_counts"]) == {"model_1", "model_2", "model_3"}

    def test_next_then_submit_advances(self, server):
        _, body = _get(server.port, "/api/raters/r0/next")
        first = json.loads(body)
        status, body = _post(
            server.port,
            "/api/raters/r0/ratings",
            {"case_id": first["case_id"], "scores": _scores(), "best": "A", "comment": "fine"},
        )
        assert status == 200
        ack = json.loads(body)
        assert ack["ok"] is True
        assert ack["progress"]["rated"] == 1
        _, body = _get(server.port, "/api/raters/r0/next")
        assert json.loads(body)["case_id"] != first["case_id"]

    def test_duplicate_submission_conflict(self, server):
        _, body = _get(server.port, "/api/raters/r0/next")
        case_id = json.loads(body)["case_id"]
        payload = {"case_id": case_id, "scores": _scores(), "best": "A"}
        status, _ = _post(server.port, "/api/raters/r0/ratings", payload)
        assert status == 200
        status, body = _post(server.port, "/api/raters/r0/ratings", payload)
        assert status == 409
        assert json.loads(body)["error"] == "DuplicateRating"

    def test_concurrent_duplicates_yield_one_record(self, server):
        _, body = _get(server.port, "/api/raters/r1/next")
        case_id = json.loads(body)["case_id"]
        payload = {"case_id": case_id, "scores": _scores(), "best": "C"}
        barrier = threading.Barrier(2)
        results = []

        def fire():
            barrier.wait()
            results.append(_post(server.port, "/api/raters/r1/ratings", payload)[0])

        threads = [threading.Thread(target=fire) for _ in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(results) == [200, 409]
        assert len(server.store.records()) == 1

    def test_validation_errors(self, server):
        _, body = _get(server.port, "/api/raters/r0/next")
        case_id = json.loads(body)["case_id"]
        bad = {"case_id": case_id, "scores": {"A": {d: 6 for d in LIKERT_DIMENSIONS}}, "best": "A"}
        status, body = _post(server.port, "/api/raters/r0/ratings", bad)
        assert status == 400
        assert json.loads(body)["error"] == "IncompleteScores"

    def test_unknown_rater_404(self, server):
        status, body = _get(server.port, "/api/raters/ghost/next")
        assert status == 404
        assert json.loads(body)["error"] == "UnknownRater"

    def test_summary_before_ratings_is_empty_study(self, server):
        status, body = _get(server.port, "/api/summary")
        assert status == 409
        assert json.loads(body)["error"] == "EmptyStudy"


class TestStaticAndPreview:
    def test_static_ui_serving(self, tmp_path):
        ui = tmp_path / "ui"
        ui.mkdir()
        (ui / "index.html").write_text("<html><body>review tool</body></html>")
        (ui / "app.js").write_text("console.log('ok');")
        study = create_study(_cases(1), MODELS, ["r0"], seed=0)
        store = RatingStore(str(tmp_path / "r.jsonl"))
        srv = StudyServer(study, store, port=0, ui_dir=str(ui))
        srv.start()
        try:
            status, body = _get(srv.port, "/")
            assert status == 200 and b"review tool" in body
            status, body = _get(srv.port, "/app.js")
            assert status == 200 and b"console" in body
            status, _ = _get(srv.port, "/../etc/passwd")
            assert status == 404
        finally:
            srv.stop()

    def test_skeleton_preview_endpoint(self, tmp_path):
        rows = rng_for("preview", 1).uniform(-30, 30, size=(12, 46))
        seq = make_sequence(rows, clip_id="case000")
        preview_path = tmp_path / "case000.seq"
        preview_path.write_bytes(serialize_skeleton_sequence(seq))
        study = create_study(_cases(1, preview="case000.seq"), MODELS, ["r0"], seed=0)
        store = RatingStore(str(tmp_path / "r.jsonl"))
        srv = StudyServer(study, store, port=0, preview_dir=str(tmp_path))
        srv.start()
        try:
            status, body = _get(srv.port, "/api/previews/case000")
            assert status == 200
            payload = json.loads(body)
            assert payload["fps"] == 30.0
            assert len(payload["frames"]) == 12
            frame = payload["frames"][0]
            assert set(frame) == {"left", "right"}
            assert set(frame["left"]) == {"knee", "ankle", "toe"}
        finally:
            srv.stop()
