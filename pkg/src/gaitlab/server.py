"""HTTP layer for the blinded review study, plus static UI file serving.

Endpoints (JSON request/response bodies):

* ``GET  /api/health``                 -> {"ok": true}
* ``GET  /api/raters/{id}/next``       -> BlindedCase payload, or
  {"complete": true, "progress": {...}} once the rater has finished
* ``POST /api/raters/{id}/ratings``    -> {"ok": true, "progress": {...}}
* ``GET  /api/summary``                -> study summary with model names
  replaced by ordinal aliases (the API never reveals identities)
* ``GET  /api/previews/{case_id}``     -> stick-figure frames when the case
  preview resolves to a skeleton file
* ``GET  /<path>``                     -> static files from the UI directory

Domain errors map to {"error": "<ErrorName>", "detail": "..."} with status
409 for DuplicateRating/WrongCase, 404 for unknown raters/resources, and 400
for validation failures.
"""

from __future__ import annotations

import json
import os
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .core import parse_skeleton_sequence, sample_frames
from .errors import (
    DuplicateRating,
    EmptyStudy,
    GaitLabError,
    IncompleteScores,
    StudyComplete,
    UnknownRater,
    WrongCase,
)
from .gait import forward_kinematics_sagittal
from .review import (
    RatingStore,
    ReviewStudy,
    next_case,
    study_summary,
    submit_rating,
    summary_to_json,
)

_STATUS_BY_ERROR = {
    DuplicateRating: 409,
    WrongCase: 409,
    UnknownRater: 404,
    IncompleteScores: 400,
    EmptyStudy: 409,
}

_CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".mjs": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".map": "application/json",
    ".json": "application/json",
    ".svg": "image/svg+xml",
}

_RATER_NEXT = re.compile(r"^/api/raters/([^/]+)/next$")
_RATER_RATINGS = re.compile(r"^/api/raters/([^/]+)/ratings$")
_PREVIEW = re.compile(r"^/api/previews/([^/]+)$")

PREVIEW_MAX_FRAMES = 240


def preview_frames(study: ReviewStudy, case_id: str, base_dir: str | None) -> dict:
    """Stick-figure joint positions for a skeleton preview file."""
    case = study.case(case_id)
    path = case.preview
    if base_dir and not os.path.isabs(path):
        path = os.path.join(base_dir, path)
    if not (path and os.path.isfile(path)):
        raise WrongCase(f"case {case_id!r} has no skeleton preview file")
    with open(path, "rb") as fh:
        seq = parse_skeleton_sequence(fh)
    if len(seq) > PREVIEW_MAX_FRAMES:
        seq = sample_frames(seq, PREVIEW_MAX_FRAMES)
    frames = []
    for f in seq.frames:
        fk = forward_kinematics_sagittal(f)
        frames.append(
            {
                side: {
                    "knee": list(pos.knee),
                    "ankle": list(pos.ankle),
                    "toe": list(pos.toe),
                }
                for side, pos in fk.items()
            }
        )
    return {"fps": seq.fps, "frames": frames}


class StudyServer:
    """Threaded HTTP server bound to one study + rating store."""

    def __init__(
        self,
        study: ReviewStudy,
        store: RatingStore,
        host: str = "127.0.0.1",
        port: int = 0,
        ui_dir: str | None = None,
        preview_dir: str | None = None,
    ):
        self.study = study
        self.store = store
        self.ui_dir = os.path.abspath(ui_dir) if ui_dir else None
        self.preview_dir = preview_dir
        handler = _make_handler(self)
        self.httpd = ThreadingHTTPServer((host, port), handler)
        self._thread: threading.Thread | None = None

    @property
    def port(self) -> int:
        return self.httpd.server_address[1]

    def start(self) -> None:
        self._thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self._thread.start()

    def serve_forever(self) -> None:
        self.httpd.serve_forever()

    def stop(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()
        if self._thread:
            self._thread.join(timeout=5)


def _make_handler(server: StudyServer):
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, fmt, *args):  # keep test output quiet
            pass

        def _send_json(self, obj, status=200):
            body = json.dumps(obj).encode("utf-8")
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _send_error_obj(self, exc: GaitLabError):
            status = _STATUS_BY_ERROR.get(type(exc), 400)
            self._send_json({"error": exc.name, "detail": str(exc)}, status=status)

        def _serve_static(self, path: str):
            if server.ui_dir is None:
                self._send_json({"error": "NotFound", "detail": "no UI directory configured"}, 404)
                return
            rel = path.lstrip("/") or "index.html"
            full = os.path.abspath(os.path.join(server.ui_dir, rel))
            if not full.startswith(server.ui_dir + os.sep) and full != server.ui_dir:
                self._send_json({"error": "NotFound", "detail": "bad path"}, 404)
                return
            if os.path.isdir(full):
                full = os.path.join(full, "index.html")
            if not os.path.isfile(full):
                self._send_json({"error": "NotFound", "detail": rel}, 404)
                return
            ext = os.path.splitext(full)[1].lower()
            with open(full, "rb") as fh:
                body = fh.read()
            self.send_response(200)
            self.send_header("Content-Type", _CONTENT_TYPES.get(ext, "application/octet-stream"))
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            path = self.path.split("?")[0]
            try:
                if path == "/api/health":
                    self._send_json({"ok": True})
                    return
                m = _RATER_NEXT.match(path)
                if m:
                    try:
                        payload = next_case(server.study, server.store, m.group(1))
                        self._send_json(payload)
                    except StudyComplete:
                        self._send_json(
                            {
                                "complete": True,
                                "progress": {
                                    "rated": len(server.study.assignment[m.group(1)]),
                                    "assigned": len(server.study.assignment[m.group(1)]),
                                },
                            }
                        )
                    return
                if path == "/api/summary":
                    s = study_summary(server.study, server.store)
                    self._send_json(summary_to_json(s, server.study, anonymize=True))
                    return
                m = _PREVIEW.match(path)
                if m:
                    self._send_json(preview_frames(server.study, m.group(1), server.preview_dir))
                    return
                self._serve_static(path)
            except GaitLabError as exc:
                self._send_error_obj(exc)

        def do_POST(self):
            path = self.path.split("?")[0]
            m = _RATER_RATINGS.match(path)
            if not m:
                self._send_json({"error": "NotFound", "detail": path}, 404)
                return
            try:
                length = int(self.headers.get("Content-Length", "0"))
                raw = self.rfile.read(length)
                body = json.loads(raw.decode("utf-8")) if raw else {}
            except (ValueError, json.JSONDecodeError):
                self._send_json({"error": "IncompleteScores", "detail": "request body is not valid JSON"}, 400)
                return
            try:
                ack = submit_rating(
                    server.study,
                    server.store,
                    rater_id=m.group(1),
                    case_id=str(body.get("case_id", "")),
                    label_scores=body.get("scores", {}),
                    best_label=str(body.get("best", "")),
                    comment=str(body.get("comment", "")),
                )
                self._send_json(ack)
            except GaitLabError as exc:
                self._send_error_obj(exc)

    return Handler
