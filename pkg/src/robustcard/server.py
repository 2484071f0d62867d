"""Newline-delimited JSON estimate server.

Each request line is one unlabeled query object in the workload format; each
response line is ``{"cardinality": c}`` or ``{"error": message}``. A bad line
never closes the connection.
"""

from __future__ import annotations

import json
import logging
import socketserver
from pathlib import Path

from .encoding import QueryEncoder
from .models import Estimator, load_checkpoint, predict_cardinality
from .queries import query_from_json
from .relational import Database, load_database

log = logging.getLogger(__name__)


class EstimateService:
    def __init__(self, model: Estimator, encoder: QueryEncoder):
        self.model = model
        self.encoder = encoder

    @classmethod
    def from_files(cls, checkpoint: str | Path, manifest: str | Path) -> "EstimateService":
        model, extra = load_checkpoint(checkpoint)
        db: Database = load_database(manifest)
        return cls(model, QueryEncoder(db, int(extra.get("chunk_size", 8))))

    def handle(self, line: str) -> dict:
        try:
            q = query_from_json(json.loads(line))
            return {"cardinality": predict_cardinality(self.model, q, self.encoder)}
        except Exception as exc:  # any bad request becomes an error object
            return {"error": f"{type(exc).__name__}: {exc}"}


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        service: EstimateService = self.server.service
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            self.wfile.write((json.dumps(service.handle(line)) + "\n").encode())
            self.wfile.flush()


class EstimateServer(socketserver.TCPServer):
    allow_reuse_address = True

    def __init__(self, address, service: EstimateService):
        self.service = service
        super().__init__(address, _Handler)


class ThreadedEstimateServer(socketserver.ThreadingMixIn, EstimateServer):
    daemon_threads = True


def make_server(service: EstimateService, host: str = "127.0.0.1", port: int = 0,
                workers: int = 1) -> EstimateServer:
    cls = ThreadedEstimateServer if workers > 1 else EstimateServer
    return cls((host, port), service)


def serve(service: EstimateService, host: str = "127.0.0.1", port: int = 0, workers: int = 1,
          announce=print) -> None:
    with make_server(service, host, port, workers) as srv:
        h, p = srv.server_address[:2]
        announce(f"listening on {h}:{p}")
        try:
            srv.serve_forever()
        except KeyboardInterrupt:
            log.info("shutting down")
