"""Read-only HTTP server for scene bundles, with byte-range support.

The viewer streams STL meshes and PNG patches; single-range requests get
206 responses so partial mesh loads work. The bundle is validated before
the server starts and never mutated.
"""

from __future__ import annotations

import logging
import re
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .scene import validate_bundle

__all__ = ["make_server", "serve"]

log = logging.getLogger(__name__)

CONTENT_TYPES = {
    ".json": "application/json",
    ".csv": "text/csv",
    ".png": "image/png",
    ".stl": "model/stl",
    ".html": "text/html; charset=utf-8",
    ".js": "text/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
}

_RANGE_RE = re.compile(r"bytes=(\d*)-(\d*)$")


class BundleRequestHandler(BaseHTTPRequestHandler):
    root: Path  # set by make_server on the subclass

    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # route through logging, not stderr
        log.debug("%s - %s", self.address_string(), fmt % args)

    def _resolve(self) -> Path | None:
        rel = self.path.split("?", 1)[0].lstrip("/")
        if not rel:
            rel = "bundle.json"
        target = (self.root / rel).resolve()
        try:
            target.relative_to(self.root.resolve())
        except ValueError:
            return None  # path escapes the bundle root
        return target if target.is_file() else None

    def _send_file(self, head_only: bool) -> None:
        target = self._resolve()
        if target is None:
            self.send_error(404, "not found")
            return
        data = target.read_bytes()
        ctype = CONTENT_TYPES.get(target.suffix, "application/octet-stream")

        range_header = self.headers.get("Range")
        if range_header:
            m = _RANGE_RE.match(range_header.strip())
            if not m or (not m.group(1) and not m.group(2)):
                self.send_response(416)
                self.send_header("Content-Range", f"bytes */{len(data)}")
                self.send_header("Content-Length", "0")
                self.end_headers()
                return
            start = int(m.group(1)) if m.group(1) else None
            end = int(m.group(2)) if m.group(2) else None
            if start is None:  # suffix range: last N bytes
                start = max(len(data) - (end or 0), 0)
                end = len(data) - 1
            elif end is None or end >= len(data):
                end = len(data) - 1
            if start >= len(data) or start > end:
                self.send_response(416)
                self.send_header("Content-Range", f"bytes */{len(data)}")
                self.send_header("Content-Length", "0")
                self.end_headers()
                return
            chunk = data[start : end + 1]
            self.send_response(206)
            self.send_header("Content-Type", ctype)
            self.send_header("Content-Range", f"bytes {start}-{end}/{len(data)}")
            self.send_header("Content-Length", str(len(chunk)))
            self.send_header("Accept-Ranges", "bytes")
            self.end_headers()
            if not head_only:
                self.wfile.write(chunk)
            return

        self.send_response(200)
        self.send_header("Content-Type", ctype)
        self.send_header("Content-Length", str(len(data)))
        self.send_header("Accept-Ranges", "bytes")
        self.end_headers()
        if not head_only:
            self.wfile.write(data)

    def do_GET(self):
        self._send_file(head_only=False)

    def do_HEAD(self):
        self._send_file(head_only=True)


def make_server(bundle_root: Path | str, port: int = 8080) -> ThreadingHTTPServer:
    """Validate the bundle and return a ready-to-run server (not started)."""
    root = Path(bundle_root)
    validate_bundle(root)
    handler = type("BoundHandler", (BundleRequestHandler,), {"root": root})
    return ThreadingHTTPServer(("0.0.0.0", port), handler)


def serve(bundle_root: Path | str, port: int = 8080) -> None:
    server = make_server(bundle_root, port)
    log.info("serving bundle %s on port %d", bundle_root, server.server_address[1])
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
