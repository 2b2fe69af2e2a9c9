"""Object store backends: a local directory and a plain HTTP server.

HTTP wire format::

    GET  /objects              -> JSON list of names
    GET  /objects/<name>       -> body
    HEAD /objects/<name>       -> Content-Length, X-Checksum-CRC32 (decimal)
"""
from __future__ import annotations

import os
import zlib
from dataclasses import dataclass
from pathlib import Path

import httpx

from pcpipe.errors import ObjectNotFound, StoreUnreachable

CRC_HEADER = "X-Checksum-CRC32"


@dataclass(frozen=True)
class ObjectInfo:
    name: str
    size: int
    crc32: int | None = None


def crc32_of(data: bytes) -> int:
    return zlib.crc32(data) & 0xFFFFFFFF


def file_crc32(path, chunk=1 << 20) -> int:
    crc = 0
    with open(path, "rb") as fh:
        while True:
            block = fh.read(chunk)
            if not block:
                return crc & 0xFFFFFFFF
            crc = zlib.crc32(block, crc)


def _check_name(name: str) -> str:
    if not name or "/" in name or "\\" in name or name in (".", ".."):
        raise ObjectNotFound(f"invalid object name {name!r}")
    return name


class ObjectStore:
    backend = "abstract"

    def list(self) -> list[str]:
        raise NotImplementedError

    def get(self, name: str) -> bytes:
        raise NotImplementedError

    def head(self, name: str) -> ObjectInfo:
        raise NotImplementedError


class LocalDirStore(ObjectStore):
    backend = "local_dir"

    def __init__(self, root):
        self.root = Path(root)

    def _dir(self) -> Path:
        if not self.root.is_dir():
            raise StoreUnreachable(f"store directory {self.root} does not exist")
        return self.root

    def list(self) -> list[str]:
        return sorted(p.name for p in self._dir().iterdir() if p.is_file())

    def _path(self, name: str) -> Path:
        p = self._dir() / _check_name(name)
        if not p.is_file():
            raise ObjectNotFound(f"no object {name!r} in {self.root}")
        return p

    def get(self, name: str) -> bytes:
        try:
            return self._path(name).read_bytes()
        except OSError as exc:
            raise StoreUnreachable(f"reading {name}: {exc}") from exc

    def head(self, name: str) -> ObjectInfo:
        p = self._path(name)
        return ObjectInfo(name, p.stat().st_size, file_crc32(p))

    def __repr__(self):
        return f"LocalDirStore({os.fspath(self.root)!r})"


class HttpStore(ObjectStore):
    """Client for the object endpoints. ``client`` may be any httpx.Client (e.g. a test client)."""
    backend = "http"

    def __init__(self, base_url: str = "", client: httpx.Client | None = None, timeout: float = 10.0):
        self.base_url = base_url.rstrip("/")
        self.client = client or httpx.Client(timeout=timeout)

    def _url(self, name: str | None = None) -> str:
        return f"{self.base_url}/objects" if name is None else f"{self.base_url}/objects/{_check_name(name)}"

    def _request(self, method: str, url: str, name=None) -> httpx.Response:
        try:
            r = self.client.request(method, url)
        except httpx.HTTPError as exc:
            raise StoreUnreachable(f"{method} {url}: {exc}") from exc
        if r.status_code == 404:
            raise ObjectNotFound(f"no object {name!r} at {self.base_url or 'store'}")
        if r.status_code >= 400:
            raise StoreUnreachable(f"{method} {url}: HTTP {r.status_code}")
        return r

    def list(self) -> list[str]:
        return list(self._request("GET", self._url()).json())

    def get(self, name: str) -> bytes:
        return self._request("GET", self._url(name), name).content

    def head(self, name: str) -> ObjectInfo:
        r = self._request("HEAD", self._url(name), name)
        crc = r.headers.get(CRC_HEADER)
        return ObjectInfo(name, int(r.headers["content-length"]), None if crc is None else int(crc))

    def close(self):
        self.client.close()


def open_store(location: str) -> ObjectStore:
    """``http(s)://...`` -> HttpStore, anything else -> LocalDirStore."""
    if location.startswith(("http://", "https://")):
        return HttpStore(location)
    return LocalDirStore(location)
