"""Cached, per-host rate-limited fetching of source pages."""
from __future__ import annotations

import hashlib
import json
import threading
import time
import urllib.error
import urllib.request
from pathlib import Path
from urllib.parse import urlsplit

from .types import SOURCE_HOSTS, SOURCE_SUBJECTS, RawDocument

USER_AGENT = "k12bert-corpus/0.1"


class FetchError(Exception):
    """Network-level failure; safe to retry later."""

    retryable = True

    def __init__(self, host: str, message: str):
        super().__init__(f"{host}: {message}")
        self.host = host


class UnsupportedContentError(Exception):
    pass


class _HostThrottle:
    def __init__(self):
        self._lock = threading.Lock()
        self._host_locks: dict[str, threading.Lock] = {}
        self._last: dict[str, float] = {}

    def host_lock(self, host: str) -> threading.Lock:
        with self._lock:
            return self._host_locks.setdefault(host, threading.Lock())

    def wait(self, host: str, min_interval_ms: int) -> None:
        # caller holds host_lock(host)
        last = self._last.get(host)
        if last is not None:
            delay = last + min_interval_ms / 1000.0 - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        self._last[host] = time.monotonic()


_throttle = _HostThrottle()


def url_key(url: str) -> str:
    return hashlib.sha256(url.encode("utf-8")).hexdigest()


def _source_for_host(host: str) -> str | None:
    host = host.lower()
    for known, source in SOURCE_HOSTS.items():
        if host == known or host.endswith("." + known):
            return source
    return None


def _kind_for(content_type: str) -> str:
    mime = content_type.split(";")[0].strip().lower()
    if mime in ("text/html", "application/xhtml+xml"):
        return "html"
    if mime == "text/plain":
        return "plain_text"
    raise UnsupportedContentError(f"unsupported content type {content_type!r}")


def fetch_source(
    url: str,
    cache_dir: str | Path,
    min_interval_ms: int = 1000,
    *,
    source: str | None = None,
    subjects=None,
    timeout: float = 30.0,
) -> RawDocument:
    parts = urlsplit(url)
    if parts.scheme not in ("http", "https") or not parts.hostname:
        raise ValueError(f"not a fetchable url: {url!r}")
    host = parts.hostname
    source = source or _source_for_host(host) or host
    if subjects is None:
        if source not in SOURCE_SUBJECTS:
            raise ValueError(f"subjects required for unknown source {source!r}")
        subjects = SOURCE_SUBJECTS[source]

    key = url_key(url)
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    body_path = cache_dir / f"{key}.body"
    meta_path = cache_dir / f"{key}.json"

    if body_path.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        body = body_path.read_text(encoding="utf-8")
        return RawDocument(key, source, subjects, meta["kind"], body)

    with _throttle.host_lock(host):
        _throttle.wait(host, min_interval_ms)
        req = urllib.request.Request(url, headers={"User-Agent": USER_AGENT})
        try:
            with urllib.request.urlopen(req, timeout=timeout) as resp:
                content_type = resp.headers.get("Content-Type", "")
                kind = _kind_for(content_type)
                charset = resp.headers.get_content_charset() or "utf-8"
                body = resp.read().decode(charset, errors="replace")
        except (urllib.error.URLError, TimeoutError, ConnectionError) as e:
            raise FetchError(host, str(e)) from e

    tmp = body_path.with_suffix(".tmp")
    tmp.write_text(body, encoding="utf-8")
    tmp.replace(body_path)
    meta_path.write_text(json.dumps({"url": url, "kind": kind, "content_type": content_type}), encoding="utf-8")
    return RawDocument(key, source, subjects, kind, body)
