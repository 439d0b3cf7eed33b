"""Run manifests and the orphan-file housekeeping check.

Every CLI run records the files it read and the files it created or
modified.  A file under the artifact directories that no manifest mentions is
an orphan.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path
from typing import Iterable

MANIFEST_DIR = "manifests"


def git_blob_hash(path: str | os.PathLike) -> str:
    """The object id ``git hash-object`` would assign to the file."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def file_record(path: str | os.PathLike) -> dict:
    p = Path(path)
    return {"path": str(p.resolve()), "git_oid": git_blob_hash(p), "bytes": p.stat().st_size}


def _visible_files(root: Path) -> Iterable[Path]:
    if not root.exists():
        return
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = [d for d in dirnames if not d.startswith(".") and d != MANIFEST_DIR]
        for name in filenames:
            if not name.startswith(".") and not name.endswith(".tmp"):
                yield Path(dirpath) / name


def snapshot(roots: Iterable[str | os.PathLike]) -> dict[str, tuple[int, int]]:
    """``{resolved path: (size, mtime_ns)}`` for every tracked file under ``roots``."""
    out = {}
    for root in roots:
        for p in _visible_files(Path(root)):
            st = p.stat()
            out[str(p.resolve())] = (st.st_size, st.st_mtime_ns)
    return out


def changed_files(before: dict, after: dict) -> list[str]:
    return sorted(p for p, sig in after.items() if before.get(p) != sig)


def write_manifest(manifest_dir: str | os.PathLike, command: str, record: dict) -> Path:
    d = Path(manifest_dir) / MANIFEST_DIR
    d.mkdir(parents=True, exist_ok=True)
    ns = time.time_ns()
    stamp = time.strftime("%Y%m%dT%H%M%S", time.gmtime(ns / 1e9))
    path = d / f"{command}-{stamp}.{ns % 10**9:09d}-{os.getpid()}.json"
    tmp = path.with_suffix(".json.tmp")
    tmp.write_text(json.dumps(record, indent=1, sort_keys=True))
    os.replace(tmp, path)
    return path


def referenced_paths(manifest_dirs: Iterable[str | os.PathLike]) -> set[str]:
    refs: set[str] = set()
    for d in manifest_dirs:
        for m in sorted((Path(d) / MANIFEST_DIR).glob("*.json")):
            rec = json.loads(m.read_text())
            for key in ("consumed", "produced"):
                refs.update(item["path"] for item in rec.get(key, []))
    return refs


def find_orphans(roots: Iterable[str | os.PathLike], manifest_dirs: Iterable[str | os.PathLike]) -> list[Path]:
    """Files under ``roots`` that no manifest lists as consumed or produced."""
    refs = referenced_paths(manifest_dirs)
    orphans = []
    for root in roots:
        for p in _visible_files(Path(root)):
            if str(p.resolve()) not in refs:
                orphans.append(p)
    return sorted(set(orphans))
