"""Test-dataset acquisition: download, verify, and install the 45-image
underwater benchmark split into green / blue / haze subsets.

The manifest (filenames, subsets, sha256 digests) is frozen on first
successful fetch and verified on every later one, so upstream drift or a
tampered cache surfaces as a named digest mismatch rather than silently
changing scores. With a warm verified cache no network traffic happens.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import shutil
import urllib.request
import zipfile
from dataclasses import dataclass, field
from pathlib import Path


log = logging.getLogger(__name__)

DATASET_URL = "https://github.com/IPNUISTlegal/underwater-test-dataset-U45-/archive/refs/heads/master.zip"
CACHE_ENV = "AQUAFUSE_CACHE"
SUBSETS = ("green", "blue", "haze")
EXPECTED_IMAGE_COUNT = 45
_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class FetchError(RuntimeError):
    pass


class DigestMismatchError(FetchError):
    pass


@dataclass
class ManifestEntry:
    filename: str  # relative to the install root, e.g. "green/1.png"
    subset: str
    sha256: str


@dataclass
class DatasetManifest:
    source_url: str
    entries: list = field(default_factory=list)
    subsets_inferred: bool = False  # True when the cast heuristic assigned subsets

    def to_json(self) -> str:
        return json.dumps({
            "schema": 1,
            "source_url": self.source_url,
            "subsets_inferred": self.subsets_inferred,
            "entries": [[e.filename, e.subset, e.sha256] for e in self.entries],
        }, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        doc = json.loads(text)
        return cls(source_url=doc["source_url"],
                   entries=[ManifestEntry(*row) for row in doc["entries"]],
                   subsets_inferred=doc.get("subsets_inferred", False))

    def subset_counts(self) -> dict:
        counts = {s: 0 for s in SUBSETS}
        for e in self.entries:
            counts[e.subset] = counts.get(e.subset, 0) + 1
        return counts


def cache_root(cache_dir=None) -> Path:
    if cache_dir is not None:
        return Path(cache_dir)
    env = os.environ.get(CACHE_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "aquafuse"


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _download(url: str, dest: Path) -> None:
    dest.parent.mkdir(parents=True, exist_ok=True)
    tmp = dest.with_suffix(dest.suffix + ".part")
    log.info("downloading %s", url)
    try:
        with urllib.request.urlopen(url, timeout=60) as response, open(tmp, "wb") as out:
            shutil.copyfileobj(response, out)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise FetchError(f"download failed for {url}: {exc}") from exc
    tmp.rename(dest)


def _classify_by_path(relpath: str):
    lowered = relpath.lower()
    for subset in SUBSETS:
        if subset in lowered or (subset == "haze" and "hazy" in lowered):
            return subset
    return None


def _classify_by_cast(path: Path):
    """Fallback when the archive layout names no subsets: decide by the
    dominant degradation. Low saturation reads as haze; otherwise the
    stronger of the green/blue channel surpluses wins."""
    from . import imaging
    from .imgio import load_image

    img = load_image(path)
    means = img.reshape(-1, 3).mean(axis=0)
    sat = imaging.rgb_to_hsv(img)[..., 1].mean()
    if sat < 0.25:
        return "haze"
    green_surplus = means[1] - (means[0] + means[2]) / 2
    blue_surplus = means[2] - (means[0] + means[1]) / 2
    return "green" if green_surplus >= blue_surplus else "blue"


def _extract_images(zip_path: Path, scratch: Path) -> list:
    out = []
    with zipfile.ZipFile(zip_path) as zf:
        for info in zf.infolist():
            name = Path(info.filename)
            if info.is_dir() or name.suffix.lower() not in _IMAGE_SUFFIXES:
                continue
            target = scratch / Path(*name.parts[1:]) if len(name.parts) > 1 else scratch / name
            resolved = target.resolve()
            if not str(resolved).startswith(str(scratch.resolve())):
                raise FetchError(f"archive path escapes extraction root: {info.filename}")
            target.parent.mkdir(parents=True, exist_ok=True)
            with zf.open(info) as src, open(target, "wb") as dst:
                shutil.copyfileobj(src, dst)
            out.append(target)
    return sorted(out)


def verify_install(manifest: DatasetManifest, install_dir: Path,
                   quarantine: bool = True) -> list:
    """Check every manifest digest; returns [(filename, expected, actual)]
    for mismatches. Mismatched files move into quarantine/ when asked."""
    problems = []
    qdir = install_dir.parent / "quarantine"
    for entry in manifest.entries:
        path = install_dir / entry.filename
        if not path.exists():
            problems.append((entry.filename, entry.sha256, "<missing>"))
            continue
        actual = _sha256(path)
        if actual != entry.sha256:
            problems.append((entry.filename, entry.sha256, actual))
            if quarantine:
                qdir.mkdir(parents=True, exist_ok=True)
                shutil.move(str(path), str(qdir / path.name))
    return problems


def fetch_u45(url: str = DATASET_URL, cache_dir=None) -> Path:
    """Install the dataset under <cache>/u45/{green,blue,haze} and return
    that root. A warm verified cache returns without touching the network;
    digest mismatches quarantine the files and raise."""
    root = cache_root(cache_dir)
    install_dir = root / "u45"
    manifest_path = root / "u45_manifest.json"

    if manifest_path.exists():
        manifest = DatasetManifest.from_json(manifest_path.read_text())
        problems = verify_install(manifest, install_dir, quarantine=True)
        if not problems:
            return install_dir
        for name, expected, actual in problems:
            log.warning("quarantined %s: expected sha256 %s, got %s", name, expected, actual)
        log.warning("cache verification failed for %d files; reinstalling", len(problems))

    zip_path = root / "downloads" / "u45.zip"
    if not zip_path.exists():
        _download(url, zip_path)

    scratch = root / "scratch"
    if scratch.exists():
        shutil.rmtree(scratch)
    scratch.mkdir(parents=True)
    try:
        images = _extract_images(zip_path, scratch)
        if not images:
            raise FetchError(f"{zip_path}: archive contains no images")

        inferred = False
        assignments = []
        for path in images:
            rel = path.relative_to(scratch)
            subset = _classify_by_path(str(rel))
            if subset is None:
                subset = _classify_by_cast(path)
                inferred = True
            assignments.append((path, subset))

        if install_dir.exists():
            shutil.rmtree(install_dir)
        entries = []
        used = set()
        for path, subset in sorted(assignments, key=lambda a: (a[1], a[0].name)):
            name = path.name
            if name in used:  # same basename in two source folders
                name = f"{path.parent.name}_{name}"
            used.add(name)
            dest = install_dir / subset / name
            dest.parent.mkdir(parents=True, exist_ok=True)
            shutil.copy2(path, dest)
            entries.append(ManifestEntry(filename=f"{subset}/{name}", subset=subset,
                                         sha256=_sha256(dest)))
        manifest = DatasetManifest(source_url=url, entries=entries,
                                   subsets_inferred=inferred)
    finally:
        shutil.rmtree(scratch, ignore_errors=True)

    if manifest_path.exists():
        pinned = DatasetManifest.from_json(manifest_path.read_text())
        pinned_map = {e.filename: e.sha256 for e in pinned.entries}
        fresh_map = {e.filename: e.sha256 for e in manifest.entries}
        if pinned_map != fresh_map:
            problems = [(f, pinned_map.get(f, "<absent>"), fresh_map.get(f, "<absent>"))
                        for f in sorted(set(pinned_map) | set(fresh_map))
                        if pinned_map.get(f) != fresh_map.get(f)]
            detail = "; ".join(f"{f}: expected {e[:12]} got {a[:12]}" for f, e, a in problems[:5])
            raise DigestMismatchError(
                f"refetched dataset disagrees with the pinned manifest ({len(problems)} files): {detail}")
    else:
        manifest_path.write_text(manifest.to_json())
        log.info("manifest frozen at %s (%d images)", manifest_path, len(manifest.entries))

    if len(manifest.entries) != EXPECTED_IMAGE_COUNT:
        log.warning("dataset has %d images, expected %d", len(manifest.entries),
                    EXPECTED_IMAGE_COUNT)
    return install_dir


def load_manifest(cache_dir=None) -> DatasetManifest:
    path = cache_root(cache_dir) / "u45_manifest.json"
    if not path.exists():
        raise FetchError(f"no dataset manifest at {path}; run fetch-u45 first")
    return DatasetManifest.from_json(path.read_text())
