"""Fragment datasets on disk: manifest, PNG frames and the binary track file.

Layout of one fragment directory::

    manifest.json
    color/000000.png    8-bit RGB
    depth/000000.png    16-bit, integer units of 1/depth_scale meters (0 = no reading)
    hand/000000.png     8-bit 0/255
    interaction/000000.png  8-bit 0/255
    regions/000000.png  16-bit region ids
    tracks.bin          JSON header line + little-endian float32 block; the header's
                        "frame" says whether positions are per-frame camera or world coordinates
    gt.json             optional ground-truth sidecar
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Intrinsics
from .errors import InvalidSpec, WriteError
from .joints import JOINT_KINDS
from .trackfit import TrackSet

STATIC_FRAGMENT = "static_fragment"
DYNAMIC_FRAGMENT = "dynamic_fragment"
FRAME_KEYS = ("color", "depth", "hand_mask", "interaction_mask", "regions")
TRACK_FRAMES = ("camera", "world")


# --- PNG helpers ---------------------------------------------------------------------


def write_depth_png(path, depth_m: np.ndarray, scale: int = 1000) -> None:
    d = np.nan_to_num(np.asarray(depth_m, dtype=float), nan=0.0, posinf=0.0)
    mm = np.clip(np.round(d * scale), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def read_depth_png(path, scale: int = 1000) -> np.ndarray:
    raw = np.array(Image.open(path)).astype(np.float32)
    return raw / np.float32(scale)


def write_mask_png(path, mask: np.ndarray) -> None:
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(path)


def read_mask_png(path) -> np.ndarray:
    return np.array(Image.open(path).convert("L")) > 127


def write_regions_png(path, labels: np.ndarray) -> None:
    lab = np.asarray(labels)
    if lab.min() < 0 or lab.max() > 65535:
        raise WriteError("region ids must fit in 16 bits")
    Image.fromarray(lab.astype(np.uint16)).save(path)


def read_regions_png(path) -> np.ndarray:
    return np.array(Image.open(path)).astype(np.uint16)


def write_color_png(path, rgb: np.ndarray) -> None:
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path)


# --- tracks ---------------------------------------------------------------------------


def write_tracks(path, tracks: TrackSet, frame: str = "camera") -> None:
    if frame not in TRACK_FRAMES:
        raise InvalidSpec(f"track frame must be one of {TRACK_FRAMES}")
    T, N = tracks.visibility.shape
    header = {"format": "egotwin-tracks", "version": 1, "num_tracks": T, "num_frames": N, "dtype": "<f4", "frame": frame, "blocks": ["positions", "visibility", "birth_frame"]}
    block = np.concatenate([tracks.positions.reshape(-1), tracks.visibility.reshape(-1), np.asarray(tracks.birth_frame, dtype=float)]).astype("<f4")
    try:
        with open(path, "wb") as fh:
            fh.write((json.dumps(header, sort_keys=True) + "\n").encode("ascii"))
            fh.write(block.tobytes())
    except OSError as exc:
        raise WriteError(str(exc)) from exc


def read_tracks(path, with_frame: bool = False):
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    header = json.loads(data[:nl].decode("ascii"))
    T, N = int(header["num_tracks"]), int(header["num_frames"])
    block = np.frombuffer(data, dtype="<f4", offset=nl + 1).astype(np.float64)
    if block.size != T * N * 3 + T * N + T:
        raise InvalidSpec(f"track block has {block.size} values, expected {T * N * 4 + T}")
    pos = block[: T * N * 3].reshape(T, N, 3)
    vis = block[T * N * 3 : T * N * 4].reshape(T, N)
    birth = block[T * N * 4 :].astype(np.int64)
    ts = TrackSet(pos, vis, birth)
    frame = header.get("frame", "camera")
    if frame not in TRACK_FRAMES:
        raise InvalidSpec(f"unknown track frame {frame!r}")
    return (ts, frame) if with_frame else ts


# --- manifest -------------------------------------------------------------------------


@dataclass
class FragmentManifest:
    fragment_id: str
    kind: str
    intrinsics: Intrinsics
    frames: list[dict]
    depth_scale: int = 1000
    joint_kind: str | None = None
    tracks: str | None = None
    ground_truth: str | None = None
    confidence: list[float] | None = None
    adjacent: list[str] = field(default_factory=list)
    root: Path = Path(".")

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def path(self, rel: str | None) -> Path | None:
        return None if rel is None else self.root / rel

    def validate(self, check_files: bool = True) -> None:
        if self.kind not in (STATIC_FRAGMENT, DYNAMIC_FRAGMENT):
            raise InvalidSpec(f"unknown fragment kind {self.kind!r}")
        if self.kind == DYNAMIC_FRAGMENT and self.joint_kind not in JOINT_KINDS:
            raise InvalidSpec("dynamic fragments must declare a joint kind")
        if self.depth_scale <= 0:
            raise InvalidSpec("depth scale must be positive")
        if not self.frames:
            raise InvalidSpec("fragment has no frames")
        if self.confidence is not None and len(self.confidence) != len(self.frames):
            raise InvalidSpec("confidence list length differs from frame count")
        if not check_files:
            return
        for k, fr in enumerate(self.frames):
            if "depth" not in fr:
                raise InvalidSpec(f"frame {k} has no depth entry")
            for key, rel in fr.items():
                if rel is not None and not (self.root / rel).exists():
                    raise FileNotFoundError(f"frame {k}: missing {key} file {rel}")
        for rel in (self.tracks,):
            if rel is not None and not (self.root / rel).exists():
                raise FileNotFoundError(f"missing track file {rel}")

    def to_dict(self) -> dict:
        return {
            "fragment_id": self.fragment_id,
            "kind": self.kind,
            "joint_kind": self.joint_kind,
            "intrinsics": self.intrinsics.to_dict(),
            "depth_scale": self.depth_scale,
            "frames": self.frames,
            "confidence": self.confidence,
            "tracks": self.tracks,
            "ground_truth": self.ground_truth,
            "adjacent": list(self.adjacent),
        }

    @classmethod
    def from_dict(cls, d: dict, root=".") -> "FragmentManifest":
        try:
            return cls(
                fragment_id=str(d["fragment_id"]),
                kind=d["kind"],
                intrinsics=Intrinsics.from_dict(d["intrinsics"]),
                frames=list(d["frames"]),
                depth_scale=int(d.get("depth_scale", 1000)),
                joint_kind=d.get("joint_kind"),
                tracks=d.get("tracks"),
                ground_truth=d.get("ground_truth"),
                confidence=d.get("confidence"),
                adjacent=list(d.get("adjacent", [])),
                root=Path(root),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSpec(f"malformed manifest: {exc}") from exc

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


def load_manifest(path) -> FragmentManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        d = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidSpec(f"cannot read manifest {path}: {exc}") from exc
    return FragmentManifest.from_dict(d, path.parent)


# --- in-memory fragment ---------------------------------------------------------------


@dataclass
class Fragment:
    """All per-frame arrays of one fragment, depth in meters."""

    depths: list[np.ndarray]
    intrinsics: Intrinsics
    hand_masks: list[np.ndarray] | None = None
    interaction_masks: list[np.ndarray] | None = None
    confidence: np.ndarray | None = None
    region_maps: list[np.ndarray] | None = None
    tracks: TrackSet | None = None
    colors: list[np.ndarray] | None = None
    tracks_frame: str = "camera"

    @property
    def num_frames(self) -> int:
        return len(self.depths)


def load_fragment(manifest: FragmentManifest) -> Fragment:
    def per_frame(key, reader):
        if not all(fr.get(key) for fr in manifest.frames):
            return None
        return [reader(manifest.root / fr[key]) for fr in manifest.frames]

    depths = [read_depth_png(manifest.root / fr["depth"], manifest.depth_scale) for fr in manifest.frames]
    H, W = manifest.intrinsics.shape
    for k, d in enumerate(depths):
        if d.shape != (H, W):
            raise InvalidSpec(f"frame {k}: depth is {d.shape}, intrinsics say {(H, W)}")
    tracks, tframe = read_tracks(manifest.root / manifest.tracks, with_frame=True) if manifest.tracks else (None, "camera")
    if tracks is not None and tracks.num_frames != len(depths):
        raise InvalidSpec("track file frame count differs from the manifest")
    conf = None if manifest.confidence is None else np.asarray(manifest.confidence, dtype=float)
    return Fragment(
        depths=depths,
        intrinsics=manifest.intrinsics,
        hand_masks=per_frame("hand_mask", read_mask_png),
        interaction_masks=per_frame("interaction_mask", read_mask_png),
        confidence=conf,
        region_maps=per_frame("regions", read_regions_png),
        tracks=tracks,
        colors=per_frame("color", lambda p: np.array(Image.open(p).convert("RGB"))),
        tracks_frame=tframe,
    )


def write_fragment(root, fragment_id: str, kind: str, frag: Fragment, joint_kind: str | None = None, depth_scale: int = 1000, ground_truth: dict | None = None, adjacent=()) -> FragmentManifest:
    """Write ``frag`` in the on-disk layout and return its manifest."""
    root = Path(root)
    try:
        for sub in ("color", "depth", "hand", "interaction", "regions"):
            (root / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise WriteError(str(exc)) from exc
    frames = []
    for k in range(frag.num_frames):
        name = f"{k:06d}.png"
        fr = {"depth": f"depth/{name}"}
        write_depth_png(root / fr["depth"], frag.depths[k], depth_scale)
        if frag.colors is not None:
            fr["color"] = f"color/{name}"
            write_color_png(root / fr["color"], frag.colors[k])
        if frag.hand_masks is not None:
            fr["hand_mask"] = f"hand/{name}"
            write_mask_png(root / fr["hand_mask"], frag.hand_masks[k])
        if frag.interaction_masks is not None:
            fr["interaction_mask"] = f"interaction/{name}"
            write_mask_png(root / fr["interaction_mask"], frag.interaction_masks[k])
        if frag.region_maps is not None:
            fr["regions"] = f"regions/{name}"
            write_regions_png(root / fr["regions"], frag.region_maps[k])
        frames.append(fr)
    tracks = None
    if frag.tracks is not None:
        tracks = "tracks.bin"
        write_tracks(root / tracks, frag.tracks, frag.tracks_frame)
    gt = None
    if ground_truth is not None:
        gt = "gt.json"
        (root / gt).write_text(json.dumps(ground_truth, indent=1, sort_keys=True) + "\n")
    m = FragmentManifest(
        fragment_id=fragment_id,
        kind=kind,
        intrinsics=frag.intrinsics,
        frames=frames,
        depth_scale=depth_scale,
        joint_kind=joint_kind,
        tracks=tracks,
        ground_truth=gt,
        confidence=None if frag.confidence is None else [float(c) for c in frag.confidence],
        adjacent=list(adjacent),
        root=root,
    )
    m.save()
    return m
