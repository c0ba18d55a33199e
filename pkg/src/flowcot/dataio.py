"""On-disk formats: binary PPM frames, raw .f32 flow fields, dataset dirs.

Dataset layout:
    manifest.json            cfg, seed list, counts, format version
    ep_<seed>/frame_<t>.ppm  binary P6
    ep_<seed>/flow_<t>.f32   row-major little-endian float32, u,v interleaved
    ep_<seed>/meta.json      instruction text+ids, actions, success

All JSON is written sorted with a trailing newline so regeneration is
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError
from .worldsim import Action, Episode, Instruction, WorldConfig

FORMAT_VERSION = 1


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if not data.startswith(b"P6"):
        raise DataError(f"{path}: not a binary PPM")
    # Header: magic, width, height, maxval, single whitespace, then raster.
    fields: list[bytes] = []
    i = 2
    while len(fields) < 3:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if data[i:i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(data) and not data[j:j + 1].isspace():
            j += 1
        fields.append(data[i:j])
        i = j
    w, h, maxval = (int(x) for x in fields)
    if maxval != 255:
        raise DataError(f"{path}: unsupported maxval {maxval}")
    raster = data[i + 1:i + 1 + h * w * 3]
    if len(raster) != h * w * 3:
        raise DataError(f"{path}: truncated raster")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def write_flow(path, flow: np.ndarray) -> None:
    np.asarray(flow, dtype="<f4").tofile(path)


def read_flow(path, h: int, w: int) -> np.ndarray:
    raw = np.fromfile(path, dtype="<f4")
    if raw.size != h * w * 2:
        raise DataError(f"{path}: expected {h * w * 2} floats, got {raw.size}")
    return raw.reshape(h, w, 2).copy()


def dump_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def load_json(path):
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def file_digest(path) -> str:
    return hashlib.blake2b(Path(path).read_bytes(), digest_size=8).hexdigest()


def write_dataset(out_dir, cfg: WorldConfig, episodes: list[Episode]) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_frames = n_flows = 0
    for ep in episodes:
        ep_dir = out / f"ep_{ep.seed}"
        ep_dir.mkdir(exist_ok=True)
        for t, frame in enumerate(ep.frames):
            write_ppm(ep_dir / f"frame_{t}.ppm", frame)
        for t, flow in enumerate(ep.flows):
            write_flow(ep_dir / f"flow_{t}.f32", flow)
        dump_json(ep_dir / "meta.json", {
            "instruction": {"text": ep.instruction.text,
                            "ids": list(ep.instruction.ids)},
            "actions": [int(a) for a in ep.actions],
            "action_names": [Action(a).name for a in ep.actions],
            "success": ep.success,
            "seed": ep.seed,
        })
        n_frames += len(ep.frames)
        n_flows += len(ep.flows)
    dump_json(out / "manifest.json", {
        "format_version": FORMAT_VERSION,
        "tool_version": __version__,
        "config": cfg.to_dict(),
        "seeds": [ep.seed for ep in episodes],
        "counts": {"episodes": len(episodes),
                   "frames": n_frames, "flows": n_flows},
    })


def load_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise DataError(f"no manifest.json in {data_dir}")
    manifest = load_json(path)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported dataset format in {data_dir}")
    return manifest


def load_dataset(data_dir) -> tuple[WorldConfig, list[Episode]]:
    root = Path(data_dir)
    manifest = load_manifest(root)
    cfg = WorldConfig.from_dict(manifest["config"])
    episodes = []
    for seed in manifest["seeds"]:
        ep_dir = root / f"ep_{seed}"
        meta = load_json(ep_dir / "meta.json")
        actions = [Action(a) for a in meta["actions"]]
        frames = [read_ppm(ep_dir / f"frame_{t}.ppm")
                  for t in range(len(actions) + 1)]
        flows = [read_flow(ep_dir / f"flow_{t}.f32", cfg.grid_h, cfg.grid_w)
                 for t in range(len(actions))]
        episodes.append(Episode(
            instruction=Instruction(ids=tuple(meta["instruction"]["ids"]),
                                    text=meta["instruction"]["text"]),
            frames=frames, flows=flows, actions=actions,
            success=meta["success"], seed=meta["seed"]))
    return cfg, episodes


def manifest_digest(data_dir) -> str:
    return file_digest(Path(data_dir) / "manifest.json")
