"""Binary PLY (splat-viewer layout), PFM depth maps and PPM images."""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch

from .gaussians import GaussianSet

SH_C0 = 0.28209479177387814

_PLY_FLOATS = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
               "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
_PLY_DTYPE = np.dtype([(n, "<f4") for n in _PLY_FLOATS] + [("source", "u1")])


def _ply_header(n: int) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    lines += [f"property float {p}" for p in _PLY_FLOATS]
    lines += ["property uchar source", "end_header"]
    return ("\n".join(lines) + "\n").encode("ascii")


def export_ply(gs: GaussianSet, path) -> None:
    """Write ``gs`` with logit opacity, log scales and degree-0 SH color."""
    g = gs.detach()
    n = len(g)
    rec = np.zeros(n, dtype=_PLY_DTYPE)
    if n:
        means = g.means.double().numpy()
        op = g.opacities.double().numpy()
        cols = g.colors.double().numpy()
        rec["x"], rec["y"], rec["z"] = means.T
        dc = (cols - 0.5) / SH_C0
        for k in range(3):
            rec[f"f_dc_{k}"] = dc[:, k]
            rec[f"scale_{k}"] = np.log(g.scales[:, k].double().numpy())
        rec["opacity"] = np.log(op) - np.log1p(-op)
        q = g.quats.double().numpy()
        for k in range(4):
            rec[f"rot_{k}"] = q[:, k]
        rec["source"] = g.source.numpy().astype(np.uint8)
    Path(path).write_bytes(_ply_header(n) + rec.tobytes())


def read_ply_records(path) -> np.ndarray:
    data = Path(path).read_bytes()
    end = data.index(b"end_header\n") + len(b"end_header\n")
    header = data[:end].decode("ascii").splitlines()
    if header[0] != "ply" or "binary_little_endian" not in header[1]:
        raise ValueError(f"{path}: not a little-endian binary PLY")
    n = next(int(l.split()[-1]) for l in header if l.startswith("element vertex"))
    props = [l.split()[-1] for l in header if l.startswith("property")]
    if props != list(_PLY_DTYPE.names):
        raise ValueError(f"{path}: unexpected property layout {props}")
    return np.frombuffer(data, dtype=_PLY_DTYPE, count=n, offset=end)


def import_ply(path, dtype=torch.float64) -> GaussianSet:
    rec = read_ply_records(path)
    f = lambda *names: torch.as_tensor(np.stack([rec[k].astype(np.float64) for k in names], -1), dtype=dtype)
    logit = torch.as_tensor(rec["opacity"].astype(np.float64), dtype=dtype)
    return GaussianSet(
        means=f("x", "y", "z"),
        opacities=torch.sigmoid(logit),
        scales=torch.exp(f("scale_0", "scale_1", "scale_2")),
        quats=f("rot_0", "rot_1", "rot_2", "rot_3"),
        colors=0.5 + SH_C0 * f("f_dc_0", "f_dc_1", "f_dc_2"),
        source=torch.as_tensor(rec["source"].astype(np.int64)),
    )


def write_pfm(path, depth: np.ndarray) -> None:
    """Single-channel little-endian PFM, rows stored bottom to top."""
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(d[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"Pf":
            raise ValueError(f"{path}: not a greyscale PFM")
        w, h = (int(x) for x in fh.readline().split())
        scale = float(fh.readline())
        dt = "<f4" if scale < 0 else ">f4"
        d = np.frombuffer(fh.read(4 * w * h), dtype=dt).reshape(h, w)
    return d[::-1].astype(np.float32)


def to_uint8(img) -> np.ndarray:
    a = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img) -> None:
    """8-bit binary PPM (P6) from an (H, W, 3) image in [0, 1] or uint8."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = to_uint8(img)
    h, w, _ = a.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a).tobytes())


def read_ppm(path) -> np.ndarray:
    """Returns uint8 (H, W, 3)."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: only 8-bit P6 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pos += 1
    return np.frombuffer(data[pos:pos + 3 * w * h], dtype=np.uint8).reshape(h, w, 3).copy()


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
