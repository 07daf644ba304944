"""File formats: MRC maps and stacks, particle metadata CSV, PDB coordinates,
training configuration, checkpoints and small report files."""

from __future__ import annotations

import configparser
import csv
import json
import struct
from dataclasses import dataclass, fields

import numpy as np

from .core import GaussianModel, Pose
from .optics import CtfParams

__all__ = [
    "FormatError",
    "MetaRow",
    "read_mrc",
    "write_mrc",
    "read_meta",
    "write_meta",
    "rows_to_particles",
    "particles_to_rows",
    "read_pdb_coords",
    "write_pdb_coords",
    "read_config",
    "write_config",
    "save_checkpoint",
    "load_checkpoint",
    "save_model",
    "load_model",
    "write_loss_history",
    "write_csv",
    "write_json",
    "write_scatter_svg",
]


class FormatError(ValueError):
    """A file does not follow the expected layout."""


# ---------------------------------------------------------------- MRC

_MRC_HEADER = np.dtype([
    ("nx", "<i4"), ("ny", "<i4"), ("nz", "<i4"), ("mode", "<i4"),
    ("nxstart", "<i4"), ("nystart", "<i4"), ("nzstart", "<i4"),
    ("mx", "<i4"), ("my", "<i4"), ("mz", "<i4"),
    ("cella", "<f4", 3), ("cellb", "<f4", 3),
    ("mapc", "<i4"), ("mapr", "<i4"), ("maps", "<i4"),
    ("dmin", "<f4"), ("dmax", "<f4"), ("dmean", "<f4"),
    ("ispg", "<i4"), ("nsymbt", "<i4"), ("extra", "V100"),
    ("origin", "<f4", 3), ("map", "S4"), ("machst", "V4"),
    ("rms", "<f4"), ("nlabl", "<i4"), ("label", "S80", 10),
])
assert _MRC_HEADER.itemsize == 1024


def write_mrc(path, data, pixel_size: float = 1.0, is_stack: bool = False):
    """Write a 2D image, 3D volume or image stack as little-endian mode-2 MRC."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"MRC data must be 2D or 3D, got shape {arr.shape}")
    nz, ny, nx = arr.shape
    h = np.zeros((), dtype=_MRC_HEADER)
    h["nx"], h["ny"], h["nz"], h["mode"] = nx, ny, nz, 2
    h["mx"], h["my"], h["mz"] = nx, ny, (1 if is_stack else nz)
    h["cella"] = (nx * pixel_size, ny * pixel_size, (1 if is_stack else nz) * pixel_size)
    h["cellb"] = (90.0, 90.0, 90.0)
    h["mapc"], h["mapr"], h["maps"] = 1, 2, 3
    if arr.size:
        h["dmin"], h["dmax"], h["dmean"] = arr.min(), arr.max(), arr.mean(dtype=np.float64)
        h["rms"] = arr.std(dtype=np.float64)
    h["ispg"] = 0 if is_stack else 1
    h["map"] = b"MAP "
    h["machst"] = np.void(b"\x44\x44\x00\x00")
    with open(path, "wb") as fh:
        fh.write(h.tobytes())
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_mrc(path):
    """Read a mode-2 MRC file.

    Returns
    -------
    data : ndarray, float64, shape (nz, ny, nx)
        Exact widening of the stored 32-bit values.
    pixel_size : float
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 1024:
        raise FormatError(f"{path}: file shorter than the 1024-byte header")
    h = np.frombuffer(raw[:1024], dtype=_MRC_HEADER)[0]
    if bytes(h["map"]) != b"MAP ":
        raise FormatError(f"{path}: bad map stamp {bytes(h['map'])!r} in field 'map'")
    if int(h["mode"]) != 2:
        raise FormatError(f"{path}: unsupported mode {int(h['mode'])} in field 'mode' "
                          "(only 2 = float32 is supported)")
    nx, ny, nz = int(h["nx"]), int(h["ny"]), int(h["nz"])
    if min(nx, ny, nz) < 1:
        raise FormatError(f"{path}: non-positive dimensions in fields 'nx, ny, nz'")
    start = 1024 + int(h["nsymbt"])
    payload = len(raw) - start
    if payload != 4 * nx * ny * nz:
        raise FormatError(f"{path}: payload of {payload} bytes does not match "
                          f"header nx*ny*nz = {nx}*{ny}*{nz} (truncated or padded)")
    data = np.frombuffer(raw, dtype="<f4", offset=start).reshape(nz, ny, nx).astype(np.float64)
    mx = int(h["mx"]) or nx
    pixel_size = float(h["cella"][0]) / mx if h["cella"][0] > 0 else 1.0
    return data, pixel_size


# ---------------------------------------------------------------- metadata CSV

_META_REQUIRED = ["particle_index", "qw", "qx", "qy", "qz", "shift_x_px", "shift_y_px",
                  "defocus_u_A", "defocus_v_A", "astig_angle_deg", "voltage_kv", "cs_mm",
                  "amplitude_contrast"]
_META_OPTIONAL = ["ctf_enabled", "gt_label", "gt_angle_rad"]


@dataclass
class MetaRow:
    particle_index: int
    quaternion: tuple  # (w, x, y, z)
    shift_x_px: float
    shift_y_px: float
    defocus_u_A: float
    defocus_v_A: float
    astig_angle_deg: float
    voltage_kv: float
    cs_mm: float
    amplitude_contrast: float
    ctf_enabled: bool = True
    gt_label: int | None = None
    gt_angle_rad: float | None = None

    def __post_init__(self):
        q = np.asarray(self.quaternion, dtype=float)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise FormatError(
                f"particle {self.particle_index}: quaternion norm {np.linalg.norm(q):.6g} "
                "is not 1 within 1e-6")
        self.quaternion = tuple(float(v) for v in q)

    def pose(self) -> Pose:
        from .datagen import quaternion_to_matrix
        return Pose(quaternion_to_matrix(self.quaternion), (self.shift_x_px, self.shift_y_px))

    def ctf(self) -> CtfParams:
        return CtfParams(enabled=self.ctf_enabled, voltage_kv=self.voltage_kv,
                         cs_mm=self.cs_mm, amplitude_contrast=self.amplitude_contrast,
                         defocus_u_A=self.defocus_u_A, defocus_v_A=self.defocus_v_A,
                         astigmatism_angle_deg=self.astig_angle_deg)


def _num(v) -> str:
    return repr(float(v))  # shortest exact round-trip form


def write_meta(path, rows):
    has_label = any(r.gt_label is not None for r in rows)
    has_angle = any(r.gt_angle_rad is not None for r in rows)
    header = _META_REQUIRED + ["ctf_enabled"]
    header += (["gt_label"] if has_label else []) + (["gt_angle_rad"] if has_angle else [])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            rec = [int(r.particle_index), *map(_num, r.quaternion), _num(r.shift_x_px),
                   _num(r.shift_y_px), _num(r.defocus_u_A), _num(r.defocus_v_A),
                   _num(r.astig_angle_deg), _num(r.voltage_kv), _num(r.cs_mm),
                   _num(r.amplitude_contrast), int(r.ctf_enabled)]
            if has_label:
                rec.append("" if r.gt_label is None else int(r.gt_label))
            if has_angle:
                rec.append("" if r.gt_angle_rad is None else _num(r.gt_angle_rad))
            w.writerow(rec)


def read_meta(path) -> list[MetaRow]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        missing = [c for c in _META_REQUIRED if c not in cols]
        if missing:
            raise FormatError(f"{path}: missing required column(s) {', '.join(missing)}")
        rows = []
        for line, rec in enumerate(reader, start=2):
            try:
                f = {k: float(rec[k]) for k in _META_REQUIRED[1:]}
                rows.append(MetaRow(
                    particle_index=int(rec["particle_index"]),
                    quaternion=(f["qw"], f["qx"], f["qy"], f["qz"]),
                    shift_x_px=f["shift_x_px"], shift_y_px=f["shift_y_px"],
                    defocus_u_A=f["defocus_u_A"], defocus_v_A=f["defocus_v_A"],
                    astig_angle_deg=f["astig_angle_deg"], voltage_kv=f["voltage_kv"],
                    cs_mm=f["cs_mm"], amplitude_contrast=f["amplitude_contrast"],
                    ctf_enabled=bool(int(rec.get("ctf_enabled") or 1)),
                    gt_label=int(rec["gt_label"]) if rec.get("gt_label") else None,
                    gt_angle_rad=float(rec["gt_angle_rad"]) if rec.get("gt_angle_rad") else None,
                ))
            except (TypeError, ValueError) as exc:
                if isinstance(exc, FormatError):
                    raise FormatError(f"{path}, line {line}: {exc}") from None
                raise FormatError(f"{path}, line {line}: {exc}") from exc
    return rows


def particles_to_rows(poses, ctfs, labels=None, angles=None) -> list[MetaRow]:
    from .datagen import matrix_to_quaternion
    rows = []
    for k, (p, c) in enumerate(zip(poses, ctfs)):
        rows.append(MetaRow(
            k, tuple(matrix_to_quaternion(p.rotation)), float(p.shift[0]), float(p.shift[1]),
            c.defocus_u_A, c.defocus_v_A, c.astigmatism_angle_deg, c.voltage_kv, c.cs_mm,
            c.amplitude_contrast, c.enabled,
            None if labels is None else int(labels[k]),
            None if angles is None else float(angles[k])))
    return rows


def rows_to_particles(rows):
    return [r.pose() for r in rows], [r.ctf() for r in rows]


# ---------------------------------------------------------------- PDB

def _is_atom(line: str) -> bool:
    return line.startswith("ATOM  ") or line.startswith("HETATM")


def read_pdb_coords(path):
    """Coordinates (Angstrom) of ATOM/HETATM records, in file order."""
    from .analysis import AtomModel
    coords = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not _is_atom(line):
                continue
            try:
                coords.append((float(line[30:38]), float(line[38:46]), float(line[46:54])))
            except ValueError:
                raise FormatError(
                    f"{path}, line {lineno}: malformed coordinate field "
                    f"{line[30:54].strip()!r}") from None
    return AtomModel(np.array(coords, dtype=float).reshape(-1, 3))


def write_pdb_coords(path, atoms, template_path):
    """Copy ``template_path`` replacing the coordinates of its atom records."""
    with open(template_path) as fh:
        lines = fh.readlines()
    n_template = sum(_is_atom(l) for l in lines)
    coords = np.asarray(atoms.coords, dtype=float)
    if n_template != len(coords):
        raise ValueError(f"template has {n_template} atoms but model has {len(coords)}")
    k = 0
    out = []
    for line in lines:
        if _is_atom(line):
            body = line.rstrip("\n").ljust(54)
            x, y, z = coords[k]
            line = f"{body[:30]}{x:8.3f}{y:8.3f}{z:8.3f}{body[54:]}\n"
            k += 1
        out.append(line)
    with open(path, "w") as fh:
        fh.writelines(out)


# ---------------------------------------------------------------- config

def _parse_value(text: str, kind):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is tuple:
        return tuple(int(v) for v in text.replace("(", "").replace(")", "").split(",") if v.strip())
    if kind is int:
        return int(text)
    return float(text)


def _config_types():
    from .net import NetworkConfig
    from .objective import LossWeights
    from .trainer import TrainConfig
    types = {}
    for cls in (TrainConfig, LossWeights, NetworkConfig):
        for f in fields(cls):
            if f.name in ("weights", "network"):
                continue
            default = f.default
            types[f.name] = type(default) if default is not None else float
    return types


def read_config(path, extra_keys=()):
    """Parse a ``key = value`` training configuration.

    Keys listed in ``extra_keys`` (e.g. input paths) are returned verbatim as
    strings next to the TrainConfig built from the rest.

    Returns
    -------
    config : TrainConfig
    extras : dict
    """
    from .trainer import TrainConfig
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    with open(path) as fh:
        parser.read_string("[train]\n" + fh.read())
    types = _config_types()
    values, extras = {}, {}
    for key, text in parser["train"].items():
        if key in extra_keys:
            extras[key] = text.strip()
            continue
        if key not in types:
            raise KeyError(f"{path}: unknown configuration key {key!r}")
        try:
            values[key] = _parse_value(text, types[key])
        except ValueError as exc:
            raise ValueError(f"{path}: bad value for {key!r}: {exc}") from None
    return TrainConfig.from_flat_dict(values), extras


def write_config(path, config, extras=None):
    with open(path, "w") as fh:
        for k, v in (extras or {}).items():
            fh.write(f"{k} = {v}\n")
        for k, v in config.to_flat_dict().items():
            if isinstance(v, (list, tuple)):
                v = ", ".join(str(x) for x in v)
            fh.write(f"{k} = {v}\n")


# ---------------------------------------------------------------- checkpoints

_CKPT_MAGIC = b"SPLATCKP"
_CKPT_VERSION = 1


def _pack(path, header: dict, arrays: dict):
    index, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        index.append({"name": name, "shape": list(a.shape), "offset": offset,
                      "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = dict(header, arrays=index, version=_CKPT_VERSION)
    text = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<IQ", _CKPT_VERSION, len(text)))
        fh.write(text)
        for b in blobs:
            fh.write(b)


def _unpack(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != _CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen])
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        arrays[e["name"]] = np.frombuffer(raw[start:start + e["nbytes"]], dtype="<f8") \
            .reshape(e["shape"]).copy()
    return header, arrays


def _model_arrays(model: GaussianModel):
    return {"model.densities": model.densities, "model.scales": model.scales,
            "model.positions": model.positions}


def _model_from(header, arrays):
    return GaussianModel(arrays["model.densities"], arrays["model.scales"],
                         arrays["model.positions"], header["box_size"], header["pixel_size"])


def save_model(path, model: GaussianModel):
    _pack(path, {"kind": "model", "box_size": model.box_size,
                 "pixel_size": model.pixel_size}, _model_arrays(model))


def load_model(path) -> GaussianModel:
    header, arrays = _unpack(path)
    return _model_from(header, arrays)


def save_checkpoint(path, state, config, model: GaussianModel):
    """Write network parameters, Adam moments, RNG state, config and model."""
    arrays = {}
    for name, p in state.net.parameters().items():
        arrays[f"param.{name}"] = p
        arrays[f"m1.{name}"] = state.moment1[name]
        arrays[f"m2.{name}"] = state.moment2[name]
    arrays.update(_model_arrays(model))
    header = {
        "kind": "checkpoint",
        "config": config.to_flat_dict(),
        "network_box_size": state.net.box_size,
        "box_size": model.box_size,
        "pixel_size": model.pixel_size,
        "epoch": state.epoch,
        "step_counts": state.step_counts,
        "history": state.history,
        "rng_state": state.rng.bit_generator.state,
    }
    _pack(path, header, arrays)


def load_checkpoint(path):
    """Restore ``(TrainState, TrainConfig, GaussianModel)`` from a checkpoint."""
    from .net import NetworkState
    from .trainer import TrainConfig, TrainState

    header, arrays = _unpack(path)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"{path}: file holds a {header.get('kind')!r}, not a checkpoint")
    config = TrainConfig.from_flat_dict(header["config"])
    net = NetworkState.create(config.network, header["network_box_size"], 0)
    params = net.parameters()
    for name, p in params.items():
        p[...] = arrays[f"param.{name}"]
    rng = np.random.Generator(getattr(np.random, header["rng_state"]["bit_generator"])())
    rng.bit_generator.state = header["rng_state"]
    state = TrainState(
        net=net,
        moment1={n: arrays[f"m1.{n}"] for n in params},
        moment2={n: arrays[f"m2.{n}"] for n in params},
        step_counts={n: int(v) for n, v in header["step_counts"].items()},
        rng=rng,
        epoch=int(header["epoch"]),
        history=header["history"],
    )
    return state, config, _model_from(header, arrays)


# ---------------------------------------------------------------- reports

def write_loss_history(path, history):
    if not history:
        return
    write_csv(path, list(history[0]), [[row[k] for k in history[0]] for row in history])


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in r])


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_scatter_svg(path, points, labels=None, title=""):
    """2D scatter plot of ``points[:, :2]`` as SVG."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    pts = np.asarray(points, dtype=float)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.scatter(pts[:, 0], pts[:, 1], s=4, c=labels, cmap="viridis" if labels is not None else None)
    ax.set_xlabel("PC1")
    ax.set_ylabel("PC2")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    with matplotlib.rc_context({"svg.hashsalt": "splatem"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
