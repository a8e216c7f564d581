"""3D scalar volumes on regular grids with physical (mm) coordinates.

Provides trilinear sampling at arbitrary world points, the gray-value
transforms used to precondition cardiac CT data, and readers/writers for
MetaImage (.mhd + .raw) and a JSON-header twin format.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

INTENSITY_UNITS = ("raw", "gray-value", "probability")

GRAY_VALUE_OFFSET = 1024  # HU = gray value - offset

_MHD_TO_DTYPE = {
    "MET_UCHAR": np.dtype(np.uint8),
    "MET_USHORT": np.dtype(np.uint16),
    "MET_FLOAT": np.dtype(np.float32),
}
_DTYPE_TO_MHD = {v: k for k, v in _MHD_TO_DTYPE.items()}

_JSON_DTYPES = {"uint8": np.uint8, "uint16": np.uint16, "float32": np.float32}


class Volume:
    """Scalar image volume on a regular axis-aligned grid.

    Parameters
    ----------
    data : ndarray, shape (nx, ny, nz)
        Voxel values indexed [ix, iy, iz].  Stored read-only.
    spacing : (3,) float
        Voxel edge lengths in mm, all > 0.
    origin : (3,) float
        World position of voxel (0, 0, 0) in mm.
    intensity_unit : str
        One of "raw", "gray-value", "probability".
    outside_value : float, optional
        Value reported for sample points outside the voxel-center hull.
        Defaults to the volume minimum.
    """

    def __init__(self, data, spacing, origin=(0.0, 0.0, 0.0),
                 intensity_unit="raw", outside_value=None):
        data = np.asarray(data)
        if data.ndim != 3:
            raise ValueError("data must be a 3D array")
        if any(n < 2 for n in data.shape):
            raise ValueError("every dimension must have at least 2 voxels")
        spacing = np.asarray(spacing, dtype=float)
        origin = np.asarray(origin, dtype=float)
        if spacing.shape != (3,) or origin.shape != (3,):
            raise ValueError("spacing and origin must be length-3 vectors")
        if np.any(spacing <= 0):
            raise ValueError("spacing components must be positive")
        if intensity_unit not in INTENSITY_UNITS:
            raise ValueError(f"unknown intensity unit {intensity_unit!r}")
        if intensity_unit == "probability":
            lo, hi = float(data.min()), float(data.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError("probability volumes must lie in [0, 1]")
        self.data = data
        self.data.setflags(write=False)
        self.dims = tuple(int(n) for n in data.shape)
        self.spacing = spacing
        self.origin = origin
        self.intensity_unit = intensity_unit
        # float64 inputs keep full precision; everything else samples in
        # float32, which halves the memory traffic of the gathers
        work = np.float64 if data.dtype == np.float64 else np.float32
        self._flat = np.ascontiguousarray(data, dtype=work).ravel()
        ny, nz = self.dims[1], self.dims[2]
        self._strides = (ny * nz, nz, 1)
        self._upper = np.asarray(self.dims, dtype=float) - 1.0
        self._inv_spacing = 1.0 / np.asarray(self.spacing, dtype=float)
        self.outside_value = (float(data.min()) if outside_value is None
                              else float(outside_value))

    # -- coordinate transforms ------------------------------------------

    def world_to_voxel(self, points):
        """Map world-mm points to continuous voxel coordinates."""
        return (np.asarray(points, dtype=float) - self.origin) / self.spacing

    def voxel_to_world(self, index):
        """Map (continuous) voxel coordinates to world mm."""
        return np.asarray(index, dtype=float) * self.spacing + self.origin

    def bounds(self):
        """(lo, hi) world-mm corners of the voxel-center hull."""
        return self.origin.copy(), self.voxel_to_world(self._upper)

    def contains(self, points):
        """True where points lie inside the voxel-center hull."""
        u = self.world_to_voxel(points)
        return np.all((u >= 0.0) & (u <= self._upper), axis=-1)

    # -- sampling -------------------------------------------------------

    def sample(self, points):
        """Trilinearly interpolate the volume at world-mm points.

        Parameters
        ----------
        points : (n, 3) or (3,) array
            Sample locations in mm.

        Returns
        -------
        ndarray or float
            Interpolated values; ``outside_value`` where a point falls
            outside the voxel-center hull.
        """
        pts = np.asarray(points, dtype=float)
        scalar = pts.ndim == 1
        pts = np.atleast_2d(pts)
        sx, sy, _ = self._strides
        flat = self._flat
        base = None
        inside = None
        fracs = []
        # per-axis passes keep every ufunc on contiguous 1-d arrays
        for a in range(3):
            u = pts[:, a] - self.origin[a]
            u *= self._inv_spacing[a]
            ok = (u >= 0.0) & (u <= self._upper[a])
            inside = ok if inside is None else (inside & ok)
            np.clip(u, 0.0, self._upper[a], out=u)
            i = u.astype(np.int64)
            np.minimum(i, self.dims[a] - 2, out=i)
            u -= i
            fracs.append(u)
            stride = (sx, sy, 1)[a]
            if stride != 1:
                i *= stride
            base = i if base is None else (base + i)
        fx, fy, fz = fracs
        c000 = flat[base]
        c100 = flat[base + sx]
        c010 = flat[base + sy]
        c110 = flat[base + sx + sy]
        base += 1
        c001 = flat[base]
        c101 = flat[base + sx]
        c011 = flat[base + sy]
        c111 = flat[base + sx + sy]
        c100 -= c000
        c100 *= fx
        c000 += c100
        c110 -= c010
        c110 *= fx
        c010 += c110
        c101 -= c001
        c101 *= fx
        c001 += c101
        c111 -= c011
        c111 *= fx
        c011 += c111
        c010 -= c000
        c010 *= fy
        c000 += c010
        c011 -= c001
        c011 *= fy
        c001 += c011
        c001 -= c000
        c001 *= fz
        c000 += c001
        out = c000
        if not inside.all():
            out[~inside] = self.outside_value
        return float(out[0]) if scalar else out


class FunctionField:
    """Continuous scalar field defined by a callable, for tests and demos.

    Exposes the same ``sample``/``contains`` surface as :class:`Volume`
    so fitting code can run against an analytic image model.
    """

    def __init__(self, fn, outside_value=0.0):
        self._fn = fn
        self.outside_value = float(outside_value)

    def sample(self, points):
        pts = np.asarray(points, dtype=float)
        scalar = pts.ndim == 1
        pts = np.atleast_2d(pts)
        out = np.asarray(self._fn(pts), dtype=float)
        return float(out[0]) if scalar else out

    def contains(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            return True
        return np.ones(len(pts), dtype=bool)


# -- intensity transforms -----------------------------------------------


def gv_to_hu(gv):
    """Scanner gray values to Hounsfield units."""
    return np.asarray(gv, dtype=float) - GRAY_VALUE_OFFSET


def hu_to_gv(hu):
    """Hounsfield units to scanner gray values."""
    return np.asarray(hu, dtype=float) + GRAY_VALUE_OFFSET


def clamp_coronary(vol, t_myo=950.0, t_calc=1700.0):
    """Suppress myocardium-dark and calcification-bright gray values.

    Values below ``t_myo`` and above ``t_calc`` are both replaced by
    ``t_myo``; the contrast-filled lumen range in between is untouched.

    Parameters
    ----------
    vol : Volume
        Must carry gray-value intensities.
    t_myo, t_calc : float
        Lower/upper clamp thresholds with ``t_myo < t_calc``.
    """
    if vol.intensity_unit != "gray-value":
        raise ValueError("clamp_coronary expects a gray-value volume")
    if not t_myo < t_calc:
        raise ValueError("t_myo must be strictly below t_calc")
    d = np.asarray(vol.data, dtype=float)
    out = np.where((d < t_myo) | (d > t_calc), float(t_myo), d)
    return Volume(out.astype(vol.data.dtype), vol.spacing, vol.origin,
                  intensity_unit="gray-value")


# -- MetaImage I/O ------------------------------------------------------


def write_metaimage(vol, path, dtype=None):
    """Write a volume as a .mhd header plus sibling .raw payload.

    The payload is little-endian with x varying fastest.  Returns the
    header path.
    """
    path = Path(path)
    if path.suffix != ".mhd":
        raise ValueError("MetaImage header path must end in .mhd")
    dtype = np.dtype(dtype) if dtype is not None else vol.data.dtype
    if np.dtype(dtype) not in _DTYPE_TO_MHD:
        raise ValueError(f"unsupported element type {dtype}")
    raw_name = path.with_suffix(".raw").name
    nx, ny, nz = vol.dims
    lines = [
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        f"DimSize = {nx} {ny} {nz}",
        "ElementSpacing = {:g} {:g} {:g}".format(*vol.spacing),
        "Offset = {:g} {:g} {:g}".format(*vol.origin),
        f"ElementType = {_DTYPE_TO_MHD[np.dtype(dtype)]}",
        f"ElementDataFile = {raw_name}",
    ]
    path.write_text("\n".join(lines) + "\n")
    payload = np.asarray(vol.data, dtype=dtype)
    le = payload.dtype.newbyteorder("<")
    # x-fastest on disk: reverse axes then C-ravel
    payload.transpose(2, 1, 0).astype(le).tofile(path.with_suffix(".raw"))
    return path


def read_metaimage(path, intensity_unit="raw"):
    """Read a .mhd/.raw MetaImage pair into a Volume."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"volume not found: {path}")
    header = {}
    for line in path.read_text().splitlines():
        if "=" not in line:
            continue
        key, val = line.split("=", 1)
        header[key.strip()] = val.strip()
    ndims = int(header.get("NDims", "0"))
    if ndims != 3:
        raise ValueError(f"expected NDims = 3, got {ndims}")
    if header.get("BinaryDataByteOrderMSB", "False") == "True":
        raise ValueError("big-endian MetaImage payloads are not supported")
    etype = header.get("ElementType", "")
    if etype not in _MHD_TO_DTYPE:
        raise ValueError(f"unsupported ElementType {etype!r}")
    dims = tuple(int(s) for s in header["DimSize"].split())
    spacing = tuple(float(s) for s in header.get("ElementSpacing", "1 1 1").split())
    origin = tuple(float(s) for s in header.get("Offset", "0 0 0").split())
    data_file = header.get("ElementDataFile", "")
    if not data_file or data_file.upper() == "LOCAL":
        raise ValueError("ElementDataFile must name a separate payload file")
    raw_path = path.parent / data_file
    if not raw_path.is_file():
        raise FileNotFoundError(f"payload not found: {raw_path}")
    dtype = _MHD_TO_DTYPE[etype].newbyteorder("<")
    flat = np.fromfile(raw_path, dtype=dtype)
    n = dims[0] * dims[1] * dims[2]
    if flat.size != n:
        raise ValueError(f"payload holds {flat.size} elements, expected {n}")
    data = flat.reshape(dims[::-1]).transpose(2, 1, 0)
    return Volume(np.ascontiguousarray(data), spacing, origin,
                  intensity_unit=intensity_unit)


# -- JSON twin format ---------------------------------------------------


def write_json_volume(vol, path, dtype=None):
    """Write a volume as a JSON header plus sibling .raw payload."""
    path = Path(path)
    if path.suffix != ".json":
        raise ValueError("JSON header path must end in .json")
    dtype = np.dtype(dtype) if dtype is not None else vol.data.dtype
    name = {np.dtype(np.uint8): "uint8", np.dtype(np.uint16): "uint16",
            np.dtype(np.float32): "float32"}.get(np.dtype(dtype))
    if name is None:
        raise ValueError(f"unsupported dtype {dtype}")
    raw_name = path.with_suffix(".raw").name
    header = {
        "dims": list(vol.dims),
        "spacing": [float(s) for s in vol.spacing],
        "origin": [float(o) for o in vol.origin],
        "dtype": name,
        "data_file": raw_name,
    }
    path.write_text(json.dumps(header, indent=2) + "\n")
    payload = np.asarray(vol.data, dtype=dtype)
    payload.transpose(2, 1, 0).astype(payload.dtype.newbyteorder("<")).tofile(
        path.with_suffix(".raw"))
    return path


def read_json_volume(path, intensity_unit="raw"):
    """Read a JSON-header volume written by :func:`write_json_volume`."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"volume not found: {path}")
    header = json.loads(path.read_text())
    for key in ("dims", "spacing", "origin", "dtype", "data_file"):
        if key not in header:
            raise ValueError(f"JSON volume header missing {key!r}")
    if header["dtype"] not in _JSON_DTYPES:
        raise ValueError(f"unsupported dtype {header['dtype']!r}")
    raw_path = path.parent / header["data_file"]
    if not raw_path.is_file():
        raise FileNotFoundError(f"payload not found: {raw_path}")
    dtype = np.dtype(_JSON_DTYPES[header["dtype"]]).newbyteorder("<")
    dims = tuple(int(n) for n in header["dims"])
    flat = np.fromfile(raw_path, dtype=dtype)
    n = dims[0] * dims[1] * dims[2]
    if flat.size != n:
        raise ValueError(f"payload holds {flat.size} elements, expected {n}")
    data = flat.reshape(dims[::-1]).transpose(2, 1, 0)
    return Volume(np.ascontiguousarray(data), header["spacing"],
                  header["origin"], intensity_unit=intensity_unit)


def read_volume(path, intensity_unit="raw"):
    """Read either volume format, dispatching on the file extension."""
    path = Path(path)
    if path.suffix == ".mhd":
        return read_metaimage(path, intensity_unit)
    if path.suffix == ".json":
        return read_json_volume(path, intensity_unit)
    raise ValueError(f"unrecognized volume format: {path.name}")
