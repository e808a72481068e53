"""
File-based storage for backbone weights and group interventions

Each file is a plain-text `key: value` header followed by the raw tensors as
little-endian float64, in the order the header lists them:

    craft-state: 1
    kind: backbone
    hidden_dim: 32
    tensor.tok_emb: 64x32
    ...
    end-header
    <binary payload>
"""

import logging
import os
from typing import Dict, Optional, Tuple

import numpy as np

from .backbone import FrozenBackbone
from .config import BackboneConfig
from .loreft import Intervention, StreamSpec
from src.autograd import Tensor

logger = logging.getLogger(__name__)

MAGIC = "craft-state: 1"
END_MARKER = "end-header"


def write_state(path: str, header: Dict[str, str], arrays: Dict[str, np.ndarray]):
    """Write a header block and the arrays' float64 payload"""
    lines = [MAGIC]
    for key, value in header.items():
        if ":" in key or "\n" in str(value):
            raise ValueError(f"Header entry {key!r} cannot be encoded")
        lines.append(f"{key}: {value}")
    for name, array in arrays.items():
        dims = "x".join(str(n) for n in array.shape) if array.ndim else "scalar"
        lines.append(f"tensor.{name}: {dims}")
    lines.append(END_MARKER)

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        for array in arrays.values():
            f.write(np.ascontiguousarray(array, dtype="<f8").tobytes())
    logger.debug(f"Wrote {len(arrays)} tensors to {path}")


def read_state(path: str) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    """Inverse of write_state"""
    if not os.path.exists(path):
        raise FileNotFoundError(f"State file not found: {path}")
    with open(path, "rb") as f:
        raw = f.read()

    marker = ("\n" + END_MARKER + "\n").encode("utf-8")
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode("utf-8")) or cut < 0:
        raise ValueError(f"{path} is not a state file")
    header_lines = raw[:cut].decode("utf-8").split("\n")[1:]
    payload = raw[cut + len(marker):]

    header: Dict[str, str] = {}
    layout = []
    for line in header_lines:
        key, value = line.split(": ", 1)
        if key.startswith("tensor."):
            shape = () if value == "scalar" else tuple(int(n) for n in value.split("x"))
            layout.append((key[len("tensor."):], shape))
        else:
            header[key] = value

    arrays: Dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in layout:
        count = int(np.prod(shape)) if shape else 1
        chunk = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        arrays[name] = chunk.astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(payload):
        raise ValueError(f"{path}: payload size does not match the header layout")
    return header, arrays


class StateStore:
    """Directory of state files for one run (backbone plus one file per group)"""

    def __init__(self, storage_dir: str):
        self.storage_dir = storage_dir
        self._ensure_dir_exists()

    def _ensure_dir_exists(self):
        if not os.path.exists(self.storage_dir):
            os.makedirs(self.storage_dir, exist_ok=True)
            logger.info(f"Created state directory: {self.storage_dir}")

    def _path(self, name: str) -> str:
        return os.path.join(self.storage_dir, f"{name}.bin")

    def save_backbone(self, backbone: FrozenBackbone) -> str:
        header = {"kind": "backbone"}
        header.update({k: str(v) for k, v in backbone.config.model_dump().items()})
        arrays = {name: t.data for name, t in backbone.weights.items()}
        path = self._path("backbone")
        write_state(path, header, arrays)
        return path

    def load_backbone(self) -> FrozenBackbone:
        header, arrays = read_state(self._path("backbone"))
        if header.get("kind") != "backbone":
            raise ValueError("state file does not hold a backbone")
        fields = {k: v for k, v in header.items() if k != "kind"}
        config = BackboneConfig.model_validate(
            {k: float(v) if k == "ln_eps" else int(v) for k, v in fields.items()}
        )
        weights = {name: Tensor(array, name=name) for name, array in arrays.items()}
        return FrozenBackbone(config, weights)

    def save_intervention(self, name: str, intervention: Intervention,
                          extra: Optional[Dict[str, str]] = None) -> str:
        header = {
            "kind": "intervention",
            "rank": str(intervention.rank),
            "hidden_dim": str(intervention.hidden_dim),
            "t_pos": str(intervention.stream_spec.t_pos),
            "layers": ",".join(str(l) for l in intervention.layers),
        }
        header.update(extra or {})
        path = self._path(name)
        write_state(path, header, intervention.to_arrays())
        return path

    def load_intervention(self, name: str) -> Tuple[Intervention, Dict[str, str]]:
        header, arrays = read_state(self._path(name))
        if header.get("kind") != "intervention":
            raise ValueError(f"state file {name} does not hold an intervention")
        iv = Intervention.from_arrays(
            arrays,
            rank=int(header["rank"]),
            hidden_dim=int(header["hidden_dim"]),
            stream_spec=StreamSpec(int(header["t_pos"])),
        )
        return iv, header

    def list_states(self):
        return sorted(f[:-4] for f in os.listdir(self.storage_dir) if f.endswith(".bin"))
