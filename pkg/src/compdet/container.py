"""Binary model container: dictionary, context, occluder, backbone, models.

Layout: magic "CACN", version u16, u32 array count, then named float64
arrays (u16 name length, utf-8 name, u8 ndim, ndim little-endian u32 dims,
payload). Shapes are self-described; scalars are 0-dim arrays.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .context import ContextDictionary
from .errors import FormatError
from .features import BackboneParams
from .model import CompositionalModel, OccluderModel
from .vmf import VmfDictionary

MODEL_MAGIC = b"CACN"
MODEL_VERSION = 1


@dataclass
class ModelContainer:
    dictionary: VmfDictionary
    context: ContextDictionary
    occluder: OccluderModel
    backbone: BackboneParams
    models: dict = field(default_factory=dict)  # (class_id, corner) -> CompositionalModel

    def class_ids(self) -> list[int]:
        return sorted({cid for cid, _ in self.models})

    def by_class(self) -> dict:
        """class_id -> {corner -> model} mapping for the detection layer."""
        out: dict[int, dict] = {}
        for (cid, corner), model in self.models.items():
            out.setdefault(cid, {})[corner] = model
        return out

    def trainable_groups(self) -> dict:
        """Parameter groups matching the per-group learning rates."""
        groups = {
            "backbone": self.backbone.parameters(),
            "dictionary": [self.dictionary.mu],
            "mixture": [], "corner": [],
        }
        for (cid, corner), model in sorted(self.models.items()):
            key = "mixture" if corner == "ct" else "corner"
            groups[key] += [model.A, model.chi]
        return groups


def _pack_array(name: str, arr: np.ndarray) -> bytes:
    # ascontiguousarray promotes 0-dim scalars to shape (1,); reshape back so
    # scalars really are stored as the documented 0-dim arrays.
    data = np.ascontiguousarray(arr, dtype="<f8").reshape(np.shape(arr))
    nb = name.encode("utf-8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", data.ndim)
    head += struct.pack(f"<{data.ndim}I", *data.shape)
    return head + data.tobytes()


def save_container(container: ModelContainer, path) -> None:
    arrays: list[tuple[str, np.ndarray]] = []

    def put(name, tensor):
        arrays.append((name, np.asarray(tensor.detach().numpy() if torch.is_tensor(tensor) else tensor)))

    put("dict/mu", container.dictionary.mu)
    put("dict/sigma", np.float64(container.dictionary.sigma))
    put("context/centers", container.context.centers)
    put("context/threshold", np.float64(container.context.threshold))
    put("occluder/beta", container.occluder.beta)
    for i, (w, b) in enumerate(zip(container.backbone.weights, container.backbone.biases)):
        put(f"backbone/w{i}", w)
        put(f"backbone/b{i}", b)
    for (cid, corner), model in sorted(container.models.items()):
        base = f"model/{cid}/{corner}"
        put(f"{base}/A", model.A)
        put(f"{base}/chi", model.chi)
        put(f"{base}/omega", np.float64(model.omega))
        put(f"{base}/rho", np.float64(model.rho))

    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + struct.pack("<HI", MODEL_VERSION, len(arrays)))
        for name, arr in arrays:
            fh.write(_pack_array(name, arr))


def _read_exact(fh, n: int, what: str) -> bytes:
    blob = fh.read(n)
    if len(blob) != n:
        raise FormatError(f"{what}: truncated payload")
    return blob


def load_container(path) -> ModelContainer:
    arrays: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MODEL_MAGIC:
            raise FormatError("magic: expected 'CACN'")
        version, count = struct.unpack("<HI", _read_exact(fh, 6, "header"))
        if version != MODEL_VERSION:
            raise FormatError(f"version: unsupported {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "array name"))
            name = _read_exact(fh, name_len, "array name").decode("utf-8")
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, name))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, name)) if ndim else ()
            size = int(np.prod(dims)) if dims else 1
            payload = _read_exact(fh, 8 * size, name)
            arrays[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()

    def need(name):
        if name not in arrays:
            raise FormatError(f"{name}: missing from container")
        return arrays[name]

    dictionary = VmfDictionary(
        mu=torch.from_numpy(need("dict/mu")), sigma=float(need("dict/sigma")))
    context = ContextDictionary(
        centers=torch.from_numpy(need("context/centers")),
        threshold=float(need("context/threshold")))
    occluder = OccluderModel(beta=torch.from_numpy(need("occluder/beta")))
    weights, biases = [], []
    i = 0
    while f"backbone/w{i}" in arrays:
        weights.append(torch.from_numpy(arrays[f"backbone/w{i}"]))
        biases.append(torch.from_numpy(need(f"backbone/b{i}")))
        i += 1
    if not weights:
        raise FormatError("backbone/w0: missing from container")
    backbone = BackboneParams(weights=weights, biases=biases)

    models = {}
    keys = {tuple(name.split("/")[1:3]) for name in arrays if name.startswith("model/")}
    for cid_s, corner in sorted(keys):
        cid = int(cid_s)
        base = f"model/{cid_s}/{corner}"
        a = need(f"{base}/A")
        chi = need(f"{base}/chi")
        if a.shape != chi.shape:
            raise FormatError(f"{base}/chi: shape {chi.shape} mismatches A {a.shape}")
        models[(cid, corner)] = CompositionalModel(
            class_id=cid, corner=corner,
            A=torch.from_numpy(a), chi=torch.from_numpy(chi),
            omega=float(need(f"{base}/omega")), rho=float(need(f"{base}/rho")),
        )
    return ModelContainer(dictionary=dictionary, context=context, occluder=occluder,
                          backbone=backbone, models=models)
