"""Versioned checkpoint archives: a zip of ``meta.json`` plus one ``.npy`` per named array.

Entries are written in a fixed order with a fixed timestamp, so saving the same
state twice produces identical bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT = "ddslab-ckpt"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    pass


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def write_archive(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blobs = {name: _npy_bytes(arr) for name, arr in arrays.items()}
    header = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "arrays": [
            {"name": n, "shape": list(arrays[n].shape), "dtype": str(arrays[n].dtype),
             "sha256": hashlib.sha256(blobs[n]).hexdigest()}
            for n in blobs
        ],
        "meta": meta,
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _entry(zf, "meta.json", json.dumps(header, sort_keys=True, indent=1).encode())
        for name, blob in blobs.items():
            _entry(zf, f"arrays/{name}.npy", blob)
    path.write_bytes(buf.getvalue())
    return path


def read_archive(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return (meta, arrays); raises CheckpointError on corruption or version mismatch."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("meta.json"))
            if header.get("format") != FORMAT:
                raise CheckpointError(f"{path}: not a {FORMAT} archive")
            if header.get("version") != VERSION:
                raise CheckpointError(f"{path}: checkpoint version {header.get('version')} "
                                      f"is not supported (expected {VERSION})")
            if kind is not None and header["kind"] != kind:
                raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {header['kind']}")
            arrays = {}
            for entry in header["arrays"]:
                blob = zf.read(f"arrays/{entry['name']}.npy")
                if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
                    raise CheckpointError(f"{path}: checksum mismatch for array {entry['name']!r}")
                arrays[entry["name"]] = np.lib.format.read_array(io.BytesIO(blob), allow_pickle=False)
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, EOFError, OSError) as exc:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint ({exc})") from exc
    meta = header["meta"]
    meta["_kind"] = header["kind"]
    return meta, arrays


def state_arrays(module: torch.nn.Module, prefix: str = "param/") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_state(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "param/") -> None:
    state = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)[:5]}")
    module.load_state_dict(state)


def rng_array(gen: torch.Generator | None = None) -> np.ndarray:
    state = gen.get_state() if gen is not None else torch.get_rng_state()
    return state.numpy().copy()


def param_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# typed wrappers


def save_denoiser(path, model, sched, train_config: dict | None = None, val: dict | None = None) -> Path:
    """Training config, validation record and RNG state default to those carried by ``model``."""
    meta = {
        "schedule": sched.to_json(),
        "arch": model.cfg.to_json(),
        "train_config": train_config if train_config is not None else getattr(model, "train_config", {}),
        "validation": val if val is not None else getattr(model, "validation", {}),
        "history": getattr(model, "history", []),
    }
    arrays = state_arrays(model)
    rng = getattr(model, "rng_state", None)
    arrays["rng/torch"] = rng if rng is not None else rng_array()
    return write_archive(path, "denoiser", meta, arrays)


def load_denoiser(path):
    from ddslab.diffusion import Denoiser, DenoiserConfig, NoiseSchedule

    meta, arrays = read_archive(path, "denoiser")
    model = Denoiser(DenoiserConfig.from_json(meta["arch"]))
    load_state(model, arrays)
    model.eval()
    model.history = meta.get("history", [])
    model.validation = meta.get("validation", {})
    model.val_loss = model.validation.get("loss")
    model.train_config = meta.get("train_config", {})
    model.rng_state = arrays["rng/torch"]
    return model, NoiseSchedule(**meta["schedule"]), meta


def save_classifier(path, clf, train_config: dict | None = None) -> Path:
    meta = {"arch": {"channels": clf.channels, "width": clf.width}, "accuracy": clf.accuracy,
            "train_config": train_config or {}}
    return write_archive(path, "classifier", meta, state_arrays(clf))


def load_classifier(path):
    from ddslab.metrics import AttrClassifier

    meta, arrays = read_archive(path, "classifier")
    clf = AttrClassifier(**meta["arch"])
    load_state(clf, arrays)
    clf.eval()
    clf.accuracy = meta.get("accuracy", {})
    return clf, meta


def save_translator(path, net, train_config: dict | None = None, log_rows: list | None = None) -> Path:
    meta = {"arch": net.gen.cfg.to_json(), "tasks": [t.to_json() for t in net.tasks],
            "train_config": train_config or {}, "log_tail": (log_rows or [])[-50:]}
    return write_archive(path, "translator", meta, state_arrays(net))


def load_translator(path):
    from ddslab.diffusion import DenoiserConfig
    from ddslab.translator import Task, TranslationNetwork

    meta, arrays = read_archive(path, "translator")
    net = TranslationNetwork.empty(DenoiserConfig.from_json(meta["arch"]),
                                   [Task.from_json(t) for t in meta["tasks"]])
    load_state(net, arrays)
    net.eval()
    return net, meta
