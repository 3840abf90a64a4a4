"""Checkpoint directories.

``manifest.json`` records versions, the network fingerprint, the step counter
and the tensor layout; every component's parameters and buffers are one flat
float32 blob in MVOL1 format, as are optimizer moments and prototypes.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from modality_forge.data.volume_io import VolumeFormatError, read_array, write_array
from modality_forge.networks import NetConfig, SegmentationModel, TranslationModel
from modality_forge.training.config import TrainConfig

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    net_config: NetConfig
    train_config: TrainConfig
    translation: TranslationModel | None = None
    segmentation: SegmentationModel | None = None
    optimizers: dict[str, torch.optim.Optimizer] = field(default_factory=dict)
    step: int = 0
    prototypes: torch.Tensor | None = None
    prototype_counts: torch.Tensor | None = None
    meta: dict = field(default_factory=dict)

    @property
    def fingerprint(self) -> str:
        return self.net_config.fingerprint()

    def models(self) -> dict[str, torch.nn.Module]:
        out = {}
        if self.translation is not None:
            out["translation"] = self.translation
        if self.segmentation is not None:
            out["segmentation"] = self.segmentation
        return out

    def trained_prototypes(self) -> int:
        if self.prototype_counts is None:
            return 0
        return int((self.prototype_counts > 0).sum())


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _flatten(state: dict[str, torch.Tensor]):
    layout = [[k, list(v.shape)] for k, v in state.items()]
    flat = np.concatenate([v.detach().cpu().reshape(-1).numpy().astype(np.float32)
                           for v in state.values()]) if state else np.zeros(0, np.float32)
    return layout, flat


def _unflatten(layout, flat, like: dict[str, torch.Tensor]):
    out, pos = {}, 0
    for name, shape in layout:
        n = int(np.prod(shape)) if shape else 1
        if pos + n > flat.size:
            raise CheckpointError("parameter blob is shorter than its layout")
        ref = like.get(name)
        dtype = ref.dtype if ref is not None else torch.float32
        out[name] = torch.from_numpy(flat[pos:pos + n].copy()).reshape(shape).to(dtype)
        pos += n
    if pos != flat.size:
        raise CheckpointError("parameter blob is longer than its layout")
    return out


def _write_blob(path: Path, flat: np.ndarray):
    # MVOL1 needs at least one element
    write_array(flat if flat.size else np.zeros(1, np.float32), path)


def _read_blob(path: Path, expected: int) -> np.ndarray:
    try:
        arr = read_array(path).reshape(-1)
    except (OSError, VolumeFormatError) as exc:
        raise CheckpointError(f"corrupt checkpoint blob {path.name}: {exc}") from exc
    return arr[:0] if expected == 0 else arr


def _optimizer_state(opt: torch.optim.Optimizer):
    """Flatten Adam moments in parameter order."""
    tensors, steps = {}, []
    for gi, group in enumerate(opt.param_groups):
        for pi, p in enumerate(group["params"]):
            st = opt.state.get(p, {})
            steps.append(float(st["step"]) if "step" in st else None)
            for key in ("exp_avg", "exp_avg_sq"):
                if key in st:
                    tensors[f"{gi}.{pi}.{key}"] = st[key]
    groups = [{k: v for k, v in g.items() if k != "params"} for g in opt.param_groups]
    return tensors, steps, groups


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    doc = {
        "format_version": FORMAT_VERSION,
        "fingerprint": ckpt.fingerprint,
        "net_config": asdict(ckpt.net_config),
        "train_config": ckpt.train_config.to_dict(),
        "step": ckpt.step,
        "meta": ckpt.meta,
        "components": {},
        "optimizers": {},
    }
    for model_name, model in ckpt.models().items():
        for comp_name, comp in model.components().items():
            key = f"{model_name}.{comp_name}"
            layout, flat = _flatten(comp.state_dict())
            _write_blob(path / f"{key}.mvol", flat)
            doc["components"][key] = {"file": f"{key}.mvol", "layout": layout,
                                      "size": int(flat.size)}
        if model_name == "segmentation":
            doc["segmentation_inputs"] = model.fusion.K
    for name, opt in ckpt.optimizers.items():
        tensors, steps, groups = _optimizer_state(opt)
        layout, flat = _flatten(tensors)
        _write_blob(path / f"opt_{name}.mvol", flat)
        doc["optimizers"][name] = {"file": f"opt_{name}.mvol", "layout": layout,
                                   "size": int(flat.size), "steps": steps, "groups": groups}
    if ckpt.prototypes is not None:
        write_array(ckpt.prototypes.detach().cpu().numpy(), path / "prototypes.mvol")
        doc["prototype_counts"] = [int(c) for c in ckpt.prototype_counts]
    (path / "manifest.json").write_text(json.dumps(doc, indent=1) + "\n")
    return path


def _restore_optimizer(opt: torch.optim.Optimizer, entry: dict, path: Path) -> None:
    flat = _read_blob(path / entry["file"], entry["size"])
    if flat.size != entry["size"]:
        raise CheckpointError(f"optimizer blob {entry['file']} has wrong size")
    tensors = _unflatten(entry["layout"], flat, {})
    k = 0
    for gi, group in enumerate(opt.param_groups):
        group.update({kk: (tuple(v) if isinstance(v, list) else v)
                      for kk, v in entry["groups"][gi].items()})
        for pi, p in enumerate(group["params"]):
            step = entry["steps"][k]
            k += 1
            if step is None:
                continue
            opt.state[p] = {"step": torch.tensor(step),
                            "exp_avg": tensors[f"{gi}.{pi}.exp_avg"].to(p.dtype),
                            "exp_avg_sq": tensors[f"{gi}.{pi}.exp_avg_sq"].to(p.dtype)}


def load_checkpoint(path, expected: NetConfig | None = None, optimizers=None) -> Checkpoint:
    """Rebuild a checkpoint. ``optimizers`` is an optional factory
    ``(Checkpoint) -> dict[str, Optimizer]`` whose state is then restored."""
    from modality_forge import networks

    path = Path(path)
    try:
        doc = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {path}: {exc}") from exc
    if doc.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('format_version')!r}")
    net_cfg = NetConfig.from_dict(doc["net_config"])
    if net_cfg.fingerprint() != doc["fingerprint"]:
        raise CheckpointError("network config does not match the recorded fingerprint")
    if expected is not None and expected.fingerprint() != doc["fingerprint"]:
        raise CheckpointError("checkpoint fingerprint does not match the requested network config")
    train_cfg = TrainConfig.from_dict(doc["train_config"])
    comps = doc["components"]
    ckpt = Checkpoint(net_cfg, train_cfg, step=int(doc["step"]), meta=doc.get("meta", {}))
    if any(k.startswith("translation.") for k in comps):
        ckpt.translation = networks.build("translation", net_cfg)
    if any(k.startswith("segmentation.") for k in comps):
        ckpt.segmentation = networks.build("segmentation", net_cfg,
                                           fuse_inputs=doc.get("segmentation_inputs"))
    for model_name, model in ckpt.models().items():
        for comp_name, comp in model.components().items():
            key = f"{model_name}.{comp_name}"
            if key not in comps:
                raise CheckpointError(f"checkpoint lacks component {key}")
            entry = comps[key]
            flat = _read_blob(path / entry["file"], entry["size"])
            if flat.size != entry["size"]:
                raise CheckpointError(f"component blob {entry['file']} has wrong size")
            state = _unflatten(entry["layout"], flat, comp.state_dict())
            try:
                comp.load_state_dict(state)
            except RuntimeError as exc:
                raise CheckpointError(f"component {key} does not fit: {exc}") from exc
    if (path / "prototypes.mvol").exists():
        ckpt.prototypes = torch.from_numpy(_read_blob(path / "prototypes.mvol", 1)
                                           .reshape(net_cfg.K, net_cfg.attr_dim).copy())
        ckpt.prototype_counts = torch.tensor(doc["prototype_counts"])
    if optimizers is not None:
        ckpt.optimizers = optimizers(ckpt)
        for name, entry in doc["optimizers"].items():
            if name in ckpt.optimizers:
                _restore_optimizer(ckpt.optimizers[name], entry, path)
    return ckpt
