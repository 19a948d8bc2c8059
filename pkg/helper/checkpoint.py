"""Checkpoint storage: named tensors as concatenated LGR1 records plus a text index.

A checkpoint directory holds ``params.lgr``/``params.idx`` and, for training
runs, ``optim.lgr``/``optim.idx`` with the AdamW moments. Index lines are
``name offset shape``; ``# key=value`` lines carry metadata.
"""

import logging
import os
from dataclasses import asdict, fields
from typing import Dict, Tuple

import torch

from .denoiser import Denoiser, DenoiserConfig
from .errors import FormatError, StorageError
from .latent import LatentGrid, decode_lgr, encode_lgr
from .trainer import TrainConfig, TrainResult, make_optimizer
from .utils import atomic_write, atomic_write_text

logger = logging.getLogger(__name__)

INDEX_HEADER = "# LGR1 tensor index"


def _shape_text(shape) -> str:
    return "x".join(str(s) for s in shape) if len(shape) else "-"


def _parse_shape(text: str):
    return () if text == "-" else tuple(int(s) for s in text.split("x"))


def write_tensors(stem, tensors: Dict[str, torch.Tensor], meta: Dict[str, object]):
    blob = bytearray()
    lines = [INDEX_HEADER]
    lines += [f"# {k}={meta[k]}" for k in sorted(meta)]
    for name, tensor in tensors.items():
        shape = tuple(tensor.shape)
        grid = LatentGrid(tensor.detach().to(torch.float64).reshape((1,) * (5 - len(shape)) + shape))
        lines.append(f"{name} {len(blob)} {_shape_text(shape)}")
        blob += encode_lgr(grid)
    atomic_write(f"{stem}.lgr", bytes(blob))
    atomic_write_text(f"{stem}.idx", "\n".join(lines) + "\n")


def read_tensors(stem) -> Tuple[Dict[str, torch.Tensor], Dict[str, str]]:
    try:
        with open(f"{stem}.idx", "r", encoding="utf-8") as handle:
            rows = handle.read().splitlines()
    except FileNotFoundError as e:
        raise StorageError(f"no checkpoint index at {stem}.idx") from e
    if not rows or rows[0] != INDEX_HEADER:
        raise FormatError(f"{stem}.idx is not a tensor index")
    meta, entries = {}, []
    for row in rows[1:]:
        if row.startswith("# "):
            key, _, value = row[2:].partition("=")
            meta[key] = value
        elif row:
            name, offset, shape = row.split(" ")
            entries.append((name, int(offset), _parse_shape(shape)))
    tensors = {}
    try:
        with open(f"{stem}.lgr", "rb") as handle:
            for name, offset, shape in entries:
                handle.seek(offset)
                tensors[name] = decode_lgr(handle, offset).values.reshape(shape)
    except FileNotFoundError as e:
        raise StorageError(f"no checkpoint payload at {stem}.lgr") from e
    return tensors, meta


class Checkpoint:
    def __init__(self, folder):
        self.folder = os.fspath(folder)
        self.params_stem = os.path.join(self.folder, "params")
        self.optim_stem = os.path.join(self.folder, "optim")

    def exists(self) -> bool:
        return os.path.exists(f"{self.params_stem}.idx")

    def save(self, result: TrainResult, model_cfg: DenoiserConfig, **meta):
        params = result.params
        header = {f"model.{k}": v for k, v in asdict(model_cfg).items()}
        header.update(meta)
        header["iteration"] = result.iteration
        write_tensors(self.params_stem, dict(params.named_parameters()), header)

        names = [n for n, _ in params.named_parameters()]
        state = result.optimizer.state_dict()["state"]
        moments = {}
        for i, name in enumerate(names):
            if i not in state:
                continue
            moments[f"{name}.exp_avg"] = state[i]["exp_avg"]
            moments[f"{name}.exp_avg_sq"] = state[i]["exp_avg_sq"]
            moments[f"{name}.step"] = torch.as_tensor(state[i]["step"], dtype=torch.float64)
        write_tensors(self.optim_stem, moments, {"iteration": result.iteration})
        logger.info(f"checkpoint saved to {self.folder} at iteration {result.iteration}")

    def load_params(self) -> Denoiser:
        tensors, meta = read_tensors(self.params_stem)
        cfg = _config_from_meta(meta)
        model = Denoiser(cfg)
        with torch.no_grad():
            for name, param in model.named_parameters():
                if name not in tensors:
                    raise FormatError(f"checkpoint lacks tensor {name}")
                param.copy_(tensors[name])
        model.eval()
        return model

    def meta(self) -> Dict[str, str]:
        return read_tensors(self.params_stem)[1]

    def load_training(self, train_cfg: TrainConfig) -> TrainResult:
        params = self.load_params()
        optimizer = make_optimizer(params, train_cfg)
        moments, meta = read_tensors(self.optim_stem)
        state = {}
        for i, (name, _) in enumerate(params.named_parameters()):
            if f"{name}.step" not in moments:
                continue
            state[i] = {
                "step": moments[f"{name}.step"].to(torch.float32),
                "exp_avg": moments[f"{name}.exp_avg"].clone(),
                "exp_avg_sq": moments[f"{name}.exp_avg_sq"].clone(),
            }
        optimizer.load_state_dict({"state": state, "param_groups": optimizer.state_dict()["param_groups"]})
        return TrainResult(params, optimizer, [], int(meta["iteration"]))


def _config_from_meta(meta: Dict[str, str]) -> DenoiserConfig:
    values = {}
    for f in fields(DenoiserConfig):
        raw = meta.get(f"model.{f.name}")
        if raw is None:
            raise FormatError(f"checkpoint index lacks model.{f.name}")
        if f.type in (bool, "bool"):
            values[f.name] = raw == "True"
        elif f.type in (float, "float"):
            values[f.name] = float(raw)
        else:
            values[f.name] = int(raw)
    return DenoiserConfig(**values)
