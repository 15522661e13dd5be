"""Model checkpointing.

File layout (PDNC): magic "PDNC", u32 LE version = 1, a length-prefixed
UTF-8 config block in the CLI's key=value syntax, then named tensor records
until EOF.  Each record is a u32 length-prefixed name, a PDT1 tensor
payload, and one frozen-flag byte.  Round-trips are byte-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import format_kv, parse_kv_text
from .model import FusionSpec, MasterConfig, PDNet, SubNetConfig
from .tensor import Rng, read_tensor, write_tensor

PDNC_MAGIC = b"PDNC"
PDNC_VERSION = 1


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint."""


def _bool_str(b: bool) -> str:
    return "true" if b else "false"


def _encode_configs(model: PDNet) -> str:
    mc = model.master_config
    pairs = {
        "dtype": "f64" if model.dtype == np.float64 else "f32",
        "master.input_channels": str(mc.input_channels),
        "master.stage_channels": ",".join(map(str, mc.stage_channels)),
        "master.convs_per_block": ",".join(map(str, mc.convs_per_block)),
        "master.input_size": str(mc.input_size),
        "master.side_outputs": _bool_str(mc.side_outputs),
    }
    if model.subnet_config is not None:
        sc = model.subnet_config
        pairs.update({
            "subnet.input_channels": str(sc.input_channels),
            "subnet.stage_channels": ",".join(map(str, sc.stage_channels)),
            "subnet.convs_per_block": ",".join(map(str, sc.convs_per_block)),
            "subnet.fusion_stage": str(sc.fusion_stage),
            "fusion.mode": model.fusion.mode,
            "fusion.alpha": repr(float(model.fusion.alpha)),
        })
    return format_kv(pairs)


def _decode_configs(text: str):
    try:
        kv = parse_kv_text(text, source="<checkpoint config>")
    except ValueError as e:
        raise CheckpointError(f"bad checkpoint config block: {e}") from e

    def ints(key):
        return tuple(int(p) for p in kv[key].split(","))

    try:
        dtype = np.float64 if kv.get("dtype", "f32") == "f64" else np.float32
        mc = MasterConfig(
            input_channels=int(kv["master.input_channels"]),
            stage_channels=ints("master.stage_channels"),
            convs_per_block=ints("master.convs_per_block"),
            input_size=int(kv["master.input_size"]),
            side_outputs=kv["master.side_outputs"] == "true",
        )
        sc = None
        fu = None
        if "subnet.stage_channels" in kv:
            sc = SubNetConfig(
                input_channels=int(kv["subnet.input_channels"]),
                stage_channels=ints("subnet.stage_channels"),
                convs_per_block=ints("subnet.convs_per_block"),
                fusion_stage=int(kv["subnet.fusion_stage"]),
            )
            fu = FusionSpec(mode=kv["fusion.mode"], alpha=float(kv["fusion.alpha"]))
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"incomplete checkpoint config block: {e}") from e
    return mc, sc, fu, dtype


def state_records(model: PDNet) -> list[tuple[str, np.ndarray, bool]]:
    """All tensors of a model: parameters (with frozen flags) then BN buffers."""
    recs = [(name, t.data, t.frozen) for name, t in model.named_params()]
    for name, layer, attr in model.named_buffers():
        arr = getattr(layer, attr)
        recs.append((name, arr.reshape(1, arr.size, 1, 1), False))
    return recs


def save_checkpoint(model: PDNet, path):
    config_text = _encode_configs(model).encode("utf-8")
    with open(path, "wb") as f:
        f.write(PDNC_MAGIC)
        f.write(struct.pack("<I", PDNC_VERSION))
        f.write(struct.pack("<I", len(config_text)))
        f.write(config_text)
        for name, arr, frozen in state_records(model):
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            write_tensor(f, arr)
            f.write(struct.pack("<B", 1 if frozen else 0))


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return buf


def read_records(path):
    """Parses a checkpoint into (configs..., records dict name -> (array, frozen))."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != PDNC_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != PDNC_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (clen,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        try:
            config_text = _read_exact(f, clen, "config block").decode("utf-8")
        except UnicodeDecodeError as e:
            raise CheckpointError(f"config block is not valid UTF-8: {e}") from e
        mc, sc, fu, dtype = _decode_configs(config_text)
        records = {}
        while True:
            head = f.read(4)
            if not head:
                break
            if len(head) != 4:
                raise CheckpointError("truncated checkpoint in record header")
            (nlen,) = struct.unpack("<I", head)
            name = _read_exact(f, nlen, "record name").decode("utf-8")
            try:
                arr = read_tensor(f)
            except ValueError as e:
                raise CheckpointError(f"record {name!r}: {e}") from e
            (frozen,) = struct.unpack("<B", _read_exact(f, 1, "frozen flag"))
            records[name] = (arr, bool(frozen))
    return mc, sc, fu, dtype, records


def _apply_records(model: PDNet, records: dict):
    names = set()
    for name, t in model.named_params():
        names.add(name)
        if name not in records:
            raise CheckpointError(f"checkpoint is missing parameter {name!r}")
        arr, frozen = records[name]
        if arr.shape != t.data.shape:
            raise CheckpointError(
                f"parameter {name!r} has shape {arr.shape}, model expects {t.data.shape}")
        t.data = arr.astype(model.dtype, copy=False)
        if frozen:
            t.freeze()
    for name, layer, attr in model.named_buffers():
        names.add(name)
        if name not in records:
            raise CheckpointError(f"checkpoint is missing buffer {name!r}")
        arr, _ = records[name]
        target = getattr(layer, attr)
        if arr.size != target.size:
            raise CheckpointError(
                f"buffer {name!r} has {arr.size} values, model expects {target.size}")
        setattr(layer, attr, arr.reshape(target.shape).astype(model.dtype, copy=False))
    extra = set(records) - names
    if extra:
        raise CheckpointError(f"checkpoint has unknown records: {sorted(extra)[:4]}")


def load_checkpoint(path) -> PDNet:
    """Rebuilds the model a checkpoint was saved from; bit-exact round trip."""
    mc, sc, fu, dtype, records = read_records(path)
    model = PDNet(mc, sc, fu, Rng(0), dtype)
    _apply_records(model, records)
    return model


def load_prior(model: PDNet, prior_path) -> PDNet:
    """Transfers a pretrained master (the prior) into a fresh build.

    The prior must be a master-only checkpoint whose MasterConfig matches.
    Every master-encoder record must exist with a matching shape; decoder
    and head records are copied where shapes agree and otherwise left at
    fresh init (concat fusion widens the first decoder stage).  The subnet,
    when present, keeps its fresh initialization.
    """
    mc, sc, _, _, records = read_records(prior_path)
    if sc is not None:
        raise CheckpointError("prior checkpoint must be master-only (no subnet)")
    if mc != model.master_config:
        raise CheckpointError(
            f"prior master config {mc} does not match model {model.master_config}")
    for name, t in model.named_params():
        if not name.startswith("master."):
            continue
        rec = records.get(name)
        if name.startswith("master.enc"):
            if rec is None:
                raise CheckpointError(f"prior checkpoint is missing encoder parameter {name!r}")
            if rec[0].shape != t.data.shape:
                raise CheckpointError(
                    f"prior encoder parameter {name!r} has shape {rec[0].shape}, "
                    f"model expects {t.data.shape}")
        if rec is not None and rec[0].shape == t.data.shape:
            t.data = rec[0].astype(model.dtype, copy=False)
    for name, layer, attr in model.named_buffers():
        if not name.startswith("master."):
            continue
        rec = records.get(name)
        if rec is not None:
            target = getattr(layer, attr)
            if rec[0].size == target.size:
                setattr(layer, attr, rec[0].reshape(target.shape).astype(model.dtype, copy=False))
            elif name.startswith("master.enc"):
                raise CheckpointError(f"prior encoder buffer {name!r} has wrong size")
    return model
