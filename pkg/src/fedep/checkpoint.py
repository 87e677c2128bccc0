"""Versioned npz checkpoints of a federation run."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .client import ClientState, HyperParams
from .federation import FederationRun, RoundRecord

FORMAT_VERSION = 1
_CLIENT_FIELDS = ("X", "W", "S", "U", "Lam", "Pi")


class CheckpointError(Exception):
    pass


def save_checkpoint(path: str | Path, run: FederationRun, config_hash: str, tool_version: str) -> Path:
    path = Path(path)
    arrays = {
        "format_version": np.array(FORMAT_VERSION),
        "config_hash": np.array(config_hash),
        "tool_version": np.array(tool_version),
        "round": np.array(run.round),
        "V": run.V,
        "V_orth": run.V_orth,
        "hp": np.array(json.dumps(run.hp.to_dict(), sort_keys=True)),
        "history": np.array(json.dumps([r.to_dict() for r in run.history])),
        "initial_lagrangian": np.array(np.nan if run.initial_lagrangian is None else run.initial_lagrangian),
        "client_ids": np.array([c.id for c in run.clients]),
    }
    for k, c in enumerate(run.clients):
        for name in _CLIENT_FIELDS:
            arrays[f"c{k}_{name}"] = getattr(c, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    # write through a handle so numpy does not append a second suffix
    with open(path, "wb") as f:
        np.savez(f, **arrays)
    return path


def checkpoint_hash(path: str | Path) -> str:
    with np.load(Path(path)) as z:
        return str(z["config_hash"])


def load_checkpoint(path: str | Path, expected_hash: str | None = None) -> FederationRun:
    """Rebuild a run; refuses a checkpoint written under a different config hash."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise CheckpointError(f"{path} is not a readable checkpoint: {e}") from e
    with z:
        version = int(z["format_version"])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
        stored = str(z["config_hash"])
        if expected_hash is not None and stored != expected_hash:
            raise CheckpointError(
                f"{path} was written under config {stored}, current config is {expected_hash}"
            )
        hp = HyperParams.from_dict(json.loads(str(z["hp"])))
        clients = []
        for k, cid in enumerate(z["client_ids"]):
            kw = {name: z[f"c{k}_{name}"] for name in _CLIENT_FIELDS}
            clients.append(ClientState(id=int(cid), **kw))
        history = [RoundRecord(**r) for r in json.loads(str(z["history"]))]
        init_L = float(z["initial_lagrangian"])
        return FederationRun(
            clients=clients,
            V=z["V"],
            V_orth=z["V_orth"],
            hp=hp,
            round=int(z["round"]),
            history=history,
            initial_lagrangian=None if np.isnan(init_L) else init_L,
        )
