from pathlib import Path
from typing import Any, Iterable, Mapping, Union

import numpy as np
import orjson
import pandas as pd
from loguru import logger
from pydantic import BaseModel

from app.models.network import NeuralNet
from app.services.relu_algebra import net_from_json, net_to_json

JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY


def ensure_dir(path: Union[str, Path]) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _default(obj: Any):
    if isinstance(obj, BaseModel):
        return obj.model_dump()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_csv(rows: Iterable[Mapping[str, Any]], path: Union[str, Path]) -> Path:
    """One row per mapping, columns in first-seen order."""
    target = Path(path)
    frame = pd.DataFrame(list(rows))
    frame.to_csv(target, index=False, lineterminator="\n")
    logger.info(f"💾 wrote {len(frame)} rows to {target}")
    return target


def write_json(doc: Union[Mapping[str, Any], BaseModel], path: Union[str, Path]) -> Path:
    target = Path(path)
    payload = doc.model_dump() if isinstance(doc, BaseModel) else doc
    target.write_bytes(orjson.dumps(payload, default=_default, option=JSON_OPTIONS))
    logger.info(f"💾 wrote {target}")
    return target


def read_json(path: Union[str, Path]) -> Any:
    return orjson.loads(Path(path).read_bytes())


def write_network(net: NeuralNet, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.write_bytes(net_to_json(net))
    logger.info(f"🧠 wrote network {net.dims[0]}→…→{net.dims[-1]} (H = {net.hidden}) to {target}")
    return target


def read_network(path: Union[str, Path]) -> NeuralNet:
    return net_from_json(Path(path).read_bytes())


def write_text(text: str, path: Union[str, Path]) -> Path:
    target = Path(path)
    target.write_text(text, encoding="utf-8")
    return target
