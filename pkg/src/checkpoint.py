"""
Parameter checkpoints
A single .npz holding the tensors, the model config and the graph size
"""

import json
import logging
import os
from typing import Tuple

import numpy as np

from config import ModelConfig
from model import ModelParams

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Raised for unreadable or mismatched checkpoint files"""


def save_checkpoint(path, cfg: ModelConfig, params: ModelParams, n_users: int, n_items: int,
                    epoch: int = 0):
    """Write params and their config to `path` (.npz)"""
    meta = {
        'format': FORMAT_VERSION,
        'model': cfg.to_dict(),
        'M': int(n_users),
        'N': int(n_items),
        'epoch': int(epoch),
        'n_weights': len(params.weights),
    }
    arrays = {'embedding': params.embedding}
    for layer, w in enumerate(params.weights):
        arrays[f'weight_{layer}'] = w
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, 'wb') as handle:
        np.savez(handle, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    logger.debug("Saved checkpoint for epoch %d to %s", epoch, path)


def load_checkpoint(path) -> Tuple[ModelConfig, ModelParams, dict]:
    """
    Read a checkpoint written by save_checkpoint.

    Returns:
        (model config, params, metadata with M, N and epoch)
    """
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        if 'meta' not in archive.files:
            raise CheckpointError(f"{path} is not a QGCN checkpoint")
        meta = json.loads(str(archive['meta']))
        if meta.get('format') != FORMAT_VERSION:
            raise CheckpointError(
                f"Unsupported checkpoint format {meta.get('format')} in {path}"
            )
        cfg = ModelConfig.from_dict(meta['model'])
        weights = [archive[f'weight_{layer}'].copy() for layer in range(meta['n_weights'])]
        params = ModelParams(cfg.variant, archive['embedding'].copy(), weights)
    return cfg, params, meta
