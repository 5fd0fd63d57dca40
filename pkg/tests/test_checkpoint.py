import numpy as np
import pytest

from checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from config import ModelConfig
from model import init_params


@pytest.mark.parametrize('variant', ['qgcn', 'qgcn_q', 'qgcn_w', 'lightgcn'])
def test_round_trip_is_bit_exact(tmp_path, variant):
    """Loaded parameters equal the saved ones exactly"""
    cfg = ModelConfig(variant, layers=2, embed_dim=8, readout='concat')
    params = init_params(cfg, 3, 4, seed=1)
    path = tmp_path / 'ckpt.npz'
    save_checkpoint(path, cfg, params, 3, 4, epoch=7)
    loaded_cfg, loaded, meta = load_checkpoint(path)
    assert loaded_cfg == cfg
    assert loaded.allclose(params, rtol=0, atol=0)
    assert (meta['M'], meta['N'], meta['epoch']) == (3, 4, 7)


def test_layer_weights_survive(tmp_path):
    """Tuple-valued config fields come back as tuples"""
    cfg = ModelConfig('lightgcn', layers=1, embed_dim=4, layer_weights=(0.3, 0.7))
    path = tmp_path / 'ckpt.npz'
    save_checkpoint(path, cfg, init_params(cfg, 1, 1, 0), 1, 1)
    assert load_checkpoint(path)[0].layer_weights == (0.3, 0.7)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / 'nope.npz')


def test_foreign_archive_rejected(tmp_path):
    """An npz without metadata is not a checkpoint"""
    path = tmp_path / 'other.npz'
    np.savez(path, x=np.zeros(2))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
