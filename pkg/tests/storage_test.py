"""Test storage."""

import json
from pathlib import Path

import msgpack
import numpy as np
import pytest
import yaml

from wavedistill.detector import DetectorSpec, init_detector, init_head
from wavedistill.scenes import generate_dataset
from wavedistill.storage import (
    DEFAULT_CONFIG,
    PRESETS,
    CheckpointStorage,
    DatasetStorage,
    YamlConfigStorage,
    dict_deep_merge,
)
from wavedistill.tensor import TensorFormatError

here = Path(__file__).parent
data_dir = here.joinpath('data')
config_file = data_dir.joinpath('config.yaml')


def test_dict_deep_merge():
    destination = {'a': 1, 'b': {'c': 2, 'd': 3}}
    merged = dict_deep_merge({'b': {'c': 5}, 'e': 6}, destination)
    assert merged is destination
    assert merged == {'a': 1, 'b': {'c': 5, 'd': 3}, 'e': 6}


def test_default_config_without_file():
    config_storage = YamlConfigStorage(None)
    assert config_storage.config == DEFAULT_CONFIG
    assert config_storage.config is not DEFAULT_CONFIG
    config_storage.config['distill']['alpha'] = 5.0
    assert DEFAULT_CONFIG['distill']['alpha'] == 1e-3


def test_file_overrides_defaults():
    config = YamlConfigStorage(config_file).config
    assert config['dataset']['scene_size'] == 16
    assert config['distill']['amplifier_epochs'] == 1
    assert config['distill']['lambda'] == DEFAULT_CONFIG['distill']['lambda']
    assert config['evaluation'] == DEFAULT_CONFIG['evaluation']


def test_preset_overrides_file(tmp_path):
    path = tmp_path.joinpath('config.yaml')
    path.write_text(yaml.safe_dump({'optimizer': {'lr': 0.1, 'batch_size': 3}, 'distill': {'alpha': 0.5}}))
    config = YamlConfigStorage(path, 'retinanet-dota').config
    assert config['optimizer']['lr'] == PRESETS['retinanet-dota']['optimizer']['lr']
    assert config['optimizer']['batch_size'] == 3
    assert config['distill']['alpha'] == 7e-5
    assert YamlConfigStorage(path, 'toy').config['distill']['alpha'] == 0.5


def test_unknown_preset():
    with pytest.raises(ValueError) as e:
        YamlConfigStorage(None, 'yolo')
    assert 'retinanet-dior' in str(e.value)


def test_write_default_config(tmp_path):
    path = tmp_path.joinpath('config.yaml')
    YamlConfigStorage.write_default_config(path)
    assert path.read_text().startswith('# wavedistill configuration file.')
    assert yaml.safe_load(path.read_text()) == DEFAULT_CONFIG
    assert YamlConfigStorage(path).config == DEFAULT_CONFIG


def test_checkpoint_detector(tmp_path):
    storage = CheckpointStorage(tmp_path)
    params = init_detector(DetectorSpec((4, 4, 6), 4, 2), 0)
    assert not storage.exists('teacher')
    directory = storage.save_detector('teacher', params)
    assert storage.exists('teacher')
    manifest = json.loads(directory.joinpath('manifest.json').read_text())
    assert manifest['layout']['kind'] == 'detector'
    assert manifest['sha256'] == params.checksum()
    assert directory.joinpath('backbone.conv1.weight.tensor').is_file()
    loaded = storage.load_detector('teacher')
    assert loaded.spec == params.spec
    assert loaded.checksum() == params.checksum()


def test_checkpoint_head(tmp_path):
    storage = CheckpointStorage(tmp_path)
    head = init_head(4, 2, 0)
    storage.save_head('amplifier-haar', head)
    loaded = storage.load_head('amplifier-haar')
    assert list(loaded) == list(head)
    assert all(np.array_equal(loaded[k], v) for k, v in head.items())
    with pytest.raises(TensorFormatError):
        storage.load_detector('amplifier-haar')
    storage.save_detector('teacher', init_detector(DetectorSpec((4, 4, 6), 4, 2), 0))
    with pytest.raises(TensorFormatError):
        storage.load_head('teacher')


def test_checkpoint_provenance(tmp_path):
    storage = CheckpointStorage(tmp_path)
    assert storage.provenance('teacher') is None
    storage.save_head('plain', init_head(4, 2, 0))
    assert storage.provenance('plain') is None
    settings = {'dataset': {'seed': 0, 'scene_size': 16}, 'teacher_width': 4, 'optimizer': {'lr': 0.0001}}
    storage.save_detector('teacher', init_detector(DetectorSpec((4, 4, 4), 4, 2), 0), settings)
    assert storage.provenance('teacher') == settings
    assert storage.load_detector('teacher').spec.backbone_widths == (4, 4, 4)


def test_checkpoint_corruption(tmp_path):
    storage = CheckpointStorage(tmp_path)
    head = init_head(4, 2, 0)
    directory = storage.save_head('head', head)
    tampered = dict(head)
    tampered['cls.bias'] = head['cls.bias'] + 1.0
    storage.save_head('other', tampered)
    directory.joinpath('cls.bias.tensor').write_bytes(tmp_path.joinpath('other', 'cls.bias.tensor').read_bytes())
    with pytest.raises(TensorFormatError) as e:
        storage.load_head('head')
    assert 'checksum' in str(e.value)


def test_dataset_storage(tmp_path):
    storage = DatasetStorage(tmp_path.joinpath('data'))
    dataset = generate_dataset(3, scene_size=16, num_classes=2, seed=4, split='val')
    assert not storage.exists('val')
    storage.save(dataset)
    assert storage.exists('val')
    assert tmp_path.joinpath('data', 'val_annotations.jsonl').is_file()
    loaded = storage.load('val')
    assert np.array_equal(loaded.images, dataset.images)
    assert loaded.annotations == dataset.annotations
    assert (loaded.num_classes, loaded.seed, loaded.split) == (2, 4, 'val')


def test_dataset_storage_rejects_truncated_images(tmp_path):
    storage = DatasetStorage(tmp_path)
    storage.save(generate_dataset(1, scene_size=16, num_classes=2))
    path = tmp_path.joinpath('train.msgpack')
    record = msgpack.unpackb(path.read_bytes(), raw=False)
    record['images'][0] = record['images'][0][:-8]
    path.write_bytes(msgpack.packb(record, use_bin_type=True))
    with pytest.raises(TensorFormatError):
        storage.load('train')
