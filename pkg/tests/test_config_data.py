import numpy as np
import pytest

from stagewise.config import ConfigError, ExperimentConfig, load_config, parse_config, with_overrides
from stagewise.data import (
    Dataset,
    DatasetError,
    augment,
    dumps,
    load_dataset,
    loads,
    parse_synthetic_spec,
    save_dataset,
    synthetic,
    synthetic_splits,
)

GOOD = """
# toy run
model = toy6
dataset = synthetic:classes=3,size=16,seed=7
splits = 240,60,60
G = 4
s = 2
omega = -0.06
epochs = 2
milestones = 0.5, 0.75
augment = false
"""


# -- config ---------------------------------------------------------------------------

def test_parse_good_config():
    cfg = parse_config(GOOD)
    cfg.validate()
    assert cfg.model == "toy6" and cfg.G == 4 and cfg.s == 2
    assert cfg.splits == (240, 60, 60) and cfg.milestones == (0.5, 0.75)
    assert cfg.augment is False
    tc = cfg.train_config()
    assert tc.epochs == 2 and tc.seed == cfg.seed
    sc = cfg.search_config()
    assert sc.G == 4 and sc.lr == cfg.controller_lr


def test_config_text_roundtrip():
    cfg = parse_config(GOOD)
    assert parse_config(cfg.to_text()) == cfg


@pytest.mark.parametrize("text,fragment", [
    ("bogus = 1\n", "unknown key"),
    ("G = 4\nG = 8\n", "duplicate key"),
    ("G four\n", "key = value"),
    ("G = four\n", "bad value"),
    ("augment = maybe\n", "bad value"),
])
def test_config_syntax_errors(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


@pytest.mark.parametrize("over", [
    {"s": 9},
    {"omega": 0.5},
    {"alpha": (1.0,)},
    {"budget": 2},
    {"grid_step": 0.0},
    {"dataset": ""},
    {"dataset": "synthetic:n=50"},
    {"splits": (10, 0, 5)},
    {"model": "no_such_model"},
])
def test_config_semantic_errors(over):
    cfg = with_overrides(parse_config(GOOD), **over)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_load_config_resolves_relative_files(tmp_path):
    tr, va, te = synthetic_splits(sizes=(20, 10, 10))
    for name, ds in (("tr", tr), ("va", va), ("te", te)):
        save_dataset(tmp_path / f"{name}.sgd", ds)
    (tmp_path / "run.cfg").write_text("model = toy6\ntrain = tr.sgd\nval = va.sgd\ntest = te.sgd\n")
    cfg = load_config(tmp_path / "run.cfg")
    a, b, c = cfg.datasets(tmp_path)
    assert np.array_equal(a.images, tr.images) and b.split == "val" and len(c) == 10
    (tmp_path / "bad.cfg").write_text("model = toy6\ntrain = missing.sgd\nval = va.sgd\ntest = te.sgd\n")
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "bad.cfg")


def test_overrides_skip_none():
    cfg = ExperimentConfig()
    assert with_overrides(cfg, seed=None, out="x").out == "x"
    assert with_overrides(cfg, seed=None).seed == cfg.seed


# -- data -----------------------------------------------------------------------------

def test_synthetic_is_deterministic_and_balanced():
    a = synthetic(n=300, seed=3)
    b = synthetic(n=300, seed=3)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, synthetic(n=300, seed=4).images)
    counts = np.bincount(a.labels, minlength=3)
    assert counts.min() > 60
    assert a.images.shape == (300, 3, 16, 16) and a.images.dtype == np.uint8


def test_splits_are_disjoint_cuts():
    tr, va, te = synthetic_splits(sizes=(30, 10, 10))
    full = synthetic(n=50)
    assert np.array_equal(np.concatenate([tr.images, va.images, te.images]), full.images)
    assert (tr.split, va.split, te.split) == ("train", "val", "test")


def test_dataset_roundtrip_and_corruption():
    ds = synthetic(n=12, seed=1)
    buf = dumps(ds)
    back = loads(buf)
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    assert back.num_classes == ds.num_classes
    with pytest.raises(DatasetError, match="offset"):
        loads(buf[:-7])
    with pytest.raises(DatasetError, match="offset"):
        loads(buf[:10])
    with pytest.raises(DatasetError, match="trailing"):
        loads(buf + b"\0")
    flipped = bytearray(buf)
    flipped[40] ^= 0xFF
    with pytest.raises(DatasetError, match="checksum"):
        loads(bytes(flipped))
    with pytest.raises(DatasetError, match="magic"):
        loads(b"XXXX" + buf[4:])


def test_dataset_validation():
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 1, 4, 4), np.float32), np.zeros(2, np.int64), 2)
    with pytest.raises(DatasetError):
        Dataset(np.zeros((2, 1, 4, 4), np.uint8), np.array([0, 5]), 2)


def test_synthetic_spec():
    assert parse_synthetic_spec("synthetic:classes=4,size=8") == {"classes": 4, "size": 8}
    with pytest.raises(DatasetError):
        parse_synthetic_spec("synthetic:colour=red")
    ds = load_dataset("synthetic:n=20,size=8", "val")
    assert ds.shape == (3, 8, 8) and ds.split == "val" and len(ds) == 20


def test_normalised_input_range():
    x = synthetic(n=5).x()
    assert x.dtype == np.float32
    assert x.min() >= 0.0 and x.max() <= 1.0


def test_holdout_partition():
    ds = synthetic(n=40)
    a, b = ds.holdout(0.25, seed=1)
    assert len(a) == 30 and len(b) == 10


def test_augment_keeps_shape_and_is_seeded():
    x = synthetic(n=4).x()
    a = augment(x, np.random.default_rng(0))
    b = augment(x, np.random.default_rng(0))
    assert a.shape == x.shape and np.array_equal(a, b)
