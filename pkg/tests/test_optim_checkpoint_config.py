import hashlib
import struct

import numpy as np
import pytest

from backbone_fusion import checkpoint as C
from backbone_fusion.config import Config, ConfigError, load_config, parse_config
from backbone_fusion.model import FusionConfig
from backbone_fusion.nn import Linear
from backbone_fusion.optim import AdamW, ParamGroup, linear_warmup_decay
from backbone_fusion.tensor import Tensor

# -- schedule / optimizer --------------------------------------------------------


def test_warmup_decay_shape():
    vals = [linear_warmup_decay(s, 10, 4) for s in range(10)]
    assert vals[:4] == [0.25, 0.5, 0.75, 1.0]
    assert vals[4:] == [1.0, 5 / 6, 4 / 6, 3 / 6, 2 / 6, 1 / 6]
    assert linear_warmup_decay(0, 5, 0) == 1.0
    assert linear_warmup_decay(3, 2, 5) == 0.8


def test_adamw_first_step_by_hand():
    w = Tensor(np.array([[1.0, -2.0]]), requires_grad=True)
    b = Tensor(np.array([0.5]), requires_grad=True)
    opt = AdamW([ParamGroup(["w", "b"], [w, b], lr=0.1, weight_decay=0.5)])
    opt.step({id(w): np.array([[0.3, -0.2]]), id(b): np.array([4.0])})
    # bias-corrected first step moves each entry by lr * sign(g); decay only on the matrix
    np.testing.assert_allclose(w.data, [[1.0 - 0.1 * (1 + 0.5 * 1.0), -2.0 - 0.1 * (-1 + 0.5 * -2.0)]], atol=1e-7)
    np.testing.assert_allclose(b.data, [0.5 - 0.1], atol=1e-7)


def test_adamw_second_step_matches_reference():
    rng = np.random.default_rng(0)
    w0 = rng.standard_normal((3, 2))
    g1, g2 = rng.standard_normal((3, 2)), rng.standard_normal((3, 2))
    w = Tensor(w0.copy(), requires_grad=True)
    opt = AdamW([ParamGroup(["w"], [w], lr=0.01, weight_decay=0.1)])
    opt.step({id(w): g1}, lr_scale=1.0)
    opt.step({id(w): g2}, lr_scale=0.5)
    b1, b2, eps = 0.9, 0.999, 1e-8
    x, m, v = w0.copy(), np.zeros_like(w0), np.zeros_like(w0)
    for t, (g, scale) in enumerate([(g1, 1.0), (g2, 0.5)], 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        upd = (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps) + 0.1 * x
        x = x - 0.01 * scale * upd
    np.testing.assert_allclose(w.data, x, atol=1e-12)


def test_adamw_skips_missing_grads_and_restores_state():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    c = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    before = c.data.copy()
    opt = AdamW([ParamGroup(["a", "c"], [a, c], 0.01, 0.1)])
    opt.step({id(a): np.ones((2, 2))})
    assert np.array_equal(c.data, before)
    # resuming from saved state continues identically
    state = {k: v.copy() for k, v in opt.state().items()}
    a2 = Tensor(a.data.copy(), requires_grad=True)
    opt2 = AdamW([ParamGroup(["a", "c"], [a2, Tensor(before.copy(), requires_grad=True)], 0.01, 0.1)])
    opt2.load_state(state)
    g = rng.standard_normal((2, 2))
    opt.step({id(a): g})
    opt2.step({id(a2): g})
    assert a.data.tobytes() == a2.data.tobytes()


# -- checkpoint container ------------------------------------------------------


def sample_ckpt():
    return C.Checkpoint(
        {"a.weight": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5], dtype=np.float64)},
        {"stage": "coarse", "step": 7, "note": "x"},
        {"m/a.weight": np.ones((2, 3)), "t/a.weight": np.asarray(3, dtype=np.int64)},
    )


def test_checkpoint_roundtrip_and_layout(tmp_path):
    ck = sample_ckpt()
    raw = C.to_bytes(ck)
    assert raw[:8] == b"BBFCKPT\0"
    version, length = struct.unpack("<IQ", raw[8:20])
    assert version == 1
    manifest = raw[20 : 20 + length].decode()
    assert '"param/a.weight"' in manifest and '"optim/t/a.weight"' in manifest
    back = C.from_bytes(raw)
    assert back.stage == "coarse" and back.step == 7
    for k in ck.params:
        assert back.params[k].dtype == ck.params[k].dtype
        np.testing.assert_array_equal(back.params[k], ck.params[k])
    assert int(back.optim["t/a.weight"]) == 3
    path = tmp_path / "c.bin"
    digest = C.save(path, ck)
    assert digest == hashlib.sha256(path.read_bytes()).hexdigest() == C.file_hash(path)
    assert C.to_bytes(C.load(path)) == raw
    assert not (tmp_path / "c.bin.tmp").exists()


def test_checkpoint_rejects_bad_input(tmp_path):
    raw = C.to_bytes(sample_ckpt())
    with pytest.raises(C.CheckpointError):
        C.from_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(C.CheckpointError):
        C.from_bytes(raw[:8] + struct.pack("<IQ", 2, 0) + raw[20:])
    with pytest.raises(C.CheckpointError):
        C.from_bytes(raw[:-8])
    with pytest.raises(C.CheckpointError):
        C.load(tmp_path / "missing.bin")
    with pytest.raises(C.CheckpointError):
        C.to_bytes(C.Checkpoint({"x": np.zeros(2, dtype=np.complex64)}))


def test_load_into_reports_and_errors(rng):
    lin = Linear(3, 2, rng)
    full = C.state_of(lin)
    report = C.load_into(lin, full)
    assert report.loaded == ["bias", "weight"] and report.fresh == [] and report.ignored == []
    with pytest.raises(C.CheckpointError):
        C.load_into(lin, {"weight": full["weight"]})
    assert C.load_into(lin, {"weight": full["weight"]}, fresh_ok=("bias",)).fresh == ["bias"]
    with pytest.raises(C.CheckpointError):
        C.load_into(lin, {**full, "extra": np.zeros(1)})
    assert C.load_into(lin, {**full, "extra": np.zeros(1)}, ignore_ok=("extra",)).ignored == ["extra"]
    with pytest.raises(C.CheckpointError, match="shape mismatch"):
        C.load_into(lin, {**full, "weight": np.zeros((3, 2))})


# -- config ------------------------------------------------------------------


def test_config_defaults_and_validation():
    c = Config()
    assert c.objectives == ("mlm", "itm_hard", "itc")
    assert c.lr_fusion > c.lr_backbone
    with pytest.raises(ConfigError):
        Config(itm=True, itm_hard=True)
    with pytest.raises(ConfigError):
        Config(mlm=False, itm=False, itm_hard=False, itc=False)
    assert Config(stage="fine", mlm=False, itm_hard=False, itc=False).stage == "fine"
    with pytest.raises(ConfigError):
        Config(stage="medium")
    with pytest.raises(ConfigError):
        Config().with_overrides(strategy="nope")


def test_parse_config(tmp_path):
    text = """
    # ablation row
    strategy = merged_attention
    fused_layers = 1
    image_widths = 32,64,128
    mlm = no
    itm_hard = false
    itm = true
    lr_fusion = 1e-3
    train_data = data/train.ndjson
    """
    (tmp_path / "run.cfg").write_text(text)
    c = load_config(tmp_path / "run.cfg")
    assert c.arch.strategy == "merged_attention" and c.arch.fused_layers == 1
    assert c.arch.image_widths == (32, 64, 128)
    assert c.objectives == ("itm", "itc") and c.lr_fusion == 1e-3
    assert c.train_data == str((tmp_path / "data/train.ndjson").resolve())


@pytest.mark.parametrize(
    "text, msg",
    [
        ("bogus = 1", "unknown key"),
        ("seed = 1\nseed = 2", "duplicate"),
        ("mlm = maybe", "boolean"),
        ("steps = many", "steps"),
        ("just words", "key = value"),
        ("itm = true", "alternatives"),
    ],
)
def test_parse_config_errors(text, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(text)


def test_config_roundtrips():
    c = Config().with_overrides(strategy="co_attention_ungated", seed=9, itc=False, train_data="/x/y")
    assert parse_config(c.dumps()) == c
    assert Config.from_dict(c.to_dict()) == c
    with pytest.raises(ConfigError):
        load_config("/nonexistent/run.cfg")
    assert isinstance(c.arch, FusionConfig)
