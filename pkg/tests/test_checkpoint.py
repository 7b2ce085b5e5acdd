import numpy as np
import pytest

from conftest import tiny_config
from hvcnet.checkpoint import checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from hvcnet.data.augment import AugmentConfig
from hvcnet.data.idx import ImageSet
from hvcnet.errors import FormatError
from hvcnet.model import build
from hvcnet.train import TrainConfig, evaluate, init_state, train


@pytest.fixture(scope="module")
def trained():
    rng = np.random.default_rng(0)
    data = ImageSet(rng.integers(0, 256, (40, 28, 28), dtype=np.uint8), rng.integers(0, 10, 40).astype(np.uint8))
    cfg = TrainConfig(epochs=1, batch_size=20, model=tiny_config(merge="random-init"), augment=AugmentConfig(strategy="none"))
    return train(cfg, data), data


def test_round_trip_restores_everything(tmp_path, trained):
    res, data = trained
    path = tmp_path / "m.hvck"
    save_checkpoint(path, res.model, res.state)
    ck = load_checkpoint(path)
    assert ck.model.config == res.model.config
    for k, p in res.model.params.items():
        q = ck.model.params[k]
        assert q.data.tobytes() == p.data.tobytes() and q.requires_grad == p.requires_grad
    for k, b in res.model.buffers().items():
        assert ck.model.buffers()[k].tobytes() == b.tobytes()
    for k in res.state.ema:
        assert ck.state.ema[k].tobytes() == res.state.ema[k].tobytes()
        assert ck.state.adam.m[k].tobytes() == res.state.adam.m[k].tobytes()
        assert ck.state.adam.v[k].tobytes() == res.state.adam.v[k].tobytes()
    assert (ck.state.epoch, ck.state.step, ck.state.seed) == (res.state.epoch, res.state.step, res.state.seed)
    a1, p1 = evaluate(res.model, data, res.state.ema)
    a2, p2 = evaluate(ck.model, data, ck.state.ema)
    assert a1 == a2 and p1.tobytes() == p2.tobytes()


def test_saving_is_deterministic(trained):
    res, _ = trained
    a = checkpoint_bytes(res.model, res.state)
    b = checkpoint_bytes(parse_checkpoint(a).model, parse_checkpoint(a).state)
    assert a == b


def test_fresh_checkpoint_round_trip():
    model, _ = build(tiny_config(branches=1, merge="not-learnable"), seed=2)
    state = init_state(model, 2)
    ck = parse_checkpoint(checkpoint_bytes(model, state))
    assert ck.state.step == 0 and not ck.state.adam.m
    assert set(ck.state.ema) == set(model.trainable_parameters())


def test_header_layout(trained):
    buf = checkpoint_bytes(trained[0].model, trained[0].state)
    assert buf[:4] == b"HVCK" and int.from_bytes(buf[4:8], "little") == 1


def test_bad_magic_and_version(trained):
    buf = checkpoint_bytes(trained[0].model, trained[0].state)
    with pytest.raises(FormatError, match="magic") as exc:
        parse_checkpoint(b"XXXX" + buf[4:])
    assert exc.value.offset == 0
    with pytest.raises(FormatError, match="version") as exc:
        parse_checkpoint(buf[:4] + (9).to_bytes(4, "little") + buf[8:])
    assert exc.value.offset == 4


@pytest.mark.parametrize("cut", [3, 10, 200, -1])
def test_truncation_reports_offset(trained, cut):
    buf = checkpoint_bytes(trained[0].model, trained[0].state)
    short = buf[:cut]
    with pytest.raises(FormatError) as exc:
        parse_checkpoint(short)
    assert 0 <= exc.value.offset <= len(short)
    assert "offset" in str(exc.value)


def test_trailing_bytes_rejected(trained):
    buf = checkpoint_bytes(trained[0].model, trained[0].state)
    with pytest.raises(FormatError, match="trailing"):
        parse_checkpoint(buf + b"\0")


def test_load_as_float64(trained):
    res, data = trained
    ck = parse_checkpoint(checkpoint_bytes(res.model, res.state), dtype=np.float64)
    assert all(p.data.dtype == np.float64 for p in ck.model.params.values())
    acc32, _ = evaluate(res.model, data, res.state.ema)
    acc64, _ = evaluate(ck.model, data, ck.state.ema)
    assert abs(acc32 - acc64) <= 1 / data.count
