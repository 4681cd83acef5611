import numpy as np
import pytest

from gradsec import nn, serialize


@pytest.mark.parametrize("name", ["tiny", "lenet5"])
def test_model_round_trip(tmp_path, name):
    specs, shape = nn.architecture(name)
    model = nn.build_model(specs, shape, seed=3)
    back = serialize.load(serialize.save(model, tmp_path / "m.bin"))
    assert back.specs == model.specs
    assert back.input_shape == model.input_shape
    for a, b in zip(model.weights, back.weights):
        if a is None:
            assert b is None
        else:
            assert a.tobytes() == b.tobytes()


def test_alexnet_header_round_trip():
    specs, shape = nn.architecture("alexnet")
    model = nn.build_model(specs, shape, seed=0)
    blob = serialize.dumps(model)
    assert blob[:5] == b"GSEC1"
    assert serialize.loads(blob).n == 8


def test_rejects_corrupt_files():
    model = nn.build_model(nn.tiny_specs(), (8, 8, 1), seed=0)
    blob = serialize.dumps(model)
    with pytest.raises(serialize.FormatError):
        serialize.loads(b"XXXXX" + blob[5:])
    with pytest.raises(serialize.FormatError):
        serialize.loads(blob[:-4])
    with pytest.raises(serialize.FormatError):
        serialize.loads(blob + b"\0")
