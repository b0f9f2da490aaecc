import pytest


def test_tensor_file_layout(tmp_path):
    import struct

    import torch

    from exbridge.utils.bkt import load_tensor, save_tensor

    x = torch.arange(6, dtype=torch.float32).reshape(2, 3) / 4
    path = save_tensor(x, str(tmp_path / "x.bkt"))
    raw = open(path, 'rb').read()
    assert raw[:4] == b'BKT1'
    assert struct.unpack('<III', raw[4:16]) == (2, 2, 3)
    assert struct.unpack('<6f', raw[16:]) == tuple(x.flatten().tolist())
    assert torch.equal(load_tensor(path), x)


def test_tensor_file_is_float32(tmp_path):
    import torch

    from exbridge.utils.bkt import load_tensor, save_tensor

    x = torch.tensor([[1.0 / 3.0]], dtype=torch.float64)
    out = load_tensor(save_tensor(x, str(tmp_path / "x.bkt")))
    assert out.dtype == torch.float32
    assert float(out) == float(torch.tensor(1.0 / 3.0, dtype=torch.float32))


def test_malformed_files_are_rejected(tmp_path):
    import torch

    from exbridge.utils.bkt import BKTFormatError, encode_tensor, load_tensor

    payload = encode_tensor(torch.ones(2, 2))
    cases = {
        'magic': b'BKT2' + payload[4:],
        'truncated': payload[:-3],
        'trailing': payload + b'\x00',
        'header': payload[:6],
    }
    for name, data in cases.items():
        path = tmp_path / f"{name}.bkt"
        path.write_bytes(data)
        with pytest.raises(BKTFormatError):
            load_tensor(str(path))


def test_weights_checkpoint(tmp_path):
    import json

    import torch

    from exbridge.utils.bkt import BKTFormatError, load_weights, save_weights

    state = {'a.weight': torch.randn(3, 2), 'a.bias': torch.zeros(3), 'scale': torch.tensor(2.5)}
    save_weights(state, str(tmp_path), 'weights')
    manifest = json.loads((tmp_path / "weights.json").read_text())
    assert manifest['format'] == 'BKT1'
    assert [e['name'] for e in manifest['tensors']] == list(state)
    assert manifest['tensors'][0]['offset'] == 0

    loaded = load_weights(str(tmp_path), 'weights', torch.float64)
    assert list(loaded) == list(state)
    for name, value in state.items():
        assert loaded[name].dtype == torch.float64
        assert torch.equal(loaded[name].float(), value)

    manifest['tensors'][0]['shape'] = [2, 3]
    (tmp_path / "weights.json").write_text(json.dumps(manifest))
    with pytest.raises(BKTFormatError):
        load_weights(str(tmp_path), 'weights')
