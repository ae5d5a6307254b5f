import struct

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from contentsep import tensorio


def test_header_layout(tmp_path):
    path = tmp_path / "t.cstc"
    tensorio.save_tensors(path, {"ab": np.array([[1.0, 2.0, 3.0]], dtype=np.float32)})
    raw = path.read_bytes()
    expected = (
        b"CSTC" + struct.pack("<HI", 1, 1) + struct.pack("<H", 2) + b"ab" + struct.pack("<BB", 1, 2)
        + struct.pack("<QQ", 1, 3) + struct.pack("<3f", 1.0, 2.0, 3.0)
    )
    assert raw == expected


@settings(max_examples=40, deadline=None)
@given(
    arrays=st.dictionaries(
        st.text("abcdefghij._", min_size=1, max_size=12),
        hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5), elements=st.floats(-1e6, 1e6, width=32)),
        max_size=5,
    )
)
def test_roundtrip(tmp_path_factory, arrays):
    path = tmp_path_factory.mktemp("rt") / "x.cstc"
    tensorio.save_tensors(path, arrays)
    back = tensorio.load_tensors(path)
    assert list(back) == list(arrays)
    for k, v in arrays.items():
        assert back[k].dtype == np.float32 and back[k].shape == v.shape
        np.testing.assert_array_equal(back[k], v)
    assert tensorio.list_tensors(path) == {k: v.shape for k, v in arrays.items()}


def test_rejects_foreign_and_truncated(tmp_path):
    bad = tmp_path / "bad.cstc"
    bad.write_bytes(b"NOPE")
    with pytest.raises(tensorio.ContainerError):
        tensorio.load_tensors(bad)
    good = tmp_path / "good.cstc"
    tensorio.save_tensors(good, {"x": np.ones(10, np.float32)})
    trunc = tmp_path / "trunc.cstc"
    trunc.write_bytes(good.read_bytes()[:-4])
    with pytest.raises(tensorio.ContainerError):
        tensorio.load_tensors(trunc)


def test_checkpoint_and_hash(tmp_path):
    torch.manual_seed(0)
    net = torch.nn.Sequential(torch.nn.Linear(3, 4), torch.nn.Linear(4, 2))
    tensorio.save_checkpoint(tmp_path / "n.cstc", net, {"width": 4})
    tensors, meta = tensorio.load_checkpoint(tmp_path / "n.cstc")
    assert meta == {"width": 4}
    assert set(tensors) == set(net.state_dict())
    h_all, h_first = tensorio.state_hash(net), tensorio.state_hash(net, ("0.",))
    with torch.no_grad():
        net[1].bias.add_(1.0)
    assert tensorio.state_hash(net, ("0.",)) == h_first
    assert tensorio.state_hash(net) != h_all
