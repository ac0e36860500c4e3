import struct

import numpy as np
import pytest
from hypothesis import given, settings

from edgeadapt.sim import Simulator
from edgeadapt.taxonomy import encode_path
from edgeadapt.transport import (HEADER, MAGIC, ChannelClosed, DecodeError, DomainVerdict,
                                 FrameBatchUpload, LinkModel, ModelDispatch, ModelRequest, SimLink,
                                 SocketBridge, WindowReport, decode_frame, encode_frame,
                                 transfer_time)
from edgeadapt.world import MB, ExpertModel

from tests.strategies import messages

PATH = ("street", "rainy", "night")


# codec ----------------------------------------------------------------------

def test_model_request_round_trip():
    msg = ModelRequest(device_id=3, path=PATH)
    assert decode_frame(encode_frame(msg)) == msg


def test_header_layout():
    raw = encode_frame(ModelRequest(device_id=9, path=PATH))
    magic, mtype, dev, length = HEADER.unpack_from(raw)
    assert (magic, mtype, dev) == (MAGIC, 3, 9)
    assert raw[:4] == b"MOCH"
    assert length == len(raw) - 17 == len(encode_path(PATH))


def test_bad_frames():
    raw = encode_frame(ModelRequest(device_id=1, path=PATH))
    with pytest.raises(DecodeError, match="bad magic"):
        decode_frame(b"\0\0\0\0" + raw[4:])
    with pytest.raises(DecodeError, match="unknown message type"):
        decode_frame(raw[:4] + b"\x63" + raw[5:])
    with pytest.raises(DecodeError, match="length mismatch"):
        decode_frame(raw + b"\0")
    with pytest.raises(DecodeError):
        decode_frame(raw[:10])


def test_dispatch_length_of_14mb_model():
    m = ExpertModel(PATH, size_bytes=14 * MB)
    msg = ModelDispatch(device_id=1, path=PATH, model=m)
    raw = encode_frame(msg)
    length = HEADER.unpack_from(raw)[3]
    assert length == len(encode_path(PATH)) + 4 + 14 * MB
    assert msg.wire_size() == len(raw)
    back = decode_frame(raw)
    assert back.model.same_as(m)


def test_nack_round_trip():
    msg = ModelDispatch(device_id=2, path=PATH)
    back = decode_frame(encode_frame(msg))
    assert back.model is None and back.path == PATH


def test_upload_size_counts_frame_bytes():
    msg = FrameBatchUpload(device_id=1, window_id=4, handle=7, features=np.ones((20, 8)),
                           frame_bytes=20 * 65536)
    assert msg.payload_size() == len(msg.payload())
    assert msg.n_frames == 20
    assert np.array_equal(decode_frame(encode_frame(msg)).features, msg.features)


@settings(max_examples=300)
@given(messages)
def test_round_trip_property(msg):
    raw = encode_frame(msg)
    back = decode_frame(raw)
    assert back == msg
    assert encode_frame(back) == raw
    assert msg.payload_size() == len(raw) - HEADER.size


# link timing ----------------------------------------------------------------

def test_transfer_time_examples():
    assert transfer_time(0, LinkModel(10e6, 0.0)) == 0.0
    assert transfer_time(14 * MB, LinkModel(10e6, 0.0)) == pytest.approx(11.2)
    assert transfer_time(14 * MB, LinkModel(), 14 * MB) == pytest.approx(22.42)
    with pytest.raises(ValueError):
        transfer_time(-1, LinkModel())
    with pytest.raises(ValueError):
        LinkModel(0.0)


class Sized(ModelRequest):
    """A request padded to an exact wire size."""
    def __init__(self, size, **kw):
        super().__init__(path=(), **kw)
        self._size = size

    def wire_size(self):
        return self._size


def test_sim_link_delivery_time():
    sim = Simulator()
    link = SimLink(sim, LinkModel())
    got = []
    sim.at(5.0, lambda: link.send(Sized(MB), lambda m: got.append(sim.now)))
    sim.run(100)
    assert got == [pytest.approx(5.82)]


def test_sim_link_fifo_serialisation():
    sim = Simulator()
    link = SimLink(sim, LinkModel())
    got = []
    a, b = Sized(14 * MB, device_id=1), Sized(14 * MB, device_id=2)
    link.send(a, lambda m: got.append((m.device_id, sim.now)))
    link.send(b, lambda m: got.append((m.device_id, sim.now)))
    sim.run(100)
    assert [d for d, _ in got] == [1, 2]
    assert got[0][1] == pytest.approx(11.22)
    assert got[1][1] == pytest.approx(22.42)


def test_sim_link_cancel_frees_the_link():
    sim = Simulator()
    link = SimLink(sim, LinkModel(latency=0.0))
    got = []
    first = link.send(Sized(14 * MB, device_id=1), lambda m: got.append(1))
    queued = link.send(Sized(14 * MB, device_id=2), lambda m: got.append(2))
    link.send(Sized(MB, device_id=3), lambda m: got.append((3, sim.now)))
    sim.at(1.0, lambda: link.cancel(first))
    assert link.cancel(queued)
    sim.run(100)
    assert got == [(3, pytest.approx(1.8))]
    assert not link.cancel(first)


def test_independent_links_overlap():
    sim = Simulator()
    got = []
    for dev in range(8):
        link = SimLink(sim, LinkModel())
        link.send(Sized(14 * MB, device_id=dev), lambda m: got.append(sim.now))
    sim.run(100)
    assert got == [pytest.approx(11.22)] * 8


def test_closed_link_raises():
    sim = Simulator()
    link = SimLink(sim, LinkModel())
    link.closed = True
    with pytest.raises(ChannelClosed):
        link.send(ModelRequest(path=PATH), print)


# sockets --------------------------------------------------------------------

def test_socket_bridge_relays_and_assigns_ids():
    bridge = SocketBridge()
    try:
        ids = [bridge.connect(), bridge.connect()]
        assert ids == [1, 2]
        msgs = [ModelRequest(device_id=1, path=PATH),
                WindowReport(device_id=1, window_id=3, path=PATH, accuracy=0.5),
                DomainVerdict(device_id=1, shift_confirmed=True, path=PATH, labels=(1, 2))]
        out = [bridge.relay(1, "up", msgs[0]), bridge.relay(1, "up", msgs[1]),
               bridge.relay(2, "down", msgs[2])]
        assert out == msgs
        assert out[0] is not msgs[0]
        big = ModelDispatch(device_id=2, path=PATH, model=ExpertModel(PATH, size_bytes=2 * MB))
        assert bridge.relay(2, "down", big).model.same_as(big.model)
    finally:
        bridge.close()


def test_socket_bridge_closed_peer():
    bridge = SocketBridge()
    dev = bridge.connect()
    bridge._server_side[dev].close()
    with pytest.raises((ChannelClosed, OSError)):
        bridge.relay(dev, "up", ModelRequest(device_id=dev, path=PATH))
    bridge.close()


def test_frames_with_struct_garbage_raise_decode_error():
    raw = HEADER.pack(MAGIC, 6, 1, 3) + b"abc"
    with pytest.raises(DecodeError):
        decode_frame(raw)
    raw = HEADER.pack(MAGIC, 4, 1, 5) + struct.pack(">BI", 0, 9)
    with pytest.raises(DecodeError):
        decode_frame(raw)
