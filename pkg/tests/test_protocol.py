import socket
import struct
import threading
import time

import numpy as np
import pytest
from fuzzing import corpus, fuzz
from hypothesis import given, settings, strategies as st

from graybox.adapters import DGA_MASK, AdapterConfig, init_adapters
from graybox.harness import data as D
from graybox.protocol import (
    ErrorCode, ExposureLedger, Message, MsgType, ProtocolError, RemoteError, RemoteVaultClient, ServerLimits,
    VaultServer, audit_ledger, decode, encode, parse_addr, schema_weight_fields,
)
from graybox.protocol.ledger import LedgerEntry, conforms, parameter_block_lengths
from graybox.protocol.wire import HEADER, MAGIC, MAX_FRAME, SCHEMA, decode_exact, read_header
from graybox.tensor import Tensor
from graybox.training import LocalVaultClient, TrainConfig, TransportError, train
from graybox.training.loops import GrayboxPipeline
from graybox.vault import TEXT_EMBEDDINGS, TEXT_TOKEN_IDS, VISION_PIXELS, build_vault, prefix_entry_id


@pytest.fixture(scope="module")
def vault():
    return build_vault(5)


@pytest.fixture
def server(vault):
    with VaultServer(vault, "127.0.0.1:0") as srv:
        yield srv


@pytest.fixture
def client(server):
    with RemoteVaultClient(server.address) as c:
        yield c


def _raw(addr):
    host, port = parse_addr(addr)
    return socket.create_connection((host, port), timeout=10)


def _roundtrip(sock, frame):
    sock.sendall(frame)
    head = b""
    while len(head) < HEADER:
        head += sock.recv(HEADER - len(head))
    _, plen = read_header(head)
    body = b""
    while len(body) < plen:
        body += sock.recv(plen - len(body))
    return decode_exact(head + body)


# -- codec --------------------------------------------------------------------------------


class TestFraming:
    def test_describe_req_exact_bytes(self):
        # hand-assembled: magic, length=1 (the type byte, empty payload), type=1
        assert encode(Message(MsgType.DESCRIBE_REQ)) == b"GBX1" + b"\x01\x00\x00\x00" + b"\x01"

    def test_session_ack_exact_bytes(self):
        frame = encode(Message(MsgType.SESSION_ACK, session=0x0102030405060708))
        assert frame == b"GBX1" + struct.pack("<IB", 9, 6) + bytes([8, 7, 6, 5, 4, 3, 2, 1])

    def test_error_frame_layout(self):
        frame = encode(Message(MsgType.ERROR, code=8, text="é"))
        assert frame[9:] == b"\x08\x00" + "é".encode()

    @pytest.mark.parametrize("i", range(12))
    def test_corpus_roundtrip(self, i):
        frame = corpus()[i]
        msg, end = decode(frame)
        assert end == len(frame)
        assert encode(msg) == frame

    @pytest.mark.parametrize("i", range(12))
    def test_truncation_by_one_byte(self, i):
        frame = corpus()[i]
        with pytest.raises(ProtocolError) as e:
            decode(frame[:-1])
        assert e.value.offset is not None

    def test_bad_magic(self):
        frame = b"GBX2" + corpus()[0][4:]
        with pytest.raises(ProtocolError, match="magic") as e:
            decode(frame)
        assert e.value.offset == 0

    def test_oversize_length(self):
        frame = MAGIC + struct.pack("<IB", MAX_FRAME + 1, 1)
        with pytest.raises(ProtocolError) as e:
            decode(frame)
        assert e.value.code == ErrorCode.FRAME_TOO_LARGE and e.value.offset == 4

    def test_zero_length(self):
        with pytest.raises(ProtocolError):
            decode(MAGIC + struct.pack("<IB", 0, 1))

    def test_unknown_type(self):
        with pytest.raises(ProtocolError) as e:
            decode(MAGIC + struct.pack("<IB", 1, 200))
        assert e.value.code == ErrorCode.UNKNOWN_MSG_TYPE

    def test_trailing_payload_bytes(self):
        frame = corpus()[5]  # SESSION_ACK
        padded = MAGIC + struct.pack("<I", 10) + frame[8:] + b"\x00"
        with pytest.raises(ProtocolError, match="trailing"):
            decode(padded)

    def test_duplicate_entry_rejected(self):
        t = Tensor(np.zeros((1, 2), np.float32))
        frame = encode(Message(MsgType.BACKWARD_RSP, items=[(0, t), (0, t)]))
        with pytest.raises(ProtocolError, match="duplicate"):
            decode(frame)

    def test_bad_utf8(self):
        frame = MAGIC + struct.pack("<IBH", 4, 12, 9) + b"\xff"
        with pytest.raises(ProtocolError, match="utf-8"):
            decode(frame)

    def test_two_frames_back_to_back(self):
        a, b = corpus()[0], corpus()[5]
        m1, off = decode(a + b)
        m2, end = decode(a + b, off)
        assert (m1.type, m2.type, end) == (MsgType.DESCRIBE_REQ, MsgType.SESSION_ACK, len(a + b))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**64 - 1), st.integers(0, 255), st.lists(
        st.tuples(st.integers(0, 255), st.lists(st.integers(1, 4), min_size=0, max_size=3)),
        max_size=4, unique_by=lambda x: x[0]))
    def test_forward_req_roundtrip(self, session, text_free, spec):
        rng = np.random.default_rng(0)
        items = [(eid, Tensor(rng.normal(size=dims).astype(np.float32))) for eid, dims in spec]
        frame = encode(Message(MsgType.FORWARD_REQ, session=session, text_free=text_free, items=items))
        msg = decode_exact(frame)
        assert msg.session == session and msg.text_free == text_free
        assert [k for k, _ in msg.items] == [k for k, _ in items]
        for (_, a), (_, b) in zip(msg.items, items):
            assert a.data.tobytes() == b.data.tobytes()
        assert encode(msg) == frame

    @settings(max_examples=60, deadline=None)
    @given(st.binary(max_size=64))
    def test_arbitrary_bytes_never_crash(self, blob):
        try:
            decode(MAGIC + struct.pack("<I", len(blob) + 1) + blob[:1] + blob[1:] + b"\x00")
        except ProtocolError:
            pass

    def test_fuzz_small(self):
        errors, ok, crashes = fuzz(1000, seed=3)
        assert crashes == [] and errors > 0


class TestSchema:
    def test_every_message_type_has_a_schema(self):
        assert set(SCHEMA) == set(MsgType)

    def test_no_weight_bearing_fields(self):
        assert schema_weight_fields() == {}

    def test_weight_field_would_be_flagged(self, monkeypatch):
        monkeypatch.setitem(SCHEMA, MsgType.EMBED_RSP, ("parameters",))
        assert MsgType.EMBED_RSP in schema_weight_fields()


# -- server ------------------------------------------------------------------------------


def _batch(n=4, seed=0):
    ds = D.generate_dataset(32, 1, D.AFFINE_SHIFT, seed=seed)
    return ds.train.images[:n], ds.train.captions[:n]


class TestServer:
    def test_describe_matches_vault(self, vault, client):
        assert client.describe() == vault.list_entries()

    def test_embed_matches_vault(self, vault, client):
        ids = np.array([[2, 3, 4, 1]])
        assert np.array_equal(client.embed(ids).data, vault.embed_tokens(ids).data)

    def test_forward_bit_identical(self, vault, client):
        images, captions = _batch()
        entries = {VISION_PIXELS: Tensor(images), TEXT_TOKEN_IDS: Tensor(captions.astype(np.float32))}
        s = vault.open_session()
        local = vault.forward(s, entries)
        vault.close_session(s)
        rs = client.open_session()
        remote = client.forward(rs, entries)
        client.close_session(rs)
        assert set(local) == set(remote)
        for k in local:
            assert local[k].data.tobytes() == remote[k].data.tobytes()

    def test_backward_bit_identical_and_shape_law(self, vault, client, rng):
        images, captions = _batch()
        emb = vault.embed_tokens(captions).data
        prefix = rng.normal(0, 0.02, (2, 64)).astype(np.float32)
        entries = {VISION_PIXELS: Tensor(images), TEXT_EMBEDDINGS: Tensor(emb),
                   prefix_entry_id("text", 1): Tensor(prefix)}
        seeds = {"vision-feature": rng.normal(size=(4, 64)).astype(np.float32),
                 "text-feature": rng.normal(size=(4, 64)).astype(np.float32)}
        s = vault.open_session()
        vault.forward(s, entries)
        local = vault.backward(s, seeds)
        rs = client.open_session()
        client.forward(rs, entries)
        remote = client.backward(rs, {k: Tensor(v) for k, v in seeds.items()})
        assert set(remote) == set(entries)
        for k, t in remote.items():
            assert t.dims == entries[k].dims
            assert t.data.tobytes() == local[k].data.tobytes()

    def test_backward_entries_are_grad_capable_subset(self, client):
        images, captions = _batch()
        rs = client.open_session()
        outs = client.forward(rs, {VISION_PIXELS: Tensor(images), TEXT_TOKEN_IDS: Tensor(captions.astype(np.float32))})
        grads = client.backward(rs, {k: Tensor(np.ones(v.dims, np.float32)) for k, v in outs.items()})
        assert set(grads) == {VISION_PIXELS}

    def test_unknown_session_is_stale(self, client):
        with pytest.raises(RemoteError) as e:
            client.backward(type("S", (), {"session_id": 987654321, "done": False})(), {})
        assert e.value.code == ErrorCode.STALE_SESSION

    def test_second_backward_is_stale(self, client):
        images, _ = _batch()
        rs = client.open_session()
        client.forward(rs, {VISION_PIXELS: Tensor(images)})
        g = {"vision-feature": Tensor(np.ones((4, 64), np.float32))}
        client.backward(rs, g)
        with pytest.raises(RemoteError) as e:
            client.backward(rs, g)
        assert e.value.code == ErrorCode.STALE_SESSION

    def test_expired_session_is_stale(self, vault):
        with VaultServer(vault, "127.0.0.1:0", ServerLimits(idle_timeout=0.05)) as srv, \
                RemoteVaultClient(srv.address) as c:
            images, _ = _batch()
            rs = c.open_session()
            c.forward(rs, {VISION_PIXELS: Tensor(images)})
            deadline = time.monotonic() + 5
            while srv.open_session_count() and time.monotonic() < deadline:
                time.sleep(0.02)
            assert srv.open_session_count() == 0
            with pytest.raises(RemoteError) as e:
                c.backward(rs, {"vision-feature": Tensor(np.ones((4, 64), np.float32))})
            assert e.value.code == ErrorCode.STALE_SESSION

    def test_sweep_frees_vault_sessions(self, vault):
        with VaultServer(vault, "127.0.0.1:0", ServerLimits(idle_timeout=3600)) as srv, \
                RemoteVaultClient(srv.address) as c:
            before = vault._open
            c.open_session()
            assert vault._open == before + 1
            assert srv.sweep(now=time.monotonic() + 7200) == 1
            assert vault._open == before

    def test_vault_errors_map_to_codes(self, client):
        rs = client.open_session()
        with pytest.raises(RemoteError) as e:
            client.forward(rs, {99: Tensor(np.zeros((1, 2), np.float32))})
        assert e.value.code == ErrorCode.UNKNOWN_ENTRY
        rs = client.open_session()
        with pytest.raises(RemoteError) as e:
            client.forward(rs, {VISION_PIXELS: Tensor(np.zeros((1, 3, 8, 8), np.float32))})
        assert e.value.code == ErrorCode.SHAPE_MISMATCH

    def test_busy_is_a_transport_error(self, vault):
        with VaultServer(vault, "127.0.0.1:0", ServerLimits(max_sessions_per_conn=1)) as srv, \
                RemoteVaultClient(srv.address) as c:
            c.open_session()
            with pytest.raises(TransportError):
                c.open_session()

    def test_unknown_type_connection_survives(self, server):
        with _raw(server.address) as s:
            reply = _roundtrip(s, MAGIC + struct.pack("<IB", 1, 99))
            assert reply.type == MsgType.ERROR and reply.code == ErrorCode.UNKNOWN_MSG_TYPE
            reply = _roundtrip(s, encode(Message(MsgType.DESCRIBE_REQ)))
            assert reply.type == MsgType.DESCRIBE_RSP

    def test_response_type_from_client_rejected(self, server):
        with _raw(server.address) as s:
            reply = _roundtrip(s, encode(Message(MsgType.SESSION_ACK, session=1)))
            assert reply.code == ErrorCode.UNEXPECTED_MESSAGE

    def test_malformed_payload_connection_survives(self, server):
        with _raw(server.address) as s:
            reply = _roundtrip(s, MAGIC + struct.pack("<IB", 3, 11) + b"\x00\x00")
            assert reply.code == ErrorCode.MALFORMED_FRAME
            assert _roundtrip(s, encode(Message(MsgType.SESSION_OPEN))).type == MsgType.SESSION_ACK

    def test_bad_magic_isolated_from_other_clients(self, server, client):
        images, _ = _batch()
        rs = client.open_session()
        client.forward(rs, {VISION_PIXELS: Tensor(images)})
        with _raw(server.address) as s:
            reply = _roundtrip(s, b"JUNK" + b"\x00" * 5)
            assert reply.type == MsgType.ERROR
        grads = client.backward(rs, {"vision-feature": Tensor(np.ones((4, 64), np.float32))})
        assert grads[VISION_PIXELS].dims == (4, 3, 32, 32)

    def test_server_down_raises_transport_error(self, vault):
        srv = VaultServer(vault, "127.0.0.1:0").start()
        addr = srv.address
        srv.stop()
        with pytest.raises(TransportError):
            RemoteVaultClient(addr, timeout=2).describe()

    def test_gbx_addr_env(self, monkeypatch):
        monkeypatch.setenv("GBX_ADDR", "10.1.2.3:9999")
        assert parse_addr(None) == ("10.1.2.3", 9999)
        assert parse_addr("localhost:12") == ("localhost", 12)


@pytest.fixture(scope="module")
def data():
    return D.generate_dataset(64, 32, D.AFFINE_SHIFT, seed=1)


class TestTraining:
    @pytest.mark.parametrize("method", ["dga", "lga", "lp"])
    def test_remote_history_bit_identical(self, vault, server, data, method):
        cfg = TrainConfig(method=method, lr0=1e-3, epochs=2, seed=4)
        local = train(cfg, data, client=LocalVaultClient(vault))
        with RemoteVaultClient(server.address) as c:
            remote = train(cfg, data, client=c)
        assert local.history.to_text() == remote.history.to_text()
        for k, v in local.adapters.params.items():
            assert v.data.tobytes() == remote.adapters.params[k].data.tobytes()

    def test_two_concurrent_clients(self, vault, server, data):
        before = vault.checksum
        results = {}

        def run(name, mask):
            with RemoteVaultClient(server.address) as c:
                results[name] = train(TrainConfig(method="dga", lr0=1e-3, epochs=3, mask=mask), data, client=c)

        threads = [threading.Thread(target=run, args=("full", DGA_MASK)),
                   threading.Thread(target=run, args=("vis", frozenset({"in-vis"})))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert vault.checksum == before
        for r in results.values():
            losses = r.history.series("loss", "train")
            assert min(losses) < losses[0]

    def test_one_step_ledger(self, vault, server, data):
        with RemoteVaultClient(server.address) as c:
            pipe = GrayboxPipeline(c, AdapterConfig(mask=DGA_MASK))
            adapters = init_adapters(pipe.config, seed=0)
            images, captions = data.train.images[:32], data.train.captions[:32]
            pipe.step(adapters, images, captions)  # warms the embedding cache
            n = len(c.ledger)
            pipe.step(adapters, images, captions)
            step = c.ledger.entries()[n:]
        carrying = [e.type for e in step if e.shapes]
        assert sorted(carrying) == sorted([MsgType.FORWARD_REQ, MsgType.FORWARD_RSP,
                                           MsgType.BACKWARD_REQ, MsgType.BACKWARD_RSP])


# -- ledger and audit ------------------------------------------------------------------


class TestLedger:
    def test_replay_reconstructs_bytes(self, vault, server):
        with RemoteVaultClient(server.address) as c:
            train(TrainConfig(method="dga", lr0=1e-3, epochs=1), D.generate_dataset(32, 32, D.AFFINE_SHIFT, seed=2),
                  client=c)
            text = c.ledger.to_text()
            replay = ExposureLedger.from_text(text)
            assert replay.to_text() == text
            assert replay.total_bytes() == c.ledger.total_bytes()
            client_bytes = c.ledger.total_bytes()
        conn_ids = {e.conn for e in server.ledger.entries()}
        assert client_bytes == server.ledger.total_bytes() and len(conn_ids) == 1

    def test_line_format(self):
        e = LedgerEntry(3, "c2s", MsgType.FORWARD_REQ, 100, ((32, 3, 32, 32), (32, 6)), ("0", "1"))
        assert e.line() == "conn=3 dir=c2s type=FORWARD_REQ bytes=100 shapes=32x3x32x32;32x6 entries=0,1"
        assert LedgerEntry.parse(e.line()) == e


class TestAudit:
    def _ledger(self, vault, method, **kw):
        led = ExposureLedger()
        with VaultServer(vault, "127.0.0.1:0", ledger=led) as srv, RemoteVaultClient(srv.address) as c:
            train(TrainConfig(method=method, lr0=1e-3, epochs=1, **kw), D.generate_dataset(32, 32, D.NO_SHIFT),
                  client=c)
        return led

    def test_empty_ledger_empty_report(self, vault):
        rep = audit_ledger(ExposureLedger(), vault)
        assert rep.empty and rep.to_text() == "" and rep.row("dga") == ""

    def test_dga_row(self, vault):
        rep = audit_ledger(self._ledger(vault, "dga"), vault)
        assert rep.gradients_exposed and not rep.weights_exposed
        assert rep.layer_sizes_exposed == "input-entry-only"
        assert rep.row("dga") == "dga: gradients=exposed weights=hidden layer-sizes=input-entry-only"
        assert rep.nonconforming_frames == 0 and rep.unexplained_collisions == []

    def test_lga_row_partial(self, vault):
        rep = audit_ledger(self._ledger(vault, "lga", lga_layers=(0, 2)), vault)
        assert rep.layer_sizes_exposed == "partial" and rep.exposed_layer_dims == [(64,)]
        assert not rep.weights_exposed

    def test_lp_exposes_no_gradients(self, vault):
        rep = audit_ledger(self._ledger(vault, "lp"), vault)
        assert not rep.gradients_exposed
        assert "BACKWARD_REQ" not in rep.bytes_by_type

    def test_byte_totals(self, vault):
        led = self._ledger(vault, "dga")
        rep = audit_ledger(led, vault)
        assert sum(rep.bytes_by_type.values()) == led.total_bytes()

    def test_weight_shaped_frame_is_flagged(self, vault):
        # negative control: a frame whose payload is exactly a parameter record run
        # and whose tensor does not fit any field gets reported
        target = min(n for n in parameter_block_lengths(vault) if n > 100)
        led = ExposureLedger()
        led._entries.append(LedgerEntry(1, "s2c", MsgType.EMBED_RSP, HEADER + target, ((192, 64),), ()))
        rep = audit_ledger(led, vault)
        assert rep.weights_exposed and rep.unexplained_collisions

    @pytest.mark.parametrize("shape,ok", [((4, 64), True), ((64,), True), ((4, 63), False), ((2, 2, 64), False)])
    def test_conformance_of_features(self, vault, shape, ok):
        assert conforms(LedgerEntry(1, "s2c", MsgType.FORWARD_RSP, 0, (shape,), ("vision-feature",)), vault) is ok

    @pytest.mark.parametrize("shape,ok", [((2, 64), True), ((65, 64), False), ((2, 32), False)])
    def test_conformance_of_prefix(self, vault, shape, ok):
        key = str(prefix_entry_id("vision", 0))
        assert conforms(LedgerEntry(1, "c2s", MsgType.FORWARD_REQ, 0, (shape,), (key,)), vault) is ok
