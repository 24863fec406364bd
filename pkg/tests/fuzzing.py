"""Frame corpus and mutators shared by the protocol tests and the acceptance suite."""
import numpy as np

from graybox.protocol.wire import ErrorCode, Message, MsgType, ProtocolError, decode, encode
from graybox.tensor import Tensor
from graybox.vault import build_vault


def corpus(seed=0):
    """One valid frame per message type, with small random tensors."""
    rng = np.random.default_rng(seed)
    f32 = lambda *d: Tensor(rng.normal(size=d).astype(np.float32))
    vault = build_vault(1)
    msgs = [
        Message(MsgType.DESCRIBE_REQ),
        Message(MsgType.DESCRIBE_RSP, descriptors=vault.list_entries()),
        Message(MsgType.EMBED_REQ, tensor=Tensor(np.array([[2, 3, 4]], dtype=np.float32))),
        Message(MsgType.EMBED_RSP, tensor=f32(1, 3, 8)),
        Message(MsgType.SESSION_OPEN),
        Message(MsgType.SESSION_ACK, session=77),
        Message(MsgType.FORWARD_REQ, session=77, text_free=1, items=[(0, f32(2, 3, 4, 4)), (2, f32(2, 5, 8))]),
        Message(MsgType.FORWARD_RSP, items=[("text-feature", f32(2, 8)), ("vision-feature", f32(2, 8))]),
        Message(MsgType.BACKWARD_REQ, session=77, items=[("vision-feature", f32(2, 8))]),
        Message(MsgType.BACKWARD_RSP, items=[(0, f32(2, 3, 4, 4))]),
        Message(MsgType.SESSION_CLOSE, session=77),
        Message(MsgType.ERROR, code=8, text="session 77 expired"),
    ]
    return [encode(m) for m in msgs]


def mutate(frame: bytes, rng) -> bytes:
    b = bytearray(frame)
    op = rng.integers(6)
    if op == 0 and b:  # flip bits
        for _ in range(rng.integers(1, 4)):
            i = rng.integers(len(b))
            b[i] ^= 1 << rng.integers(8)
    elif op == 1 and b:  # truncate
        del b[rng.integers(len(b)):]
    elif op == 2:  # insert junk
        i = rng.integers(len(b) + 1)
        b[i:i] = rng.integers(0, 256, rng.integers(1, 9)).astype(np.uint8).tobytes()
    elif op == 3 and len(b) > 1:  # delete a span
        i = rng.integers(len(b))
        del b[i : i + rng.integers(1, 9)]
    elif op == 4 and len(b) >= 9:  # overwrite the length or type field
        i = rng.integers(4, 9)
        b[i] = rng.integers(256)
    else:  # random byte overwrite
        for _ in range(rng.integers(1, 6)):
            if b:
                b[rng.integers(len(b))] = rng.integers(256)
    return bytes(b)


def fuzz(n=10_000, seed=0):
    """Decode ``n`` mutated frames; returns (protocol errors, clean decodes, crashes)."""
    rng = np.random.default_rng(seed)
    frames = corpus(seed)
    errors = ok = 0
    crashes = []
    for _ in range(n):
        data = mutate(frames[rng.integers(len(frames))], rng)
        try:
            decode(data)
            ok += 1
        except ProtocolError as e:
            errors += 1
            if e.offset is not None and not 0 <= e.offset <= len(data):
                crashes.append((data, f"offset {e.offset} outside frame"))
            elif e.code not in set(ErrorCode):
                crashes.append((data, f"unlisted error code {e.code}"))
        except Exception as e:  # anything else is a crash
            crashes.append((data, repr(e)))
    return errors, ok, crashes
