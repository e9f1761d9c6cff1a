import contextlib
import hashlib

from hypothesis import strategies as st

from gridmeter.core import Ledger, MeterSample, append_block

addresses = st.text(alphabet="ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789-_", min_size=1, max_size=12)


@st.composite
def samples(draw, device=None):
    dev = draw(st.integers(0, 2**32)) if device is None else device
    start = draw(st.integers(0, 10**9))
    length = draw(st.integers(1, 10**6))
    energy = draw(st.integers(0, 10**9)) / 1e6  # exact microjoule values
    return MeterSample(dev, draw(st.integers(0, 10**6)), start, start + length, energy)


@st.composite
def ledgers(draw, min_blocks=1, max_blocks=8):
    addr = draw(addresses)
    ledger = Ledger()
    t = 0
    for _ in range(draw(st.integers(min_blocks, max_blocks))):
        t += draw(st.integers(0, 10**6))
        ledger = append_block(ledger, draw(st.lists(samples(), max_size=4)), t, addr)
    return ledger


def oracle_first_bad(records):
    """Independent chain check over raw ``(body, stored_hash)`` records.

    Reads the index and prev_hash straight from fixed offsets of the body.
    """
    prev = bytes(32)
    for k, (body, stored) in enumerate(records):
        if hashlib.sha256(body).digest() != stored:
            return k
        if int.from_bytes(body[:8], "big") != k or body[8:40] != prev:
            return k
        if k == 0 and int.from_bytes(body[40:44], "big") != 0:
            return k
        prev = stored
    return None


# -- acceptance reporting -----------------------------------------------------------
#
# Each acceptance test wraps its checks in ``criterion(n, title)``; the outcome is
# printed as one PASS/FAIL line per criterion at the end of the session.

ACCEPTANCE: dict[int, tuple[bool, str, str]] = {}


@contextlib.contextmanager
def criterion(number, title):
    info = {"detail": ""}
    try:
        yield info
    except BaseException as exc:
        ACCEPTANCE[number] = (False, title, f"{info['detail']} {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}".strip())
        print(f"[FAIL] criterion {number}: {title}")
        raise
    ACCEPTANCE[number] = (True, title, info["detail"])
    print(f"[PASS] criterion {number}: {title} {info['detail']}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n}. {title}: {detail}")
