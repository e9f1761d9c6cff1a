"""Protocol messages exchanged between devices and aggregators.

Uplink messages (device to aggregator) carry ``dst=None``: a device transmits
within its current WAN and whichever aggregator serves that WAN receives it.
Downlink messages carry a device id as ``dst`` and backhaul messages an
aggregator address. ``msg_id`` is assigned by the engine at send time;
``reply_to`` links a response to the message that caused it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

from .core import DeviceId, MeterSample, NetworkAddress

Node = Union[DeviceId, NetworkAddress]


@dataclass(frozen=True, kw_only=True)
class Message:
    src: Node
    dst: Optional[Node] = None
    msg_id: int = 0
    reply_to: Optional[int] = None

    @property
    def kind(self) -> str:
        return type(self).__name__

    def summary(self) -> dict:
        return {}


@dataclass(frozen=True, kw_only=True)
class RegisterRequest(Message):
    device: DeviceId
    master: Optional[NetworkAddress] = None

    def summary(self) -> dict:
        return {"device": self.device, "master": self.master}


@dataclass(frozen=True, kw_only=True)
class RegisterResponse(Message):
    addr: NetworkAddress
    temporary: bool = False

    def summary(self) -> dict:
        return {"addr": self.addr, "temporary": self.temporary}


@dataclass(frozen=True, kw_only=True)
class RegisterReject(Message):
    reason: str = ""

    def summary(self) -> dict:
        return {"reason": self.reason}


@dataclass(frozen=True, kw_only=True)
class Report(Message):
    device: DeviceId
    samples: tuple[MeterSample, ...]

    def summary(self) -> dict:
        seqs = [s.seq for s in self.samples]
        return {"device": self.device, "n": len(seqs), "seq_lo": min(seqs, default=None), "seq_hi": max(seqs, default=None)}


@dataclass(frozen=True, kw_only=True)
class Ack(Message):
    through_seq: int

    def summary(self) -> dict:
        return {"through_seq": self.through_seq}


@dataclass(frozen=True, kw_only=True)
class Nack(Message):
    pass


@dataclass(frozen=True, kw_only=True)
class VerifyDeviceRequest(Message):
    device: DeviceId

    def summary(self) -> dict:
        return {"device": self.device}


@dataclass(frozen=True, kw_only=True)
class VerifyDeviceResponse(Message):
    device: DeviceId
    known: bool

    def summary(self) -> dict:
        return {"device": self.device, "known": self.known}


@dataclass(frozen=True, kw_only=True)
class ForwardConsumption(Message):
    device: DeviceId
    samples: tuple[MeterSample, ...]

    def summary(self) -> dict:
        seqs = [s.seq for s in self.samples]
        return {"device": self.device, "n": len(seqs), "seq_lo": min(seqs, default=None), "seq_hi": max(seqs, default=None)}


@dataclass(frozen=True, kw_only=True)
class ForwardAck(Message):
    device: DeviceId
    through_seq: int

    def summary(self) -> dict:
        return {"device": self.device, "through_seq": self.through_seq}


@dataclass(frozen=True, kw_only=True)
class RemoveMembership(Message):
    device: DeviceId

    def summary(self) -> dict:
        return {"device": self.device}


# Kinds that count as handshake control traffic on the device link.
HANDSHAKE_KINDS = frozenset({"Nack", "RegisterRequest", "RegisterResponse", "RegisterReject"})
