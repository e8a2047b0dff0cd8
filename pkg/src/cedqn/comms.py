"""Same-step broadcast channel between robots."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

MSG_DIM = 6
# observation components copied into a message: position, capacity, crate offset, crate weight
PAYLOAD_FIELDS = (0, 1, 2, 4, 5, 6)


@dataclass
class Message:
    sender_id: int
    payload: np.ndarray

    @classmethod
    def from_observation(cls, sender_id, observation):
        return cls(sender_id, np.asarray(observation, dtype=np.float64)[list(PAYLOAD_FIELDS)])


@dataclass
class AggregatedMessage:
    vector: np.ndarray
    senders_count: int = 0

    @classmethod
    def empty(cls):
        return cls(np.zeros(MSG_DIM), 0)


class MessageBus:
    """Outbox for the current time step.  ``flush`` marks the step boundary."""

    def __init__(self):
        self.outbox: list[Message] = []

    def __len__(self):
        return len(self.outbox)

    def broadcast(self, message):
        payload = np.array(message.payload, dtype=np.float64)
        if payload.shape != (MSG_DIM,):
            raise ShapeError(f"message payload must have {MSG_DIM} components, got {payload.shape}")
        self.outbox.append(Message(message.sender_id, payload))

    def collect(self, receiver_id):
        """Mean of every payload not sent by ``receiver_id``."""
        received = [m.payload for m in self.outbox if m.sender_id != receiver_id]
        if not received:
            return AggregatedMessage.empty()
        return AggregatedMessage(np.mean(received, axis=0), len(received))

    def collect_all(self, n_receivers):
        """``collect`` for receivers ``0 .. n_receivers-1`` at once.

        Returns ``(vectors, counts)`` with shapes ``(n, MSG_DIM)`` and ``(n,)``.
        """
        if not self.outbox:
            return np.zeros((n_receivers, MSG_DIM)), np.zeros(n_receivers, dtype=np.int64)
        payloads = np.array([m.payload for m in self.outbox])
        senders = np.array([m.sender_id for m in self.outbox])
        mask = senders[None, :] != np.arange(n_receivers)[:, None]
        counts = mask.sum(axis=1)
        sums = mask.astype(np.float64) @ payloads
        return sums / np.maximum(counts, 1)[:, None], counts

    def flush(self):
        self.outbox.clear()


def broadcast(bus, message):
    bus.broadcast(message)


def collect(bus, receiver_id):
    return bus.collect(receiver_id)


def flush(bus):
    bus.flush()
