"""Standard MIDI File export/import for four-voice pianorolls.

Writes type 1 files: a tempo track followed by one track per voice, top voice first.
Consecutive identical pitches within a voice merge into one held note. The writer is
fully deterministic, so identical rolls produce identical bytes.
"""

from __future__ import annotations

import struct

import numpy as np

from .pianoroll import Pianoroll, MIN_PITCH, NUM_PITCHES

TICKS_PER_QUARTER = 480

# General MIDI programs per voice, brightest on top.
VOICE_PROGRAMS = (73, 71, 68, 70)


def _varint(value):
    """MIDI variable-length quantity."""
    if value < 0:
        raise ValueError("negative delta time")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def _read_varint(data, pos):
    value = 0
    while True:
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos


def _track_chunk(events):
    """events: list of (absolute_tick, bytes). Returns a complete MTrk chunk."""
    events = sorted(events, key=lambda e: e[0])
    body = bytearray()
    tick = 0
    for at, payload in events:
        body += _varint(at - tick)
        body += payload
        tick = at
    body += _varint(0) + b"\xff\x2f\x00"  # end of track
    return b"MTrk" + struct.pack(">I", len(body)) + bytes(body)


def merged_notes(voice):
    """Collapse a per-step pitch sequence into (start_step, end_step, pitch) runs."""
    notes = []
    start = 0
    for t in range(1, len(voice) + 1):
        if t == len(voice) or voice[t] != voice[start]:
            notes.append((start, t, int(voice[start])))
            start = t
    return notes


def to_midi(roll, path, tempo_qpm=120.0):
    """Write the roll as a type 1 MIDI file, one track per voice."""
    if tempo_qpm <= 0:
        raise ValueError("tempo must be positive")
    step_ticks = TICKS_PER_QUARTER // roll.resolution
    pitches = roll.data.argmax(axis=2) + roll.pitch_offset

    chunks = []
    tempo = round(60_000_000 / tempo_qpm)
    chunks.append(_track_chunk([(0, b"\xff\x51\x03" + struct.pack(">I", tempo)[1:])]))

    for i in range(roll.instruments):
        channel = i % 16
        events = [(0, bytes([0xC0 | channel, VOICE_PROGRAMS[i % len(VOICE_PROGRAMS)]]))]
        for start, end, pitch in merged_notes(pitches[i]):
            events.append((start * step_ticks, bytes([0x90 | channel, pitch, 100])))
            events.append((end * step_ticks, bytes([0x80 | channel, pitch, 0])))
        chunks.append(_track_chunk(events))

    header = b"MThd" + struct.pack(">IHHH", 6, 1, len(chunks), TICKS_PER_QUARTER)
    with open(path, "wb") as fh:
        fh.write(header + b"".join(chunks))


def midi_to_roll(path, resolution, pitch_offset=MIN_PITCH, num_pitches=NUM_PITCHES):
    """Read a file written by to_midi back into a Pianoroll at the same resolution."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != b"MThd":
        raise ValueError("not a MIDI file")
    _, fmt, ntracks, division = struct.unpack(">IHHH", data[4:14])
    step_ticks = division // resolution
    pos = 14

    voices = []
    for _ in range(ntracks):
        if data[pos:pos + 4] != b"MTrk":
            raise ValueError("bad track chunk")
        length = struct.unpack(">I", data[pos + 4:pos + 8])[0]
        body = data[pos + 8:pos + 8 + length]
        pos += 8 + length
        notes = _parse_track_notes(body)
        if notes:
            voices.append(notes)

    if not voices:
        raise ValueError("no note events found")
    total_steps = max(end for notes in voices for _, end, _ in notes) // step_ticks
    roll = np.zeros((len(voices), total_steps, num_pitches), dtype=np.uint8)
    for i, notes in enumerate(voices):
        for start, end, pitch in notes:
            roll[i, start // step_ticks:end // step_ticks, pitch - pitch_offset] = 1
    return Pianoroll(roll, pitch_offset=pitch_offset, resolution=resolution)


def _parse_track_notes(body):
    """(start_tick, end_tick, pitch) triples from one track; meta/sysex skipped."""
    notes = []
    active = {}
    tick = 0
    pos = 0
    status = 0
    while pos < len(body):
        delta, pos = _read_varint(body, pos)
        tick += delta
        byte = body[pos]
        if byte & 0x80:
            status = byte
            pos += 1
        if status == 0xFF:  # meta
            pos += 1  # type
            length, pos = _read_varint(body, pos)
            pos += length
            continue
        if status in (0xF0, 0xF7):  # sysex
            length, pos = _read_varint(body, pos)
            pos += length
            continue
        kind = status & 0xF0
        if kind in (0x80, 0x90, 0xA0, 0xB0, 0xE0):
            a, b = body[pos], body[pos + 1]
            pos += 2
        elif kind in (0xC0, 0xD0):
            a, b = body[pos], 0
            pos += 1
        else:
            raise ValueError(f"unsupported status byte {status:#x}")
        if kind == 0x90 and b > 0:
            active[a] = tick
        elif kind == 0x80 or (kind == 0x90 and b == 0):
            if a in active:
                notes.append((active.pop(a), tick, a))
    return sorted(notes)
