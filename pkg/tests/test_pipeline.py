"""MIDI parsing/writing and corpus pipeline oracles.

Hand-built SMF byte strings pin the parser's tempo integration, running
status, FIFO pairing and channel/program handling; midigen cross-checks
it against an independently computed ground truth on random files.
"""

import struct

import numpy as np
import pytest

from ncrd.events import Event, EventStream, instrument_kind
from ncrd.midifile import (
    DEFAULT_TEMPO,
    MidiNote,
    parse_smf,
    read_varint,
    write_smf,
    write_varint,
)
from ncrd.pipeline import (
    MIN_GAP,
    AugmentConfig,
    NoteRecord,
    anonymize,
    augment,
    flatten,
    load_dataset,
    notes_from_midi,
    preprocess,
    read_ncrd,
    render_midi,
    trim_overlaps,
    write_ncrd,
)
from midigen import (
    gap_violations,
    pairing_violations,
    random_midi,
    seconds_at,
    vlq,
)


def smf(tracks, fmt=1, division=480):
    out = b"MThd" + struct.pack(">IHHH", 6, fmt, len(tracks), division)
    for t in tracks:
        body = b"".join(t) + vlq(0) + bytes([0xFF, 0x2F, 0x00])
        out += b"MTrk" + struct.pack(">I", len(body)) + body
    return out


def tempo_meta(delta, tempo):
    return vlq(delta) + bytes([0xFF, 0x51, 0x03]) + tempo.to_bytes(3, "big")


# -- varint --------------------------------------------------------------------


def test_varint_round_trip():
    for v in (0, 1, 127, 128, 16383, 16384, 0x0FFFFFFF):
        data = write_varint(v)
        back, i = read_varint(data, 0)
        assert back == v
        assert i == len(data)
    assert write_varint(0) == b"\x00"
    assert write_varint(128) == b"\x81\x00"
    with pytest.raises(ValueError):
        write_varint(-1)
    with pytest.raises(ValueError):
        read_varint(b"\xff\xff\xff\xff\xff", 0)


# -- parser, hand-built cases ----------------------------------------------------


def test_parse_simple_note_default_tempo():
    # 480 tpq at 120 bpm: one tick is 500000/(480e6) s
    track = [vlq(480) + bytes([0x90, 60, 100]), vlq(480) + bytes([0x80, 60, 64])]
    notes = parse_smf(smf([track], fmt=0))
    assert len(notes) == 1
    n = notes[0]
    assert (n.pitch, n.velocity, n.channel, n.program) == (60, 100, 0, 0)
    assert n.onset == pytest.approx(0.5, abs=1e-12)
    assert n.offset == pytest.approx(1.0, abs=1e-12)


def test_parse_tempo_change_mid_note():
    # 60 bpm for the first 480 ticks, then 120 bpm
    track = [
        tempo_meta(0, 1_000_000),
        vlq(0) + bytes([0x90, 60, 100]),
        tempo_meta(480, 500_000),
        vlq(480) + bytes([0x80, 60, 64]),
    ]
    notes = parse_smf(smf([track], fmt=0))
    assert notes[0].onset == pytest.approx(0.0)
    assert notes[0].offset == pytest.approx(1.5, abs=1e-12)


def test_parse_running_status():
    track = [
        vlq(0) + bytes([0x90, 60, 100]),
        vlq(10) + bytes([62, 100]),        # running 0x90
        vlq(10) + bytes([60, 0]),          # running NoteOn vel 0 = off
        vlq(10) + bytes([62, 0]),
    ]
    notes = parse_smf(smf([track], fmt=0))
    assert sorted(n.pitch for n in notes) == [60, 62]


def test_parse_noteon_zero_velocity_is_off():
    track = [vlq(0) + bytes([0x90, 70, 90]), vlq(100) + bytes([0x90, 70, 0])]
    notes = parse_smf(smf([track], fmt=0))
    assert len(notes) == 1
    assert notes[0].velocity == 90


def test_parse_fifo_pairing_overlapping_same_pitch():
    track = [
        vlq(0) + bytes([0x90, 60, 10]),
        vlq(100) + bytes([0x90, 60, 20]),
        vlq(100) + bytes([0x80, 60, 0]),   # closes the FIRST open note
        vlq(100) + bytes([0x80, 60, 0]),
    ]
    notes = sorted(parse_smf(smf([track], fmt=0)), key=lambda n: n.onset)
    assert notes[0].velocity == 10
    assert notes[0].offset == pytest.approx(notes[1].onset + 100 * 500_000 / 480e6)
    assert notes[1].velocity == 20


def test_parse_dangling_note_closed_at_end():
    track = [vlq(0) + bytes([0x90, 55, 77]), vlq(960) + bytes([0xB0, 1, 1])]
    notes = parse_smf(smf([track], fmt=0))
    assert len(notes) == 1
    assert notes[0].offset == pytest.approx(1.0)  # track end time


def test_parse_program_change_per_channel():
    track = [
        vlq(0) + bytes([0xC0, 24]),
        vlq(0) + bytes([0xC1, 33]),
        vlq(0) + bytes([0x90, 60, 90]),
        vlq(0) + bytes([0x91, 62, 91]),
        vlq(0) + bytes([0xC0, 25]),            # applies to later onsets only
        vlq(10) + bytes([0x90, 64, 92]),
        vlq(100) + bytes([0x80, 60, 0]),
        vlq(0) + bytes([0x81, 62, 0]),
        vlq(0) + bytes([0x80, 64, 0]),
    ]
    notes = {n.pitch: n for n in parse_smf(smf([track], fmt=0))}
    assert notes[60].program == 24
    assert notes[62].program == 33
    assert notes[62].channel == 1
    assert notes[64].program == 25


def test_parse_multitrack_merge():
    tempo_track = [tempo_meta(0, 250_000)]
    notes_track = [vlq(480) + bytes([0x90, 60, 99]), vlq(480) + bytes([0x80, 60, 0])]
    notes = parse_smf(smf([tempo_track, notes_track], fmt=1))
    assert notes[0].onset == pytest.approx(0.25)
    assert notes[0].offset == pytest.approx(0.5)


def test_parse_rejects_bad_files():
    with pytest.raises(ValueError):
        parse_smf(b"")
    with pytest.raises(ValueError):
        parse_smf(b"RIFF" + b"\x00" * 20)
    with pytest.raises(ValueError):
        parse_smf(smf([[]], fmt=2))
    smpte = b"MThd" + struct.pack(">IHHH", 6, 0, 1, 0x8000 | (256 - 25) << 8 | 40)
    with pytest.raises(ValueError):
        parse_smf(smpte + b"MTrk" + struct.pack(">I", 4) + vlq(0) + bytes([0xFF, 0x2F, 0x00]))
    with pytest.raises(ValueError):
        parse_smf(b"MThd" + struct.pack(">IHHH", 6, 0, 1, 0)
                  + b"MTrk" + struct.pack(">I", 4) + vlq(0) + bytes([0xFF, 0x2F, 0x00]))


def test_parse_random_files_against_ground_truth():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        data, truth, tmap, division = random_midi(rng)
        notes = parse_smf(data)
        assert len(notes) == len(truth), f"seed {seed}"
        want = sorted(
            (t.channel, t.pitch, seconds_at(t.on_tick, tmap, division),
             seconds_at(t.off_tick, tmap, division), t.velocity, t.program)
            for t in truth)
        got = sorted((n.channel, n.pitch, n.onset, n.offset, n.velocity, n.program)
                     for n in notes)
        for w, g in zip(want, got):
            assert w[0] == g[0] and w[1] == g[1], f"seed {seed}"
            assert w[2] == pytest.approx(g[2], abs=1e-6), f"seed {seed}"
            assert w[3] == pytest.approx(g[3], abs=1e-6), f"seed {seed}"
            assert w[4:] == g[4:], f"seed {seed}"


# -- writer ----------------------------------------------------------------------


def test_write_smf_round_trip():
    messages = [
        (0.0, "program", 0, 5, 0),
        (0.0, "on", 0, 60, 100),
        (0.5, "on", 9, 40, 90),
        (1.0, "off", 0, 60, 0),
        (1.25, "off", 9, 40, 0),
    ]
    notes = sorted(parse_smf(write_smf(messages)), key=lambda n: n.channel)
    assert len(notes) == 2
    tick = 500_000 / 480e6
    assert notes[0].program == 5
    assert notes[0].onset == pytest.approx(0.0, abs=tick)
    assert notes[0].offset == pytest.approx(1.0, abs=tick)
    assert notes[1].channel == 9
    assert notes[1].onset == pytest.approx(0.5, abs=tick)


def test_write_smf_clamps_on_velocity():
    # velocity 0 on a note-on would read back as a note-off
    data = write_smf([(0.0, "on", 0, 60, 0), (0.1, "off", 0, 60, 0)])
    notes = parse_smf(data)
    assert len(notes) == 1
    assert notes[0].velocity == 1


def test_write_smf_rejects_unknown_kind():
    with pytest.raises(ValueError):
        write_smf([(0.0, "bend", 0, 0, 0)])


# -- note extraction ----------------------------------------------------------------


def test_notes_from_midi_instrument_mapping():
    track = [
        vlq(0) + bytes([0xC0, 24]),
        vlq(0) + bytes([0xC9, 10]),
        vlq(0) + bytes([0x90, 60, 90]),
        vlq(0) + bytes([0x99, 36, 100]),
        vlq(480) + bytes([0x80, 60, 0]),
        vlq(0) + bytes([0x89, 36, 0]),
    ]
    notes = {n.pitch: n for n in notes_from_midi(smf([track], fmt=0))}
    assert notes[60].instrument == 25          # melodic: program + 1
    assert notes[36].instrument == 129 + 10    # channel 10: program + 129
    assert instrument_kind(notes[36].instrument).is_drum


# -- trimming -----------------------------------------------------------------------


def test_trim_overlaps_shortens_and_drops():
    notes = [
        NoteRecord(1, 60, 0.0, 2.0, 80.0),       # overlaps the next onset
        NoteRecord(1, 60, 1.0, 3.0, 80.0),
        NoteRecord(1, 62, 0.0, 2.0, 80.0),       # different pitch: untouched
        NoteRecord(2, 60, 0.0, 2.0, 80.0),       # different instrument: untouched
        NoteRecord(1, 64, 0.0, 1.0, 80.0),       # fully covered: dropped
        NoteRecord(1, 64, 0.0005, 3.0, 80.0),
    ]
    out = trim_overlaps(notes)
    by_key = {}
    for n in out:
        by_key.setdefault((n.instrument, n.pitch), []).append(n)
    a, b = by_key[(1, 60)]
    assert a.offset == pytest.approx(1.0 - MIN_GAP)
    assert b.offset == 3.0
    assert by_key[(1, 62)][0].offset == 2.0
    assert by_key[(2, 60)][0].offset == 2.0
    assert len(by_key[(1, 64)]) == 1  # squeezed-out note dropped


def test_trim_overlaps_gap_at_least_min_gap():
    rng = np.random.default_rng(0)
    notes = []
    for _ in range(200):
        on = float(rng.uniform(0, 10))
        notes.append(NoteRecord(int(rng.integers(1, 4)), int(rng.integers(60, 63)),
                                on, on + float(rng.uniform(0, 2)),
                                float(rng.integers(1, 128))))
    out = trim_overlaps(notes)
    groups = {}
    for n in out:
        groups.setdefault((n.instrument, n.pitch), []).append(n)
    for group in groups.values():
        group.sort(key=lambda n: n.onset)
        for a, b in zip(group, group[1:]):
            assert b.onset - a.offset >= MIN_GAP - 1e-12
            assert a.offset > a.onset


# -- augmentation ---------------------------------------------------------------------


EXACT = AugmentConfig(tempo_range=(0.93, 0.93), transpose_range=(0, 0),
                      velocity_curve_sigma=0.0, jitter=0.0, dequantize=False)


def test_augment_tempo_scale_exact():
    rng = np.random.default_rng(1)
    notes = [NoteRecord(1, 60 + i, 0.5 * i, 0.5 * i + 0.4, 64.0) for i in range(10)]
    out = augment(notes, rng, EXACT)
    for before, after in zip(notes, out):
        assert after.onset == before.onset * 0.93       # bitwise, no jitter
        assert after.offset == before.offset * 0.93
        assert after.velocity == before.velocity
        assert after.pitch == before.pitch


def test_augment_transposes_melodic_not_drums():
    rng = np.random.default_rng(2)
    cfg = AugmentConfig(tempo_range=(1.0, 1.0), transpose_range=(4, 4),
                        velocity_curve_sigma=0.0, jitter=0.0, dequantize=False)
    notes = [NoteRecord(5, 60, 0.0, 1.0, 64.0),      # melodic
             NoteRecord(130, 40, 0.0, 1.0, 64.0),    # drum
             NoteRecord(260, 70, 0.0, 1.0, 64.0),    # anonymous melodic
             NoteRecord(5, 126, 2.0, 3.0, 64.0)]     # clamps at 127
    out = augment(notes, rng, cfg)
    got = {(n.instrument, n.onset): n.pitch for n in out}
    assert got[(5, 0.0)] == 64
    assert got[(130, 0.0)] == 40       # drums never transpose
    assert got[(260, 0.0)] == 74       # anonymous melodic still transposes
    assert got[(5, 2.0)] == 127


def test_augment_velocity_curve_preserves_endpoints():
    rng = np.random.default_rng(3)
    cfg = AugmentConfig(tempo_range=(1.0, 1.0), transpose_range=(0, 0),
                        velocity_curve_sigma=1.0, jitter=0.0, dequantize=False)
    notes = [NoteRecord(1, 60, 0.0, 1.0, 127.0), NoteRecord(1, 61, 0.0, 1.0, 64.0)]
    for _ in range(20):
        out = augment(notes, rng, cfg)
        assert out[0].velocity == 127.0     # fixed point of the power curve
        assert 0.0 < out[1].velocity <= 127.0


def test_augment_dequantize_stays_legal():
    rng = np.random.default_rng(4)
    cfg = AugmentConfig(tempo_range=(1.0, 1.0), transpose_range=(0, 0),
                        velocity_curve_sigma=0.0, jitter=0.0, dequantize=True)
    notes = [NoteRecord(1, 60, 0.0, 1.0, float(v)) for v in range(1, 128)]
    for _ in range(5):
        out = augment(notes, rng, cfg)
        for before, after in zip(notes, out):
            assert 0.5 <= after.velocity <= 127.0
            assert abs(after.velocity - before.velocity) <= 0.5 + 1e-12


def test_augment_never_inverts_notes():
    rng = np.random.default_rng(5)
    notes = [NoteRecord(1, 60, 0.001, 0.0015, 64.0)]  # shorter than the jitter
    for _ in range(50):
        out = augment(notes, rng, AugmentConfig())
        assert out[0].offset > out[0].onset
        assert out[0].onset >= 0.0


# -- anonymization ------------------------------------------------------------------


def test_anonymize_probability_one_remaps_all():
    rng = np.random.default_rng(6)
    notes = [NoteRecord(5, 60, 0.0, 1.0, 64.0), NoteRecord(5, 62, 1.0, 2.0, 64.0),
             NoteRecord(130, 40, 0.0, 1.0, 64.0), NoteRecord(258, 70, 0.0, 1.0, 64.0)]
    out = anonymize(notes, rng, p=1.0)
    assert 257 <= out[0].instrument <= 264
    assert out[0].instrument == out[1].instrument   # consistent within sequence
    assert 265 <= out[2].instrument <= 272          # drum kind preserved
    assert out[3].instrument == 258                 # already anonymous: untouched


def test_anonymize_probability_zero_identity():
    notes = [NoteRecord(5, 60, 0.0, 1.0, 64.0)]
    out = anonymize(notes, np.random.default_rng(7), p=0.0)
    assert out[0].instrument == 5


# -- flattening ---------------------------------------------------------------------


def test_flatten_offs_before_ons_at_ties():
    notes = [NoteRecord(1, 60, 0.0, 1.0, 80.0), NoteRecord(1, 60, 1.5, 2.0, 70.0),
             NoteRecord(2, 64, 1.0, 1.5, 90.0)]
    s = flatten(notes)
    kinds = [(e.instrument, e.pitch, e.velocity > 0) for e in s.events]
    # at t=1.0 the off of (1,60) precedes the on of (2,64)
    assert kinds[1] == (1, 60, False)
    assert kinds[2] == (2, 64, True)
    assert s.terminated
    assert all(e.time_delta >= 0 for e in s.events)
    assert pairing_violations(s) == []


def test_flatten_delta_times():
    notes = [NoteRecord(1, 60, 0.25, 0.75, 80.0)]
    s = flatten(notes, terminated=False)
    assert [e.time_delta for e in s.events] == [0.25, 0.5]
    assert not s.terminated


def test_pipeline_invariants_on_random_files():
    for seed in range(40):
        rng = np.random.default_rng(1000 + seed)
        data, _, _, _ = random_midi(rng)
        stream = flatten(trim_overlaps(notes_from_midi(data)))
        assert pairing_violations(stream) == [], f"seed {seed}"
        assert gap_violations(stream, MIN_GAP) == [], f"seed {seed}"


# -- packed stream format --------------------------------------------------------------


def test_ncrd_golden_bytes():
    s = EventStream([Event(1, 60, 0.0, 100.0), Event(1, 60, 0.5, 0.0)],
                    terminated=True)
    assert write_ncrd(s).hex() == (
        "4e4352440100010200000001003c000000000000c842"
        "01003c0000003f00000000")


def test_ncrd_round_trip_stable_bytes():
    rng = np.random.default_rng(8)
    events = [Event(int(rng.integers(1, 273)), int(rng.integers(0, 128)),
                    float(rng.uniform(0, 10)), float(rng.uniform(0, 127)))
              for _ in range(50)]
    s = EventStream(events, terminated=True)
    b1 = write_ncrd(s)
    s2 = read_ncrd(b1)
    assert write_ncrd(s2) == b1            # byte-stable round trip
    assert s2.terminated
    assert len(s2.events) == 50
    for a, b in zip(events, s2.events):
        assert (a.instrument, a.pitch) == (b.instrument, b.pitch)
        assert b.time_delta == pytest.approx(a.time_delta, rel=1e-6)
        assert b.velocity == pytest.approx(a.velocity, rel=1e-6)


def test_ncrd_rejects_garbage():
    with pytest.raises(ValueError):
        read_ncrd(b"MIDI" + b"\x00" * 16)
    s = EventStream([Event(1, 60, 0.0, 64.0)])
    good = write_ncrd(s)
    with pytest.raises(ValueError):
        read_ncrd(good[:10])
    bad_version = good[:4] + struct.pack("<HBI", 9, 0, 1) + good[11:]
    with pytest.raises(ValueError):
        read_ncrd(bad_version)


def test_ncrd_terminated_flag():
    s = EventStream([Event(1, 60, 0.0, 64.0)], terminated=False)
    assert not read_ncrd(write_ncrd(s)).terminated
    s.terminated = True
    assert read_ncrd(write_ncrd(s)).terminated


# -- directory pipeline -----------------------------------------------------------------


def test_preprocess_and_load(tmp_path):
    in_dir = tmp_path / "midi"
    out_dir = tmp_path / "packed"
    in_dir.mkdir()
    for i in range(2):
        data, _, _, _ = random_midi(np.random.default_rng(i))
        (in_dir / f"song{i}.mid").write_bytes(data)
    (in_dir / "broken.mid").write_bytes(b"MThd junk")
    (in_dir / "notes.txt").write_text("ignored")

    stats = preprocess(str(in_dir), str(out_dir), seed=0, augment_copies=1)
    assert stats["skipped"] == 1
    assert stats["files"] == 4          # 2 originals + 1 augmented copy each
    streams = load_dataset(str(out_dir))
    assert len(streams) == 4
    for s in streams:
        assert s.terminated
        assert pairing_violations(s) == []
        assert len(s.events) > 0
    assert stats["events"] == sum(len(s.events) for s in streams)


def test_load_dataset_single_file(tmp_path):
    s = EventStream([Event(1, 60, 0.0, 64.0)], terminated=True)
    p = tmp_path / "one.ncrd"
    p.write_bytes(write_ncrd(s))
    got = load_dataset(str(p))
    assert len(got) == 1
    assert got[0].events[0].pitch == 60


# -- rendering ---------------------------------------------------------------------------


def test_render_midi_channels_and_round_trip():
    events = [
        Event(25, 60, 0.0, 100.0),      # melodic program 24
        Event(139, 40, 0.25, 90.0),     # drum
        Event(260, 70, 0.25, 80.0),     # anonymous melodic: program 0
        Event(25, 60, 0.5, 0.0),
        Event(139, 40, 0.0, 0.0),
        Event(260, 70, 0.25, 0.0),
    ]
    data = render_midi(EventStream(events, terminated=True))
    notes = {n.pitch: n for n in parse_smf(data)}
    assert notes[40].channel == 9
    assert notes[60].channel != 9
    assert notes[70].channel != 9
    assert notes[60].program == 24
    assert notes[70].program == 0
    # kit identity and anonymity are lossy, program/channel mapping is not
    back = sorted({n.instrument for n in notes_from_midi(data)})
    assert back == [1, 25, 129]
    # timing survives the tick grid
    assert notes[60].onset == pytest.approx(0.0, abs=0.002)
    assert notes[40].onset == pytest.approx(0.25, abs=0.002)
    assert notes[60].offset == pytest.approx(1.0, abs=0.002)


def test_render_midi_closes_held_notes():
    events = [Event(1, 60, 0.0, 100.0)]     # never released
    notes = parse_smf(render_midi(EventStream(events)))
    assert len(notes) == 1
    assert notes[0].offset >= notes[0].onset


def test_render_midi_many_instruments_reuse_channels():
    events = []
    for i in range(20):                      # more parts than channels
        events.append(Event(1 + i, 30 + i, 0.01, 64.0))
    for i in range(20):
        events.append(Event(1 + i, 30 + i, 0.01, 0.0))
    notes = parse_smf(render_midi(EventStream(events)))
    assert len(notes) == 20
    assert all(n.channel != 9 for n in notes)
