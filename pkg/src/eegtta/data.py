"""Segment containers, reaction-time labeling, ESB files, synthetic streams.

The ESB v1 container (little-endian) packs labeled EEG segments:

    magic "ESB1" | u16 version=1 | u32 record count | u16 channels |
    u32 time samples | u32 sample rate, then per record
    u16 subject | u16 session | u32 trial | f32 local_rt | f32 global_rt |
    i8 label (-1 unlabeled, 0 alert, 1 drowsy) | channels*time f32 payload
    row-major by channel.
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np

LABEL_UNLABELED = -1
LABEL_ALERT = 0
LABEL_DROWSY = 1

ESB_MAGIC = b"ESB1"
ESB_VERSION = 1


class EsbError(ValueError):
    code = "esb_error"


class EsbBadMagic(EsbError):
    code = "bad_magic"


class EsbVersionMismatch(EsbError):
    code = "version_mismatch"


class EsbTruncated(EsbError):
    code = "truncated_payload"


class EsbDimMismatch(EsbError):
    code = "dim_mismatch"


@dataclass(eq=False)
class SegmentRecord:
    subject: int
    session: int
    trial: int
    segment: np.ndarray          # (channels, time) float32
    local_rt: float
    global_rt: float
    label: int = LABEL_UNLABELED


# ---- reaction-time labeling -------------------------------------------------

def alert_rt_per_session(records, percentile=5.0):
    """Session-level alert RT: a low percentile of that session's local RTs."""
    by_session = {}
    for r in records:
        by_session.setdefault((r.subject, r.session), []).append(r.local_rt)
    return {key: float(np.percentile(np.array(rts), percentile))
            for key, rts in by_session.items()}


def label_segments(records, percentile=5.0, alert_rt=None):
    """Two-band labeling on local and global RT.

    Alert when both RTs fall under 1.5x the session's alert RT, drowsy when
    both exceed 2.5x; anything in between stays unlabeled. ``alert_rt`` can
    be a number or a {(subject, session): value} mapping to override the
    percentile rule.
    """
    for r in records:
        if r.local_rt <= 0 or r.global_rt <= 0:
            raise ValueError(f"non-positive RT in subject {r.subject} "
                             f"trial {r.trial}")
    if alert_rt is None:
        table = alert_rt_per_session(records, percentile)
    elif isinstance(alert_rt, dict):
        table = alert_rt
    else:
        table = {(r.subject, r.session): float(alert_rt) for r in records}
    out = []
    for r in records:
        base = table[(r.subject, r.session)]
        if r.local_rt < 1.5 * base and r.global_rt < 1.5 * base:
            label = LABEL_ALERT
        elif r.local_rt > 2.5 * base and r.global_rt > 2.5 * base:
            label = LABEL_DROWSY
        else:
            label = LABEL_UNLABELED
        out.append(replace(r, label=label))
    return out


def filter_sessions(records, min_per_class=50):
    """Drop thin sessions, then keep each subject's most balanced one.

    Returns (kept_records, chosen) where chosen maps subject -> session.
    Sessions need at least ``min_per_class`` samples of both classes; the
    balance score is |n_alert - n_drowsy| / (n_alert + n_drowsy), ties
    resolved toward the smaller session id.
    """
    counts = {}
    for r in records:
        if r.label in (LABEL_ALERT, LABEL_DROWSY):
            c = counts.setdefault((r.subject, r.session), [0, 0])
            c[r.label] += 1
    chosen = {}
    best = {}
    for (subject, session), (na, nd) in sorted(counts.items()):
        if na < min_per_class or nd < min_per_class:
            continue
        score = abs(na - nd) / (na + nd)
        if subject not in best or score < best[subject]:
            best[subject] = score
            chosen[subject] = session
    kept = [r for r in records if chosen.get(r.subject) == r.session]
    return kept, chosen


# ---- ESB container ----------------------------------------------------------

_HEADER = struct.Struct("<HIHII")          # version, count, channels, time, rate
_RECORD_META = struct.Struct("<HHIffb")    # subject, session, trial, rts, label


def write_esb(path, records, sample_rate=128):
    if records:
        shape = records[0].segment.shape
        if len(shape) != 2:
            raise EsbDimMismatch("segments must be (channels, time)")
        channels, time = shape
    else:
        channels, time = 0, 0
    parts = [ESB_MAGIC,
             _HEADER.pack(ESB_VERSION, len(records), channels, time,
                          sample_rate)]
    for r in records:
        seg = np.ascontiguousarray(r.segment, dtype="<f4")
        if seg.shape != (channels, time):
            raise EsbDimMismatch(
                f"record {r.trial} has shape {seg.shape}, "
                f"expected {(channels, time)}")
        if not np.all(np.isfinite(seg)):
            raise ValueError(f"record {r.trial} contains non-finite samples")
        parts.append(_RECORD_META.pack(r.subject, r.session, r.trial,
                                       r.local_rt, r.global_rt, r.label))
        parts.append(seg.tobytes())
    data = b"".join(parts)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)


def read_esb(path):
    """Returns (records, sample_rate); raises a distinct EsbError subclass
    per failure mode and never returns partial records."""
    with open(path, "rb") as f:
        buf = f.read()
    if len(buf) < 4 or buf[:4] != ESB_MAGIC:
        raise EsbBadMagic(f"{path}: bad ESB magic")
    if len(buf) < 4 + _HEADER.size:
        raise EsbTruncated(f"{path}: truncated header")
    version, count, channels, time, rate = _HEADER.unpack_from(buf, 4)
    if version != ESB_VERSION:
        raise EsbVersionMismatch(f"{path}: unsupported ESB version {version}")
    pos = 4 + _HEADER.size
    payload = 4 * channels * time
    records = []
    for _ in range(count):
        if pos + _RECORD_META.size + payload > len(buf):
            raise EsbTruncated(f"{path}: truncated payload")
        subject, session, trial, lrt, grt, label = _RECORD_META.unpack_from(
            buf, pos)
        pos += _RECORD_META.size
        seg = np.frombuffer(buf, dtype="<f4", count=channels * time,
                            offset=pos).reshape(channels, time).copy()
        pos += payload
        if not np.all(np.isfinite(seg)):
            raise ValueError(f"{path}: non-finite samples in trial {trial}")
        records.append(SegmentRecord(subject=subject, session=session,
                                     trial=trial, segment=seg, local_rt=lrt,
                                     global_rt=grt, label=label))
    if pos != len(buf):
        raise EsbTruncated(f"{path}: trailing bytes after last record")
    return records, rate


# ---- synthetic drifting streams ----------------------------------------------

@dataclass
class SynthConfig:
    """Non-i.i.d. two-class EEG surrogate.

    Class templates are fixed band-limited oscillations (drowsy slower and
    louder than alert) mixed into channels through a subject-specific
    matrix; labels follow a sticky two-state Markov chain, and an optional
    per-channel gain drift slides the mixing over the stream.
    """
    subjects: int = 11
    channels: int = 30
    samples: int = 128
    sample_rate: int = 128
    sources: int = 6
    stream_length: int = 600
    stickiness: float = 0.95
    noise: float = 0.3
    drift: float = 0.0
    subject_variability: float = 0.5
    channel_gain_spread: float = 0.0
    amp_spread: float = 0.0          # lognormal global amplitude per subject
    tilt_spread: float = 0.0         # bounded spectral slope per subject
    offset_spread: float = 0.0       # per-channel DC baseline per subject
    noise_spread: float = 0.0        # lognormal noise floor per subject
    segment_amp_jitter: float = 0.0  # lognormal amplitude per segment
    component_jitter: float = 0.0    # lognormal band power per segment
    template_seed: int = 7
    mixing_seed: int = 99
    # shared oscillatory components; the classes differ only in mean band
    # power, so class evidence is a noisy slow-versus-fast power ratio
    component_freqs: tuple = (2.3, 5.0, 10.0, 21.0)
    alert_power: tuple = (0.2, 0.3, 0.95, 0.7)
    drowsy_power: tuple = (1.0, 0.8, 0.9, 0.25)

    def __post_init__(self):
        if not 0.0 <= self.stickiness < 1.0:
            raise ValueError("stickiness must be in [0, 1)")


def _component_waves(cfg):
    """Class-shared oscillations (sources, components, samples), pinned by
    the template seed."""
    rng = np.random.default_rng(cfg.template_seed)
    t = np.arange(cfg.samples) / cfg.sample_rate
    n_comp = len(cfg.component_freqs)
    waves = np.zeros((cfg.sources, n_comp, cfg.samples))
    for k in range(cfg.sources):
        for j, f in enumerate(cfg.component_freqs):
            jitter = rng.uniform(0.9, 1.1)
            phase = rng.uniform(0.0, 2 * np.pi)
            waves[k, j] = np.sin(2 * np.pi * f * jitter * t + phase)
    return waves


def _subject_traits(cfg, subject):
    """Per-class mean component weights under the subject's amplitude and
    spectral-slope traits."""
    rng = np.random.default_rng(
        np.random.SeedSequence([cfg.mixing_seed, subject, 2]))
    amp = np.exp(cfg.amp_spread * rng.standard_normal())
    # every subject carries a definite spectral slope, bounded on both
    # sides: |tilt| uniform in [spread/2, spread], random sign
    tilt = (cfg.tilt_spread * rng.uniform(0.5, 1.0)
            * (1.0 if rng.random() < 0.5 else -1.0))
    # (f / 8 Hz)^tilt: a subject-specific spectral slope
    color = amp * (np.array(cfg.component_freqs) / 8.0) ** tilt
    means = np.stack([np.array(cfg.alert_power) * color,
                      np.array(cfg.drowsy_power) * color])
    return means  # (2, components)


def _mixing_matrix(cfg, subject):
    """Subject head model: shared base mixing, per-subject pattern shift,
    and per-channel gains (electrode/skull amplitude variation)."""
    base_rng = np.random.default_rng(cfg.template_seed + 1)
    base = base_rng.standard_normal((cfg.channels, cfg.sources))
    sub_rng = np.random.default_rng(
        np.random.SeedSequence([cfg.mixing_seed, subject]))
    delta = sub_rng.standard_normal((cfg.channels, cfg.sources))
    m = (base + cfg.subject_variability * delta) / np.sqrt(cfg.sources)
    if cfg.channel_gain_spread:
        gains = np.exp(cfg.channel_gain_spread
                       * sub_rng.standard_normal(cfg.channels))
        m = gains[:, None] * m
    return m


def markov_labels(length, stickiness, rng):
    labels = np.empty(length, dtype=np.int8)
    state = int(rng.integers(0, 2))
    for i in range(length):
        labels[i] = state
        if rng.random() >= stickiness:
            state = 1 - state
    return labels


def synth_stream(cfg, seed, subjects=None):
    """Per-subject ordered SegmentRecord streams.

    The template seed pins class content and base mixing; ``seed`` drives
    label paths and measurement noise, so two seeds realize two sessions
    of the same synthetic subjects.
    """
    waves = _component_waves(cfg)
    streams = {}
    for subject in (subjects if subjects is not None
                    else range(1, cfg.subjects + 1)):
        means = _subject_traits(cfg, subject)
        mix = _mixing_matrix(cfg, subject)
        # mixed[j] is component j rendered into channel space
        mixed = np.einsum("ck,kjt->jct", mix, waves)
        trait_rng = np.random.default_rng(
            np.random.SeedSequence([cfg.mixing_seed, subject, 3]))
        dc_offset = cfg.offset_spread * trait_rng.standard_normal(
            cfg.channels)
        noise_level = cfg.noise * np.exp(
            cfg.noise_spread * trait_rng.standard_normal())
        rng = np.random.default_rng(np.random.SeedSequence([seed, subject]))
        labels = markov_labels(cfg.stream_length, cfg.stickiness, rng)
        drift_phase = float(np.random.default_rng(
            np.random.SeedSequence([cfg.mixing_seed, subject, 1])
        ).uniform(0.0, 2 * np.pi))
        records = []
        for t, label in enumerate(labels, start=1):
            w = means[label]
            if cfg.component_jitter:
                w = w * np.exp(cfg.component_jitter
                               * rng.standard_normal(len(w)))
            if cfg.segment_amp_jitter:
                w = w * np.exp(cfg.segment_amp_jitter
                               * rng.standard_normal())
            if cfg.drift:
                # slow spectral-tilt swing: slow bands wax while fast bands
                # wane (and back) across the stream
                tilt_t = cfg.drift * np.sin(
                    2 * np.pi * t / cfg.stream_length + drift_phase)
                w = w * (np.array(cfg.component_freqs) / 8.0) ** tilt_t
            x = np.einsum("j,jct->ct", w, mixed)
            if cfg.offset_spread:
                x = x + dc_offset[:, None]
            if cfg.noise:
                x = x + noise_level * rng.standard_normal(x.shape)
            if label == LABEL_ALERT:
                lrt = grt = float(rng.uniform(0.42, 0.88))
            else:
                lrt = grt = float(rng.uniform(1.55, 3.0))
            records.append(SegmentRecord(
                subject=subject, session=1, trial=t,
                segment=x.astype(np.float32), local_rt=lrt, global_rt=grt,
                label=int(label)))
        streams[subject] = records
    return streams


def loso_folds(subject_ids):
    """One (train_subjects, target) fold per subject, ordered by id."""
    ids = sorted(subject_ids)
    if len(ids) != len(set(ids)):
        raise ValueError("duplicate subject ids")
    if len(ids) < 2:
        raise ValueError("LOSO needs at least 2 subjects")
    return [(tuple(s for s in ids if s != target), target) for target in ids]
