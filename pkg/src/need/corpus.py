"""Video records, corpus files, splits and the synthetic benchmark generator.

Corpus files are newline-delimited JSON. The first line is a header::

    {"format": "need-corpus", "version": 1, "d_base": 128, "d_frame": 64,
     "vocab_size": 1000, "max_text_len": 256}

and every following line is one video record. Floats are written with nine
significant digits.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from need.errors import ConfigError, IntegrityError, ParseError, SchemaError

ROLES = ("fake", "real", "debunking")
LABELS = {"fake": 1, "real": 0}
FORMAT_TAG = "need-corpus"

# reserved token ids
PAD, CLS, SEP, REFUTE = 0, 1, 2, 3
N_RESERVED = 10


@dataclass(frozen=True, eq=False)
class VideoRecord:
    video_id: str
    event_id: str
    role: str
    publish_ts: int
    base_features: np.ndarray
    tokens: tuple
    frame_features: np.ndarray

    @property
    def label(self):
        """1 for fake, 0 for real, None for debunking videos."""
        return LABELS.get(self.role)

    @property
    def is_target(self) -> bool:
        return self.role != "debunking"

    def sort_key(self):
        return (self.publish_ts, self.video_id)

    def __eq__(self, other):
        if not isinstance(other, VideoRecord):
            return NotImplemented
        return (self.video_id, self.event_id, self.role, self.publish_ts, self.tokens) == \
            (other.video_id, other.event_id, other.role, other.publish_ts, other.tokens) \
            and np.array_equal(self.base_features, other.base_features) \
            and np.array_equal(self.frame_features, other.frame_features)

    def __hash__(self):
        return hash(self.video_id)


@dataclass(frozen=True)
class Event:
    event_id: str
    videos: tuple

    def __post_init__(self):
        if not self.videos:
            raise SchemaError(f"event {self.event_id!r} has no videos")
        if any(v.event_id != self.event_id for v in self.videos):
            raise SchemaError(f"event {self.event_id!r} holds a video from another event")
        object.__setattr__(self, "videos", tuple(sorted(self.videos, key=VideoRecord.sort_key)))

    def __len__(self):
        return len(self.videos)

    def by_role(self, role: str) -> list:
        return [v for v in self.videos if v.role == role]

    @property
    def targets(self) -> list:
        return [v for v in self.videos if v.is_target]

    @property
    def has_debunking(self) -> bool:
        return any(v.role == "debunking" for v in self.videos)


@dataclass(frozen=True)
class CorpusHeader:
    d_base: int
    d_frame: int
    vocab_size: int
    max_text_len: int = 256


class Corpus(list):
    """A list of events that also carries the corpus header."""

    def __init__(self, events: Iterable[Event] = (), header: CorpusHeader | None = None):
        super().__init__(events)
        self.header = header

    def videos(self):
        return [v for e in self for v in e.videos]


def group_events(records: Iterable[VideoRecord]) -> list:
    """Group records by event id; events ordered by id, videos canonically."""
    buckets: dict = {}
    for r in records:
        buckets.setdefault(r.event_id, []).append(r)
    return [Event(eid, tuple(vs)) for eid, vs in sorted(buckets.items())]


# -- serialisation ------------------------------------------------------------
def _round9(values: np.ndarray) -> list:
    return [float(f"{v:.9g}") for v in np.asarray(values, dtype=np.float64).ravel()]


def quantize9(values) -> np.ndarray:
    """Round to nine significant digits, exactly as the file writer does."""
    arr = np.asarray(values, dtype=np.float64)
    return np.array(_round9(arr), dtype=np.float64).reshape(arr.shape)


def record_to_dict(r: VideoRecord) -> dict:
    n, d = r.frame_features.shape
    frames = _round9(r.frame_features)
    return {
        "video_id": r.video_id,
        "event_id": r.event_id,
        "role": r.role,
        "publish_ts": int(r.publish_ts),
        "base_features": _round9(r.base_features),
        "tokens": [int(t) for t in r.tokens],
        "frame_features": [frames[i * d:(i + 1) * d] for i in range(n)],
    }


def write_corpus(path, events: Sequence[Event], header: CorpusHeader | None = None):
    header = header or getattr(events, "header", None)
    if header is None:
        raise ConfigError("write_corpus needs a header")
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": FORMAT_TAG, "version": 1, **asdict(header)}) + "\n")
        for e in events:
            for v in e.videos:
                fh.write(json.dumps(record_to_dict(v), separators=(",", ":")) + "\n")


def _parse_header(line: str) -> CorpusHeader:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"header is not valid JSON ({exc.msg})", line=1) from None
    if not isinstance(obj, dict) or obj.get("format") != FORMAT_TAG:
        raise ParseError(f"first line must be a {FORMAT_TAG!r} header", line=1)
    try:
        return CorpusHeader(d_base=int(obj["d_base"]), d_frame=int(obj["d_frame"]),
                            vocab_size=int(obj["vocab_size"]),
                            max_text_len=int(obj.get("max_text_len", 256)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad header field: {exc}", line=1) from None


def _parse_record(obj: dict, header: CorpusHeader, lineno: int) -> VideoRecord:
    try:
        role = obj["role"]
        base = np.asarray(obj["base_features"], dtype=np.float64)
        tokens = tuple(int(t) for t in obj["tokens"])
        frames = np.asarray(obj["frame_features"], dtype=np.float64)
        rec = dict(video_id=str(obj["video_id"]), event_id=str(obj["event_id"]),
                   publish_ts=int(obj["publish_ts"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed record: {exc!r}", line=lineno) from None
    if role not in ROLES:
        raise SchemaError(f"line {lineno}: unknown role {role!r}")
    if base.shape != (header.d_base,):
        raise SchemaError(f"line {lineno}: base_features has shape {base.shape}, expected ({header.d_base},)")
    if frames.size == 0:
        frames = frames.reshape(0, header.d_frame)
    if frames.ndim != 2 or frames.shape[1] != header.d_frame:
        raise SchemaError(f"line {lineno}: frame_features rows must have length {header.d_frame}")
    if len(tokens) > header.max_text_len:
        raise SchemaError(f"line {lineno}: {len(tokens)} tokens exceeds max_text_len {header.max_text_len}")
    if tokens and (min(tokens) < 0 or max(tokens) >= header.vocab_size):
        raise SchemaError(f"line {lineno}: token id outside vocabulary of {header.vocab_size}")
    if not (np.all(np.isfinite(base)) and np.all(np.isfinite(frames))):
        raise SchemaError(f"line {lineno}: non-finite feature value")
    return VideoRecord(role=role, base_features=base, tokens=tokens, frame_features=frames, **rec)


def load_corpus(path) -> Corpus:
    """Read a corpus file, validate every record, and group into events."""
    path = Path(path)
    records, seen = [], set()
    header = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            if header is None:
                header = _parse_header(line)
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON ({exc.msg})", line=lineno) from None
            if not isinstance(obj, dict):
                raise ParseError("record must be a JSON object", line=lineno)
            rec = _parse_record(obj, header, lineno)
            if rec.video_id in seen:
                raise IntegrityError(f"line {lineno}: duplicate video_id {rec.video_id!r}")
            seen.add(rec.video_id)
            records.append(rec)
    if header is None:
        raise ParseError("empty corpus file (no header)", line=1)
    return Corpus(group_events(records), header)


# -- splits ---------------------------------------------------------------------
@dataclass
class SplitPlan:
    mode: str
    folds: list = field(default_factory=list)        # [(train_event_ids, test_event_ids)]
    train: tuple = ()                                 # temporal mode: video ids
    validation: tuple = ()
    test: tuple = ()
    boundaries: dict = field(default_factory=dict)   # temporal mode: boundary timestamps

    def to_dict(self) -> dict:
        out = {"mode": self.mode}
        if self.mode == "event_kfold":
            out["folds"] = [{"train": list(tr), "test": list(te)} for tr, te in self.folds]
        else:
            out.update(train=list(self.train), validation=list(self.validation), test=list(self.test),
                       boundaries=self.boundaries)
        return out

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> "SplitPlan":
        if obj["mode"] == "event_kfold":
            return cls("event_kfold", folds=[(tuple(f["train"]), tuple(f["test"])) for f in obj["folds"]])
        return cls("temporal", train=tuple(obj["train"]), validation=tuple(obj["validation"]),
                   test=tuple(obj["test"]), boundaries=dict(obj.get("boundaries", {})))

    def save(self, path):
        Path(path).write_text(self.dumps() + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SplitPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def event_kfold_split(events: Sequence[Event], k: int, seed: int) -> SplitPlan:
    """Shuffle events with ``seed`` and deal them into ``k`` near-equal folds."""
    if k < 2:
        raise ConfigError(f"k must be at least 2, got {k}")
    if len(events) < k:
        raise ConfigError(f"k={k} folds need at least {k} events, got {len(events)}")
    ids = sorted(e.event_id for e in events)
    if len(set(ids)) != len(ids):
        raise IntegrityError("duplicate event ids")
    perm = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in perm]
    chunks = np.array_split(np.arange(len(shuffled)), k)
    folds = []
    for chunk in chunks:
        test = tuple(sorted(shuffled[i] for i in chunk))
        test_set = set(test)
        train = tuple(i for i in ids if i not in test_set)
        folds.append((train, test))
    return SplitPlan("event_kfold", folds=folds)


def temporal_split(events: Sequence[Event], ratios=(0.70, 0.15, 0.15)) -> SplitPlan:
    """Chronological video-level split at floor(r1*N) and floor((r1+r2)*N)."""
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    videos = sorted((v for e in events for v in e.videos), key=VideoRecord.sort_key)
    n = len(videos)
    if n == 0:
        raise ConfigError("temporal split of an empty corpus")
    # tolerance keeps e.g. 0.7 * 20 from landing at 13.999...
    cut1 = math.floor(ratios[0] * n + 1e-9)
    cut2 = math.floor((ratios[0] + ratios[1]) * n + 1e-9)
    parts = videos[:cut1], videos[cut1:cut2], videos[cut2:]
    bounds = {}
    for name, part in zip(("train", "validation", "test"), parts):
        if part:
            bounds[name] = [int(part[0].publish_ts), int(part[-1].publish_ts)]
    return SplitPlan("temporal", train=tuple(v.video_id for v in parts[0]),
                     validation=tuple(v.video_id for v in parts[1]),
                     test=tuple(v.video_id for v in parts[2]), boundaries=bounds)


def restrict(events: Sequence[Event], video_ids: Iterable[str]) -> list:
    """Events rebuilt from only the given videos; events left empty are dropped."""
    keep = set(video_ids)
    out = []
    for e in events:
        vs = tuple(v for v in e.videos if v.video_id in keep)
        if vs:
            out.append(Event(e.event_id, vs))
    return out


def select_events(events: Sequence[Event], event_ids: Iterable[str]) -> list:
    wanted = set(event_ids)
    return [e for e in events if e.event_id in wanted]


def early_truncate(event: Event, fraction: float) -> Event:
    """Keep the first ceil(fraction * n) videos in chronological order."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    n = len(event.videos)
    keep = max(1, math.ceil(fraction * n - 1e-9))
    return Event(event.event_id, event.videos[:keep])


# -- synthetic benchmark -----------------------------------------------------------
@dataclass(frozen=True)
class SynthConfig:
    """Knobs of the synthetic benchmark; see ``generate_synthetic``."""

    n_events: int = 300
    mean_fake: float = 3.0
    mean_real: float = 3.0
    mean_debunking: float = 3.0
    max_videos: int = 25
    d_base: int = 128
    d_frame: int = 64
    vocab_size: int = 1000
    max_text_len: int = 256
    rho: float = 3.0
    sigma: float = 0.5
    debunk_fraction: float = 0.51
    event_purity: float = 0.95
    clue_rate: float = 0.35
    event_scale: float = 0.3
    text_len: int = 12
    # small pools: a slot or clip must not identify its event, or a pair model can
    # memorise the event's label lean instead of comparing the two videos
    n_slot_values: int = 4
    n_filler_values: int = 8
    n_clips: int = 4
    frame_noise: float = 0.5
    min_frames: int = 4
    max_frames: int = 8
    old_clip_share: float = 0.75
    seed: int = 7

    def validate(self):
        if self.n_events < 1:
            raise ConfigError("n_events must be positive")
        if min(self.mean_fake, self.mean_real, self.mean_debunking) < 0:
            raise ConfigError("mean counts must be non-negative")
        if self.mean_fake + self.mean_real <= 0:
            raise ConfigError("events need fake or real videos")
        if self.max_videos < 1:
            raise ConfigError("max_videos must be positive")
        if self.d_base < 1 or self.d_frame < 1:
            raise ConfigError("feature dimensions must be positive")
        if self.rho < 0 or self.sigma < 0 or self.event_scale < 0 or self.frame_noise < 0:
            raise ConfigError("rho, sigma, event_scale and frame_noise must be non-negative")
        for name in ("debunk_fraction", "event_purity", "clue_rate", "old_clip_share"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.n_slot_values < 2 or self.n_clips < 2:
            raise ConfigError("need at least two slot values and two clips")
        if self.text_len < 2 or self.text_len > self.max_text_len:
            raise ConfigError("text_len must lie in [2, max_text_len]")
        if N_RESERVED + self.n_filler_values + self.n_slot_values > self.vocab_size:
            raise ConfigError("vocabulary too small for filler and slot tokens")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ConfigError("need 1 <= min_frames <= max_frames")

    @classmethod
    def from_dict(cls, obj: dict) -> "SynthConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown synthetic-corpus keys: {sorted(unknown)}")
        return cls(**obj)

    @property
    def header(self) -> CorpusHeader:
        return CorpusHeader(self.d_base, self.d_frame, self.vocab_size, self.max_text_len)


def _event_counts(rng, cfg: SynthConfig):
    """Per-event labels and debunking count; each event leans towards one label."""
    lean_fake = rng.random() < cfg.mean_fake / (cfg.mean_fake + cfg.mean_real)
    n_targets = min(cfg.max_videos, max(1, int(rng.poisson(cfg.mean_fake + cfg.mean_real))))
    p_fake = cfg.event_purity if lean_fake else 1.0 - cfg.event_purity
    labels = (rng.random(n_targets) < p_fake).astype(int)
    n_deb = 0
    if rng.random() < cfg.debunk_fraction and cfg.mean_debunking > 0:
        n_deb = max(1, int(rng.poisson(cfg.mean_debunking)))
    return labels, min(n_deb, cfg.max_videos - n_targets)


def generate_synthetic(config: SynthConfig | None = None) -> Corpus:
    """Generate a corpus with three planted, independently testable signals.

    * Base features: ``e + rho * clue * u + noise``. ``e`` is a per-event
      latent scaled by ``event_scale``; ``u`` is one corpus-wide unit
      direction. Each fake video carries the clue with probability
      ``clue_rate``; real and debunking videos never do. Events lean towards
      one label (``event_purity``), so a clue seen in one video is evidence
      about its neighbours.
    * Tokens: each event has a true slot value. Real videos state it, fake
      videos state a wrong value, debunking videos state the true value
      after a refute marker.
    * Frames: each event has its own clip and a reused old clip, both drawn
      from a shared pool. Real videos show the event clip, fake videos the
      old clip, debunking videos mostly the old clip followed by the event
      clip.

    All values are rounded to nine significant digits so a written corpus
    reloads bit-identically.
    """
    cfg = config or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    direction = rng.normal(size=cfg.d_base)
    direction /= np.linalg.norm(direction)
    clips = rng.normal(size=(cfg.n_clips, cfg.d_frame))
    filler_lo = N_RESERVED
    slot_lo = N_RESERVED + cfg.n_filler_values
    width = len(str(cfg.n_events - 1))
    events = []
    t0 = 1_600_000_000
    for ei in range(cfg.n_events):
        eid = f"e{ei:0{width}d}"
        labels, n_deb = _event_counts(rng, cfg)
        latent = cfg.event_scale * rng.normal(size=cfg.d_base)
        true_slot, wrong_slot = rng.choice(cfg.n_slot_values, size=2, replace=False) + slot_lo
        own_clip, old_clip = rng.choice(cfg.n_clips, size=2, replace=False)
        start = t0 + int(rng.integers(0, 365 * 86400))

        def base(clue):
            return latent + cfg.rho * clue * direction + cfg.sigma * rng.normal(size=cfg.d_base)

        def text(slot, refute=False):
            toks = list(rng.integers(filler_lo, filler_lo + cfg.n_filler_values, size=cfg.text_len))
            if refute:
                toks[0], toks[1] = REFUTE, slot
            else:
                toks[0] = slot
            return tuple(int(t) for t in toks)

        def frames(clip, n):
            return clips[clip] + cfg.frame_noise * rng.normal(size=(n, cfg.d_frame))

        specs = [("fake" if y else "real") for y in labels] + ["debunking"] * n_deb
        order = rng.permutation(len(specs))
        gaps = np.cumsum(rng.integers(60, 6 * 3600, size=len(specs)))
        videos = []
        for rank, si in enumerate(order):
            role = specs[si]
            n_frames = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
            if role == "fake":
                feat = base(float(rng.random() < cfg.clue_rate))
                toks = text(wrong_slot)
                fr = frames(old_clip, n_frames)
            elif role == "real":
                feat = base(0.0)
                toks = text(true_slot)
                fr = frames(own_clip, n_frames)
            else:
                feat = base(0.0)
                toks = text(true_slot, refute=True)
                n_old = min(n_frames - 1, max(1, int(round(cfg.old_clip_share * n_frames))))
                fr = np.concatenate([frames(old_clip, n_old), frames(own_clip, n_frames - n_old)]) \
                    if n_frames > 1 else frames(old_clip, 1)
            videos.append(VideoRecord(
                video_id=f"{eid}_v{si:02d}", event_id=eid, role=role,
                publish_ts=int(start + gaps[rank]), base_features=quantize9(feat),
                tokens=toks, frame_features=quantize9(fr)))
        events.append(Event(eid, tuple(videos)))
    return Corpus(events, cfg.header)
