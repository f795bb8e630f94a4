"""Interaction-log ingestion, preprocessing, merged sequences and splits."""
from __future__ import annotations

import hashlib
import io
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Iterator, NamedTuple, TextIO

import numpy as np

DOMAINS = ("A", "B")
DAY = 86_400


class DatasetExhausted(RuntimeError):
    """Filtering removed every event; ``stats`` tells where it happened."""

    def __init__(self, message: str, stats: dict):
        super().__init__(message)
        self.stats = stats


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class InteractionEvent:
    user_id: str
    item_id: str
    rating: float
    timestamp: int
    domain: str

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")
        if self.domain not in DOMAINS:
            raise ValueError(f"domain must be A or B, got {self.domain!r}")

    def to_line(self) -> str:
        return f"{self.user_id}\t{self.item_id}\t{self.rating!r}\t{self.timestamp}\t{self.domain}"


class Reject(NamedTuple):
    line_no: int
    line: str
    reason: str


@dataclass
class ParseResult:
    events: list[InteractionEvent]
    rejects: list[Reject]


def parse_log(lines: Iterable[str]) -> ParseResult:
    """Parse TSV lines ``user, item, rating, timestamp, domain``.

    Blank and ``#`` lines are skipped.  Anything malformed lands in
    ``rejects`` with its 1-based line number.
    """
    events, rejects = [], []
    for no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) != 5:
            rejects.append(Reject(no, line, f"expected 5 columns, got {len(cols)}"))
            continue
        user, item, rating, ts, dom = cols
        if not user or not item:
            rejects.append(Reject(no, line, "empty user or item id"))
            continue
        try:
            r = float(rating)
        except ValueError:
            rejects.append(Reject(no, line, f"bad rating {rating!r}"))
            continue
        if not math.isfinite(r):
            rejects.append(Reject(no, line, f"bad rating {rating!r}"))
            continue
        try:
            t = int(ts)
        except ValueError:
            rejects.append(Reject(no, line, f"bad timestamp {ts!r}"))
            continue
        if t < 0:
            rejects.append(Reject(no, line, f"negative timestamp {t}"))
            continue
        if dom not in DOMAINS:
            rejects.append(Reject(no, line, f"bad domain {dom!r}"))
            continue
        events.append(InteractionEvent(user, item, r, t, dom))
    return ParseResult(events, rejects)


def serialize_events(events: Iterable[InteractionEvent]) -> str:
    return "".join(e.to_line() + "\n" for e in events)


# --------------------------------------------------------------------------
# sequences


class SeqItem(NamedTuple):
    item: int
    timestamp: int
    source: str


@dataclass
class BehaviorSequence:
    user: int
    domain: str  # "A", "B" or "M"
    items: list[SeqItem] = field(default_factory=list)

    def __len__(self):
        return len(self.items)

    def validate(self) -> None:
        ts = [it.timestamp for it in self.items]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"timestamps decrease in user {self.user} sequence {self.domain}")
        if self.domain in DOMAINS and any(it.source != self.domain for it in self.items):
            raise ValueError(f"foreign item in {self.domain} sequence of user {self.user}")

    def restrict(self, source: str) -> list[SeqItem]:
        return [it for it in self.items if it.source == source]


class SequenceTriple(NamedTuple):
    a: BehaviorSequence
    b: BehaviorSequence
    m: BehaviorSequence

    @property
    def user(self) -> int:
        return self.m.user

    def domain(self, d: str) -> BehaviorSequence:
        return self.a if d == "A" else self.b


def merge_chronological(seq_a: BehaviorSequence, seq_b: BehaviorSequence) -> BehaviorSequence:
    """Stable timestamp merge; on equal timestamps the A event goes first."""
    a, b = seq_a.items, seq_b.items
    out, i, j = [], 0, 0
    while i < len(a) and j < len(b):
        if a[i].timestamp <= b[j].timestamp:
            out.append(a[i])
            i += 1
        else:
            out.append(b[j])
            j += 1
    out.extend(a[i:])
    out.extend(b[j:])
    return BehaviorSequence(seq_a.user, "M", out)


def make_triple(user: int, a_items, b_items) -> SequenceTriple:
    """Build a triple from ``(item, timestamp)`` pairs per domain."""
    sa = BehaviorSequence(user, "A", [SeqItem(i, t, "A") for i, t in a_items])
    sb = BehaviorSequence(user, "B", [SeqItem(i, t, "B") for i, t in b_items])
    return SequenceTriple(sa, sb, merge_chronological(sa, sb))


def check_triple(tr: SequenceTriple) -> None:
    for s in tr:
        s.validate()
    if tr.m.restrict("A") != tr.a.items or tr.m.restrict("B") != tr.b.items:
        raise ValueError(f"merged sequence of user {tr.user} is not a merge of its domain sequences")


# --------------------------------------------------------------------------
# vocabulary


@dataclass
class Vocabulary:
    index_to_id: dict[str, list[str]]
    counts: dict[str, list[int]]
    id_to_index: dict[str, dict[str, int]] = field(init=False)

    def __post_init__(self):
        self.id_to_index = {d: {k: i for i, k in enumerate(ids)} for d, ids in self.index_to_id.items()}

    @classmethod
    def build(cls, events: Iterable[InteractionEvent]) -> "Vocabulary":
        cnt = {d: Counter() for d in DOMAINS}
        for e in events:
            cnt[e.domain][e.item_id] += 1
        ids = {d: sorted(cnt[d]) for d in DOMAINS}
        return cls(ids, {d: [cnt[d][k] for k in ids[d]] for d in DOMAINS})

    def size(self, domain: str) -> int:
        return len(self.index_to_id[domain])

    def digest(self) -> str:
        h = hashlib.sha256()
        for d in DOMAINS:
            for k in self.index_to_id[d]:
                h.update(f"{d}\t{k}\n".encode())
        return h.hexdigest()


# --------------------------------------------------------------------------
# preprocessing


@dataclass
class Preprocessed:
    triples: list[SequenceTriple]
    vocab: Vocabulary
    users: list[str]
    stats: dict


def _filter_to_fixed_point(events: list[InteractionEvent], min_interactions: int, stats: dict):
    rounds = 0
    while True:
        rounds += 1
        user_dom = Counter((e.user_id, e.domain) for e in events)
        item_cnt = Counter((e.domain, e.item_id) for e in events)
        keep_users = {
            u for (u, _d) in user_dom
            if all(user_dom.get((u, d), 0) >= min_interactions for d in DOMAINS)
        }
        kept = [
            e for e in events
            if e.user_id in keep_users and item_cnt[(e.domain, e.item_id)] >= min_interactions
        ]
        if len(kept) == len(events):
            stats["filter_rounds"] = rounds
            return kept
        events = kept


def preprocess(
    events: list[InteractionEvent],
    min_interactions: int = 10,
    period_length: int = 90 * DAY,
    min_items_per_domain: int = 5,
) -> Preprocessed:
    """Overlap filter, frequency filter, period windows, short-window drop, merge.

    The frequency filter counts a user's interactions per domain and is
    repeated until nothing else is removed.  Windows are cut every
    ``period_length`` seconds starting at each user's first surviving event.
    """
    if not events:
        raise ValueError("no events to preprocess")
    stats: dict = {"events_in": len(events)}
    domains_of = defaultdict(set)
    for e in events:
        domains_of[e.user_id].add(e.domain)
    both = {u for u, ds in domains_of.items() if len(ds) == 2}
    evs = [e for e in events if e.user_id in both]
    stats["events_overlapped"] = len(evs)
    stats["users_overlapped"] = len(both)
    evs = _filter_to_fixed_point(evs, min_interactions, stats)
    stats["events_filtered"] = len(evs)
    if not evs:
        raise DatasetExhausted("dataset exhausted after overlap/frequency filtering", stats)

    by_user = defaultdict(list)
    for e in evs:
        by_user[e.user_id].append(e)
    windows = []  # (user_id, window_no, events)
    for u in sorted(by_user):
        ue = sorted(by_user[u], key=lambda e: (e.timestamp, e.domain, e.item_id))
        t0 = ue[0].timestamp
        groups = defaultdict(list)
        for e in ue:
            groups[(e.timestamp - t0) // period_length].append(e)
        windows.extend((u, w, groups[w]) for w in sorted(groups))
    stats["windows"] = len(windows)

    def long_enough(ws):
        return all(sum(e.domain == d for e in ws) >= min_items_per_domain for d in DOMAINS)

    windows = [w for w in windows if long_enough(w[2])]
    stats["windows_kept"] = len(windows)
    if not windows:
        raise DatasetExhausted("dataset exhausted: no window has enough items in both domains", stats)

    kept_events = [e for w in windows for e in w[2]]
    vocab = Vocabulary.build(kept_events)
    users = sorted({w[0] for w in windows})
    uidx = {u: i for i, u in enumerate(users)}
    triples = []
    for u, _w, ws in windows:
        per = {
            d: sorted(
                ((vocab.id_to_index[d][e.item_id], e.timestamp) for e in ws if e.domain == d),
                key=lambda p: (p[1], p[0]),
            )
            for d in DOMAINS
        }
        triples.append(make_triple(uidx[u], per["A"], per["B"]))
    stats.update(table_stats(triples, vocab))
    return Preprocessed(triples, vocab, users, stats)


def table_stats(triples: list[SequenceTriple], vocab: Vocabulary) -> dict:
    n = len(triples)
    return {
        "items_A": vocab.size("A"),
        "items_B": vocab.size("B"),
        "overlapped_users": len({t.user for t in triples}),
        "sequences": n,
        "avg_length": round(float(np.mean([len(t.m) for t in triples])), 4) if n else 0.0,
    }


# --------------------------------------------------------------------------
# splitting


@dataclass
class DatasetSplit:
    train: list[SequenceTriple]
    validation: list[SequenceTriple]
    test: list[SequenceTriple]
    vocab: Vocabulary | None = None

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.validation), len(self.test)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(
    triples: list[SequenceTriple],
    ratios: tuple[float, float, float] = (0.75, 0.15, 0.10),
    seed: int = 0,
    vocab: Vocabulary | None = None,
) -> DatasetSplit:
    """Seeded shuffle, then contiguous train/validation/test cut."""
    n = len(triples)
    if n < 3:
        raise ValueError(f"need at least 3 sequences to split, got {n}")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"bad split ratios {ratios}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = _round_half_up(ratios[0] * n)
    n_val = min(_round_half_up(ratios[1] * n), n - n_train)
    picked = [triples[i] for i in order]
    return DatasetSplit(picked[:n_train], picked[n_train:n_train + n_val], picked[n_train + n_val:], vocab)


# --------------------------------------------------------------------------
# processed-sequence file

HEADER = "#ddghm-processed\tv1"


def _encode_items(items: list[SeqItem]) -> str:
    return ",".join(f"{it.item}:{it.timestamp}:{it.source}" for it in items)


def _decode_items(text: str) -> list[SeqItem]:
    if not text:
        return []
    out = []
    for tok in text.split(","):
        idx, ts, src = tok.split(":")
        out.append(SeqItem(int(idx), int(ts), src))
    return out


def write_processed(out: TextIO, data: Preprocessed) -> None:
    out.write(HEADER + "\n")
    for d in DOMAINS:
        for i, (k, c) in enumerate(zip(data.vocab.index_to_id[d], data.vocab.counts[d])):
            out.write(f"#vocab\t{d}\t{i}\t{k}\t{c}\n")
    for i, u in enumerate(data.users):
        out.write(f"#user\t{i}\t{u}\n")
    for tr in data.triples:
        for s in tr:
            out.write(f"{s.user}\t{s.domain}\t{_encode_items(s.items)}\n")


def dumps_processed(data: Preprocessed) -> str:
    buf = io.StringIO()
    write_processed(buf, data)
    return buf.getvalue()


def _iter_data_lines(lines: Iterable[str]) -> Iterator[tuple[int, str]]:
    for no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if line:
            yield no, line


def read_processed(lines: Iterable[str]) -> Preprocessed:
    ids = {d: [] for d in DOMAINS}
    counts = {d: [] for d in DOMAINS}
    users: list[str] = []
    rows: list[BehaviorSequence] = []
    seen_header = False
    for no, line in _iter_data_lines(lines):
        if line.startswith("#"):
            cols = line.split("\t")
            if line == HEADER:
                seen_header = True
            elif cols[0] == "#vocab":
                d, i = cols[1], int(cols[2])
                if i != len(ids[d]):
                    raise FormatError(f"line {no}: vocabulary indices not contiguous")
                ids[d].append(cols[3])
                counts[d].append(int(cols[4]))
            elif cols[0] == "#user":
                users.append(cols[2])
            continue
        cols = line.split("\t")
        if len(cols) != 3 or cols[1] not in ("A", "B", "M"):
            raise FormatError(f"line {no}: expected user<TAB>domain<TAB>items")
        try:
            rows.append(BehaviorSequence(int(cols[0]), cols[1], _decode_items(cols[2])))
        except ValueError as exc:
            raise FormatError(f"line {no}: {exc}") from None
    if not seen_header:
        raise FormatError("missing processed-file header")
    if len(rows) % 3:
        raise FormatError("sequence lines do not come in A/B/M triples")
    triples = []
    for k in range(0, len(rows), 3):
        a, b, m = rows[k:k + 3]
        if (a.domain, b.domain, m.domain) != ("A", "B", "M"):
            raise FormatError(f"triple {k // 3} is not ordered A, B, M")
        tr = SequenceTriple(a, b, m)
        try:
            check_triple(tr)
        except ValueError as exc:
            raise FormatError(f"triple {k // 3}: {exc}") from None
        triples.append(tr)
    vocab = Vocabulary(ids, counts)
    return Preprocessed(triples, vocab, users, table_stats(triples, vocab))
