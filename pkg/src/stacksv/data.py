"""Feature files, manifests, trial protocols, and the synthetic corpus.

Feature file layout: magic ``LSF1``, then u32 C, u32 L, u32 T (little
endian), then C*L*T little-endian float32 values in C order, i.e. value
(c, l, t) sits at index (c*L + l)*T + t.

Manifest lines: ``utterance_id<TAB>speaker_id<TAB>path<TAB>frames``.
Trial lines:   ``label<TAB>enroll_path<TAB>test_path``.
Relative paths resolve against the directory of the file that names them.
"""

import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"LSF1"
HEADER = struct.Struct("<4sIII")

# Amplitude of the shared per-frame nuisance signal in the synthetic
# generator.  It is identical across speakers and layers, so only models
# that contrast layers can remove it; raw pooled features are dominated
# by it, which keeps untrained systems near chance.
NUISANCE_SCALE = 4.0


class FeatureFileError(Exception):
    """Base for feature-file format problems."""


class FeatureMagicError(FeatureFileError):
    pass


class FeatureTruncatedError(FeatureFileError):
    pass


class NonFiniteDataError(FeatureFileError):
    pass


@dataclass
class LayerStack:
    """One utterance's stacked layer outputs, shape (C, L, T)."""
    data: np.ndarray
    utterance_id: str = ""
    speaker_id: str = ""


@dataclass
class SpeakerAttr:
    speaker_id: str
    strata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    path: str
    n_frames: int


@dataclass(frozen=True)
class TrialPair:
    enroll_id: str
    test_id: str
    label: int                      # 1 = same speaker
    strata_tags: tuple = ()         # ((stratum, "same"|"diff"), ...)


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------

def write_feature(path, stack):
    arr = np.asarray(stack.data if isinstance(stack, LayerStack) else stack)
    if arr.ndim != 3:
        raise FeatureFileError(f"expected (C, L, T) data, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise NonFiniteDataError(f"refusing to write non-finite values to {path}")
    c, l, t = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, c, l, t))
        fh.write(payload)


def read_feature(path):
    with open(path, "rb") as fh:
        head = fh.read(HEADER.size)
        if len(head) < HEADER.size:
            raise FeatureTruncatedError(f"{path}: header truncated")
        magic, c, l, t = HEADER.unpack(head)
        if magic != MAGIC:
            raise FeatureMagicError(f"{path}: bad magic {magic!r}")
        payload = fh.read(4 * c * l * t)
    if len(payload) < 4 * c * l * t:
        raise FeatureTruncatedError(
            f"{path}: payload has {len(payload) // 4} values, header claims "
            f"{c * l * t}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(c, l, t).copy()
    if not np.isfinite(arr).all():
        raise NonFiniteDataError(f"{path}: non-finite feature values")
    return arr


# ---------------------------------------------------------------------------
# manifests and trial files
# ---------------------------------------------------------------------------

def write_manifest(path, entries):
    with open(path, "w") as fh:
        for e in entries:
            fh.write(f"{e.utterance_id}\t{e.speaker_id}\t{e.path}\t{e.n_frames}\n")


def read_manifest(path):
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(
                    f"{path}:{lineno}: expected 4 tab-separated fields, got "
                    f"{len(parts)}")
            utt, spk, rel, frames = parts
            full = rel if os.path.isabs(rel) else os.path.join(base, rel)
            try:
                n = int(frames)
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: frame count {frames!r} is not an int"
                ) from None
            entries.append(ManifestEntry(utt, spk, full, n))
    return entries


def write_trial_file(path, trials, entries):
    paths = {e.utterance_id: e.path for e in entries}
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w") as fh:
        for tr in trials:
            a = os.path.relpath(paths[tr.enroll_id], base)
            b = os.path.relpath(paths[tr.test_id], base)
            fh.write(f"{tr.label}\t{a}\t{b}\n")


def read_trial_file(path):
    base = os.path.dirname(os.path.abspath(path))
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected 'label<TAB>enroll<TAB>test', "
                    f"got {line!r}")
            if parts[0] not in ("0", "1"):
                raise ValueError(f"{path}:{lineno}: label must be 0 or 1")
            a = parts[1] if os.path.isabs(parts[1]) else os.path.join(base, parts[1])
            b = parts[2] if os.path.isabs(parts[2]) else os.path.join(base, parts[2])
            rows.append((int(parts[0]), a, b))
    return rows


# ---------------------------------------------------------------------------
# trial protocol builder
# ---------------------------------------------------------------------------

def _stratum_tags(sa, sb):
    keys = sorted(set(sa.strata) | set(sb.strata))
    return tuple((k, "same" if sa.strata.get(k) == sb.strata.get(k) else "diff")
                 for k in keys)


def build_trials(speakers, entries, target_pos_ratio=0.5, seed=0,
                 n_trials=None):
    """Positive (same-speaker) and stratified negative trials.

    Every cross-speaker combination appears in at least one negative;
    remaining negatives are spread evenly over the same/different stratum
    cells.  The positive ratio lands within a couple of points of the
    target.  Deterministic for a given seed.
    """
    if len(speakers) < 2:
        raise ValueError("need at least two speakers to build trials")
    if not 0.0 < target_pos_ratio < 1.0:
        raise ValueError("target_pos_ratio must be in (0, 1)")
    rng = np.random.default_rng(seed)
    attrs = {s.speaker_id: s for s in speakers}
    utts = {s.speaker_id: [] for s in speakers}
    for e in entries:
        if e.speaker_id in utts:
            utts[e.speaker_id].append(e.utterance_id)
    for sid, lst in utts.items():
        if len(lst) < 2:
            raise ValueError(
                f"speaker {sid} has {len(lst)} utterance(s); positives need "
                f"at least 2")

    sids = sorted(utts)
    combos = [(sids[i], sids[j]) for i in range(len(sids))
              for j in range(i + 1, len(sids))]
    pos_avail = sum(len(u) * (len(u) - 1) // 2 for u in utts.values())

    r = target_pos_ratio
    if n_trials is None:
        n_neg = 2 * len(combos)
        n_pos = int(round(n_neg * r / (1.0 - r)))
        if n_pos > pos_avail:
            n_pos = pos_avail
            n_neg = int(round(n_pos * (1.0 - r) / r))
    else:
        n_pos = int(round(n_trials * r))
        n_neg = n_trials - n_pos
    if n_pos > pos_avail:
        raise ValueError(
            f"{n_pos} positives requested but only {pos_avail} same-speaker "
            f"pairs exist")
    if n_neg < len(combos):
        raise ValueError(
            f"{n_neg} negatives cannot cover all {len(combos)} speaker "
            f"combinations; raise n_trials or lower the positive ratio")

    trials = []
    # positives: cycle speakers, drawing shuffled within-speaker pairs
    pools = {}
    for sid in sids:
        u = utts[sid]
        pairs = [(u[i], u[j]) for i in range(len(u)) for j in range(i + 1, len(u))]
        rng.shuffle(pairs)
        pools[sid] = pairs
    order = list(sids)
    rng.shuffle(order)
    taken = 0
    while taken < n_pos:
        progressed = False
        for sid in order:
            if taken >= n_pos:
                break
            if pools[sid]:
                a, b = pools[sid].pop()
                trials.append(TrialPair(a, b, 1, _stratum_tags(attrs[sid],
                                                               attrs[sid])))
                taken += 1
                progressed = True
        if not progressed:
            break

    # negatives: one per combination first, then balance stratum cells
    used = set()

    def sample_pair(sa, sb):
        for _ in range(20):
            a = utts[sa][rng.integers(len(utts[sa]))]
            b = utts[sb][rng.integers(len(utts[sb]))]
            if (a, b) not in used:
                used.add((a, b))
                return a, b
        return None

    shuffled = list(combos)
    rng.shuffle(shuffled)
    cells = {}
    neg_count = 0
    for sa, sb in shuffled:
        tags = _stratum_tags(attrs[sa], attrs[sb])
        cells.setdefault(tags, []).append((sa, sb))
        pair = sample_pair(sa, sb)
        if pair is None:
            continue
        trials.append(TrialPair(pair[0], pair[1], 0, tags))
        neg_count += 1
    cell_counts = {tags: sum(1 for t in trials if t.label == 0
                             and t.strata_tags == tags) for tags in cells}
    exhausted = set()
    while neg_count < n_neg and len(exhausted) < len(cells):
        tags = min((t for t in cells if t not in exhausted),
                   key=lambda t: (cell_counts[t], t))
        combo_list = cells[tags]
        sa, sb = combo_list[rng.integers(len(combo_list))]
        pair = sample_pair(sa, sb)
        if pair is None:
            # probe the rest of the cell before declaring it exhausted
            found = False
            for sa, sb in combo_list:
                pair = sample_pair(sa, sb)
                if pair is not None:
                    found = True
                    break
            if not found:
                exhausted.add(tags)
                continue
        trials.append(TrialPair(pair[0], pair[1], 0, tags))
        cell_counts[tags] += 1
        neg_count += 1

    idx = rng.permutation(len(trials))
    return [trials[i] for i in idx]


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n_speakers: int = 96
    utts_per_speaker: int = 10
    n_channels: int = 32
    n_layers: int = 7
    t_range: tuple = (100, 200)
    speaker_layer_profile: tuple = ()   # defaults to mid-layer bump
    noise_sigma: float = 0.3
    seed: int = 0

    def resolved_profile(self):
        if self.speaker_layer_profile:
            prof = np.asarray(self.speaker_layer_profile, dtype=np.float64)
        else:
            prof = np.zeros(self.n_layers)
            lo = self.n_layers // 3
            hi = max(lo + 1, (2 * self.n_layers) // 3 + 1)
            prof[lo:hi] = 0.15
        if prof.shape != (self.n_layers,):
            raise ValueError("speaker_layer_profile must have one entry per "
                             "layer")
        if prof.max() <= 0:
            raise ValueError("speaker_layer_profile needs an entry > 0")
        if prof.min() < 0 or prof.max() > 1:
            raise ValueError("profile entries must lie in [0, 1]")
        return prof

    def validate(self):
        if self.n_speakers < 2:
            raise ValueError("need at least 2 speakers")
        if self.utts_per_speaker < 2:
            raise ValueError("need at least 2 utterances per speaker")
        tmin, tmax = self.t_range
        if tmin < 1 or tmax < tmin:
            raise ValueError(f"bad frame range {self.t_range}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        self.resolved_profile()
        return self


STRATA_GROUPS = ("g0", "g1")
STRATA_REGIONS = ("r0", "r1", "r2", "r3")


def synth_speakers(spec):
    """Deterministic speaker ids with balanced synthetic strata."""
    speakers = []
    for s in range(spec.n_speakers):
        speakers.append(SpeakerAttr(
            speaker_id=f"s{s:04d}",
            strata={"group": STRATA_GROUPS[s % len(STRATA_GROUPS)],
                    "region": STRATA_REGIONS[(s // 2) % len(STRATA_REGIONS)]}))
    return speakers


def synth_dataset(spec, out_dir):
    """Write one feature file per utterance; return (entries, speakers).

    Each speaker has a fixed random identity vector injected at the layers
    the profile marks; a global per-frame nuisance signal is shared by all
    speakers and layers; iid Gaussian noise is scaled by noise_sigma.
    """
    spec.validate()
    prof = spec.resolved_profile()
    rng = np.random.default_rng(spec.seed)
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)

    tmax = spec.t_range[1]
    nuisance = (NUISANCE_SCALE
                * rng.standard_normal((spec.n_channels, tmax)))
    identities = rng.standard_normal((spec.n_speakers, spec.n_channels))
    speakers = synth_speakers(spec)

    entries = []
    for s, spk in enumerate(speakers):
        base = identities[s][:, None, None] * prof[None, :, None]  # (C, L, 1)
        for u in range(spec.utts_per_speaker):
            t = int(rng.integers(spec.t_range[0], spec.t_range[1] + 1))
            stack = (base
                     + nuisance[:, None, :t]
                     + spec.noise_sigma * rng.standard_normal(
                         (spec.n_channels, spec.n_layers, t)))
            utt = f"{spk.speaker_id}_u{u:03d}"
            rel = os.path.join("features", f"{utt}.lsf")
            write_feature(os.path.join(out_dir, rel),
                          stack.astype(np.float32))
            entries.append(ManifestEntry(utt, spk.speaker_id, rel, t))
    return entries, speakers


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

class FeatureCache:
    """Loads feature files once and keeps them in memory."""

    def __init__(self):
        self._cache = {}

    def get(self, path):
        arr = self._cache.get(path)
        if arr is None:
            arr = read_feature(path)
            self._cache[path] = arr
        return arr


def crop_batch(entries, batch_size, crop_frames, rng, cache=None,
               balance_speakers=True):
    """Assemble a (B, C, L, crop_frames) float32 batch with speaker labels.

    Crops are uniform-random contiguous windows; shorter utterances are
    zero-padded on the right.  With speaker balancing the batch cycles
    through speakers so classes stay as even as the batch size allows.
    """
    if not entries:
        raise ValueError("empty manifest")
    if cache is None:
        cache = FeatureCache()
    by_speaker = {}
    for e in entries:
        by_speaker.setdefault(e.speaker_id, []).append(e)
    sids = sorted(by_speaker)
    labels_map = {sid: i for i, sid in enumerate(sids)}

    chosen = []
    if balance_speakers:
        order = list(sids)
        rng.shuffle(order)
        i = 0
        while len(chosen) < batch_size:
            sid = order[i % len(order)]
            lst = by_speaker[sid]
            chosen.append(lst[rng.integers(len(lst))])
            i += 1
    else:
        for _ in range(batch_size):
            chosen.append(entries[rng.integers(len(entries))])

    first = cache.get(chosen[0].path)
    c, l = first.shape[0], first.shape[1]
    batch = np.zeros((batch_size, c, l, crop_frames), dtype=np.float32)
    labels = np.zeros(batch_size, dtype=np.int64)
    for i, e in enumerate(chosen):
        arr = cache.get(e.path)
        t = arr.shape[2]
        if t >= crop_frames:
            off = int(rng.integers(0, t - crop_frames + 1))
            batch[i] = arr[:, :, off:off + crop_frames]
        else:
            batch[i, :, :, :t] = arr
        labels[i] = labels_map[e.speaker_id]
    return batch, labels
