"""Dataset manifests, binary relabeling, stratified folds, experiment-setup
composition, and a synthetic two-domain corpus generator.

The clinical corpus behind the published experiments is private; the
synthesizer produces a stand-in with the same structure: a large, clean,
low-band-emphasized stethoscope pool at 4 kHz and a small, noisier
smartphone pool at 48 kHz, with crackle/wheeze/both abnormalities layered
over a shared breath-noise base.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal as sps

from .errors import ConfigError, InvalidInput, LabelError, StratificationError
from .signals import AudioRecording, save_wav

BINARY_LABELS = ("normal", "abnormal")
ABNORMAL_RAW = frozenset({"crackle", "wheeze", "both"})
MANIFEST_FIELDS = ("audio_path", "device_domain", "site", "raw_label",
                   "patient_id", "sample_rate_hz")
_SITES_CYCLE = ("RUL", "LUL", "RLL", "LLL")


@dataclass(frozen=True)
class ManifestEntry:
    audio_path: str
    device_domain: str
    site: str
    raw_label: str
    patient_id: str
    sample_rate_hz: int
    extra: dict = field(default_factory=dict)


@dataclass
class Manifest:
    entries: list[ManifestEntry]
    provenance: str = ""

    def __len__(self) -> int:
        return len(self.entries)


def binarize(raw_label: str) -> str:
    """Collapse the four raw classes to the binary screening labels.

    Accepts its own output ('normal'/'abnormal' map to themselves) so the
    operation is idempotent; 'unlabeled' or unknown labels raise LabelError.
    """
    if raw_label in BINARY_LABELS:
        return raw_label
    if raw_label in ABNORMAL_RAW:
        return "abnormal"
    raise LabelError(f"cannot binarize label {raw_label!r}")


def manifest_text(manifest: Manifest) -> str:
    """Serialize: leading '#' provenance lines, header, comma-delimited rows."""
    extra_keys = sorted({k for e in manifest.entries for k in e.extra})
    buf = io.StringIO()
    for line in manifest.provenance.splitlines():
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(MANIFEST_FIELDS) + extra_keys)
    for e in manifest.entries:
        row = [e.audio_path, e.device_domain, e.site, e.raw_label,
               e.patient_id, str(e.sample_rate_hz)]
        row += [e.extra.get(k, "") for k in extra_keys]
        writer.writerow(row)
    return buf.getvalue()


def save_manifest(path, manifest: Manifest) -> None:
    Path(path).write_text(manifest_text(manifest))


def load_manifest(path) -> Manifest:
    """Read a manifest written by save_manifest (or hand-edited to match)."""
    path = Path(path)
    provenance_lines = []
    rows = []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("#"):
                provenance_lines.append(line[1:].strip())
            elif line.strip():
                rows.append(line)
    if not rows:
        return Manifest(entries=[], provenance="\n".join(provenance_lines))
    reader = csv.DictReader(rows)
    entries = []
    seen = set()
    for rec in reader:
        core = {k: rec.pop(k, None) for k in MANIFEST_FIELDS}
        missing = [k for k, v in core.items() if v is None]
        if missing:
            raise InvalidInput(f"manifest {path} missing columns {missing}")
        if core["audio_path"] in seen:
            raise InvalidInput(f"duplicate audio_path {core['audio_path']!r} in {path}")
        seen.add(core["audio_path"])
        entries.append(ManifestEntry(
            audio_path=core["audio_path"], device_domain=core["device_domain"],
            site=core["site"], raw_label=core["raw_label"],
            patient_id=core["patient_id"], sample_rate_hz=int(core["sample_rate_hz"]),
            extra={k: v for k, v in rec.items() if v}))
    return Manifest(entries=entries, provenance="\n".join(provenance_lines))


def resolve_audio_path(manifest_path, entry: ManifestEntry) -> Path:
    """Entry paths are stored relative to the manifest file's directory."""
    p = Path(entry.audio_path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def split_by_domain(manifest: Manifest) -> dict[str, Manifest]:
    out: dict[str, Manifest] = {}
    for e in manifest.entries:
        out.setdefault(e.device_domain, Manifest(entries=[], provenance=manifest.provenance))
        out[e.device_domain].entries.append(e)
    return out


@dataclass(frozen=True)
class FoldSplit:
    """k disjoint, exhaustive test folds over manifest entry indices."""

    k: int
    folds: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]  # (train_ids, test_ids) per fold
    seed: int

    def to_json_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed,
                "folds": [{"train": list(tr), "test": list(te)} for tr, te in self.folds]}

    @classmethod
    def from_json_dict(cls, data: dict) -> "FoldSplit":
        folds = tuple((tuple(f["train"]), tuple(f["test"])) for f in data["folds"])
        return cls(k=int(data["k"]), folds=folds, seed=int(data["seed"]))


def stratified_kfold(manifest: Manifest, k: int, seed: int,
                     group_by_patient: bool = False) -> FoldSplit:
    """Partition entries into k test folds preserving binary class balance.

    Per-fold class counts deviate from the proportional ideal by at most one
    sample per class. Deterministic for a fixed seed.

    group_by_patient keeps all of a patient's clips in the same fold, which
    avoids subject leakage but can miss the +-1 balance guarantee; the
    default splits at sample level, matching per-sample fold arithmetic.
    """
    if k < 2:
        raise StratificationError(f"k must be >= 2, got {k}")
    labels = [binarize(e.raw_label) for e in manifest.entries]
    rng = np.random.default_rng(seed)
    test_folds: list[list[int]] = [[] for _ in range(k)]

    if group_by_patient:
        patients: dict[str, list[int]] = {}
        for i, e in enumerate(manifest.entries):
            patients.setdefault(e.patient_id, []).append(i)
        order = rng.permutation(sorted(patients))
        sizes = [0] * k
        for pid in order:
            dest = int(np.argmin(sizes))
            test_folds[dest].extend(patients[pid])
            sizes[dest] += len(patients[pid])
        for cls_label in BINARY_LABELS:
            total = sum(1 for lab in labels if lab == cls_label)
            if total < k:
                raise StratificationError(f"class {cls_label!r} has {total} samples, need >= {k}")
    else:
        for cls_label in BINARY_LABELS:
            ids = np.array([i for i, lab in enumerate(labels) if lab == cls_label])
            if ids.size < k:
                raise StratificationError(f"class {cls_label!r} has {ids.size} samples, need >= {k}")
            ids = ids[rng.permutation(ids.size)]
            base, rem = divmod(ids.size, k)
            start = 0
            for f in range(k):
                take = base + (1 if f < rem else 0)
                test_folds[f].extend(ids[start:start + take].tolist())
                start += take

    all_ids = set(range(len(manifest.entries)))
    folds = []
    for f in range(k):
        test = tuple(sorted(test_folds[f]))
        train = tuple(sorted(all_ids.difference(test)))
        folds.append((train, test))
    return FoldSplit(k=k, folds=tuple(folds), seed=seed)


SETUP_NAMES = {
    1: "Smartphone Only",
    2: "Combined w/o MixStyle",
    3: "Combined w/ MixStyle",
    4: "Stethoscope Only",
    5: "Stethoscope Trained, Smartphone Tested",
}


@dataclass(frozen=True)
class ComposedFold:
    train: tuple[ManifestEntry, ...]
    test: tuple[ManifestEntry, ...]


def compose_setup(setup: int, manifests: dict[str, Manifest],
                  splits: dict[str, FoldSplit]) -> list[ComposedFold]:
    """Build per-fold train/test sets for one of the five experiment setups.

    Setups 1-3 train and test on the smartphone folds; 2 and 3 add the
    fold-aligned stethoscope train fold to the training set. Setup 4 trains
    and tests on the stethoscope folds. Setup 5 pairs the stethoscope train
    fold with the smartphone test fold, so its training sets match Setup 4's.

    Args:
        setup: 1..5.
        manifests: per-domain manifests keyed 'smartphone'/'stethoscope'.
        splits: per-domain FoldSplits over the corresponding manifest.

    Returns:
        One ComposedFold per cross-validation fold.
    """
    if setup not in SETUP_NAMES:
        raise ConfigError(f"unknown setup {setup}, expected 1..5")
    needs = {1: ["smartphone"], 2: ["smartphone", "stethoscope"],
             3: ["smartphone", "stethoscope"], 4: ["stethoscope"],
             5: ["smartphone", "stethoscope"]}[setup]
    for domain in needs:
        if manifests.get(domain) is None:
            raise ConfigError(f"setup {setup} requires a {domain} manifest")
        if splits.get(domain) is None:
            raise ConfigError(f"setup {setup} requires a {domain} fold split")
    ks = {splits[d].k for d in needs}
    if len(ks) != 1:
        raise ConfigError(f"fold counts differ across domains: {sorted(ks)}")
    k = ks.pop()

    def pick(domain: str, ids) -> tuple[ManifestEntry, ...]:
        entries = manifests[domain].entries
        return tuple(entries[i] for i in ids)

    folds = []
    for f in range(k):
        if setup == 1:
            tr, te = splits["smartphone"].folds[f]
            folds.append(ComposedFold(pick("smartphone", tr), pick("smartphone", te)))
        elif setup in (2, 3):
            ptr, pte = splits["smartphone"].folds[f]
            str_, _ = splits["stethoscope"].folds[f]
            train = pick("stethoscope", str_) + pick("smartphone", ptr)
            folds.append(ComposedFold(train, pick("smartphone", pte)))
        elif setup == 4:
            tr, te = splits["stethoscope"].folds[f]
            folds.append(ComposedFold(pick("stethoscope", tr), pick("stethoscope", te)))
        else:  # 5
            str_, _ = splits["stethoscope"].folds[f]
            _, pte = splits["smartphone"].folds[f]
            folds.append(ComposedFold(pick("stethoscope", str_), pick("smartphone", pte)))
    return folds


@dataclass(frozen=True)
class SynthesisSpec:
    """Parameters of the synthetic corpus.

    counts maps (device_domain, raw_label) to a clip count. Class parameters
    shape the abnormal events; device parameters apply the final coloration
    that creates the domain gap (stethoscope low-band emphasis vs smartphone
    flat response plus a broadband noise floor, stated in dB relative to the
    clip's in-band RMS).
    """

    counts: dict = field(default_factory=dict)
    clip_s: float = 3.0
    crackle_density_per_s: float = 6.0
    crackle_decay_s: float = 0.004
    wheeze_band_hz: tuple[float, float] = (200.0, 800.0)
    wheeze_mod_depth: float = 0.35
    wheeze_gain_db: float = 14.0
    breath_lowpass_hz: float = 700.0
    stethoscope_emphasis_hz: float = 500.0
    stethoscope_leak: float = 0.15
    smartphone_noise_floor_db: float = -18.0
    smartphone_noise_jitter_db: float = 4.0
    smartphone_highpass_hz: float = 120.0
    seed: int = 0

    def __post_init__(self):
        for (domain, label), n in self.counts.items():
            if n < 0:
                raise InvalidInput(f"negative count for {(domain, label)}")
        lo, hi = self.wheeze_band_hz
        if not 0 < lo < hi:
            raise InvalidInput(f"bad wheeze band {self.wheeze_band_hz}")
        if self.smartphone_noise_jitter_db < 0:
            raise InvalidInput("smartphone_noise_jitter_db must be >= 0")


def synthesis_spec_from_dict(data: dict) -> SynthesisSpec:
    """Build a SynthesisSpec from a declarative config mapping.

    counts nests as {device_domain: {label: n}}; remaining keys map straight
    onto SynthesisSpec fields.
    """
    data = dict(data)
    counts = {}
    for domain, per_label in data.pop("counts", {}).items():
        if domain not in DEVICE_RATES:
            raise InvalidInput(f"unknown device domain {domain!r} in counts")
        for label, n in per_label.items():
            counts[(domain, label)] = int(n)
    if "wheeze_band_hz" in data:
        data["wheeze_band_hz"] = tuple(float(v) for v in data["wheeze_band_hz"])
    try:
        return SynthesisSpec(counts=counts, **data)
    except TypeError as exc:
        raise InvalidInput(f"bad synthesis spec: {exc}") from exc


# Class proportions follow the two device pools' published distributions.
_STETH_MIX = {"normal": 0.5340, "crackle": 0.1763, "wheeze": 0.1460, "both": 0.1437}
_PHONE_MIX = {"normal": 0.6841, "crackle": 0.1402, "wheeze": 0.0739, "both": 0.1017}
DEVICE_RATES = {"stethoscope": 4000, "smartphone": 48000}


def default_corpus_spec(steth_total: int = 2000, phone_total: int = 300,
                        seed: int = 0) -> SynthesisSpec:
    """Desk-scale corpus spec preserving the large/small domain asymmetry."""

    def allocate(total: int, mix: dict) -> dict:
        raw = {lab: total * frac for lab, frac in mix.items()}
        out = {lab: int(math.floor(v)) for lab, v in raw.items()}
        leftovers = sorted(mix, key=lambda lab: raw[lab] - out[lab], reverse=True)
        for lab in leftovers[: total - sum(out.values())]:
            out[lab] += 1
        return out

    counts = {}
    for lab, n in allocate(steth_total, _STETH_MIX).items():
        counts[("stethoscope", lab)] = n
    for lab, n in allocate(phone_total, _PHONE_MIX).items():
        counts[("smartphone", lab)] = n
    return SynthesisSpec(counts=counts, seed=seed)


def _breath_base(rng: np.random.Generator, n: int, rate: int, lowpass_hz: float) -> np.ndarray:
    """Band-limited noise under a slow breathing envelope, RMS-normalized."""
    noise = rng.standard_normal(n)
    sos = sps.butter(2, lowpass_hz, btype="lowpass", fs=rate, output="sos")
    shaped = sps.sosfiltfilt(sos, noise)
    t = np.arange(n) / rate
    f_breath = rng.uniform(0.25, 0.45)
    phase = rng.uniform(0, 2 * np.pi)
    env = 0.35 + 0.65 * (0.5 + 0.5 * np.sin(2 * np.pi * f_breath * t + phase)) ** 1.5
    out = shaped * env
    return out / math.sqrt(float((out ** 2).mean()))


def _band_rms(x: np.ndarray, rate: int, lo: float, hi: float) -> float:
    spectrum = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(len(x), 1.0 / rate)
    sel = (freqs >= lo) & (freqs < hi)
    return math.sqrt(spectrum[sel].sum() / len(x) ** 2 * 2 + 1e-30)


def _add_crackles(rng: np.random.Generator, x: np.ndarray, rate: int,
                  density_per_s: float, decay_s: float) -> np.ndarray:
    n = len(x)
    dur = n / rate
    count = int(math.ceil(density_per_s * dur)) + int(rng.integers(0, 3))
    out = x.copy()
    burst_len = int(6 * decay_s * rate)
    t = np.arange(burst_len) / rate
    for _ in range(count):
        start = int(rng.integers(0, max(1, n - burst_len)))
        freq = rng.uniform(250.0, 1400.0)
        amp = rng.uniform(2.5, 5.0)
        burst = amp * np.exp(-t / decay_s) * np.sin(2 * np.pi * freq * t)
        out[start:start + burst_len] += burst
    return out


def _add_wheeze(rng: np.random.Generator, x: np.ndarray, rate: int,
                band_hz: tuple[float, float], mod_depth: float, gain_db: float) -> np.ndarray:
    n = len(x)
    t = np.arange(n) / rate
    f0 = rng.uniform(*band_hz)
    # ~1% frequency vibrato as phase modulation (beta = delta_f / f_vibrato)
    f_vib = rng.uniform(2.0, 5.0)
    vibrato = (0.01 * f0 / f_vib) * np.sin(2 * np.pi * f_vib * t)
    mod = 1.0 - mod_depth * (0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(0.25, 0.45) * t
                                                + rng.uniform(0, 2 * np.pi)))
    base_band = _band_rms(x, rate, *band_hz)
    amp = base_band * 10 ** (gain_db / 20.0) * math.sqrt(2.0)
    tone = amp * mod * np.sin(2 * np.pi * f0 * t + vibrato + rng.uniform(0, 2 * np.pi))
    return x + tone


def _device_color(rng: np.random.Generator, x: np.ndarray, rate: int, domain: str,
                  spec: SynthesisSpec) -> np.ndarray:
    if domain == "stethoscope":
        sos = sps.butter(2, spec.stethoscope_emphasis_hz, btype="lowpass", fs=rate, output="sos")
        return sps.sosfiltfilt(sos, x) + spec.stethoscope_leak * x
    # smartphone: flat response above a mic highpass, plus a broadband floor
    # whose level varies clip to clip (different handsets, rooms, distances)
    sos = sps.butter(2, spec.smartphone_highpass_hz, btype="highpass", fs=rate, output="sos")
    shaped = sps.sosfiltfilt(sos, x)
    clip_rms = math.sqrt(float((shaped ** 2).mean()))
    floor_db = spec.smartphone_noise_floor_db + rng.uniform(
        -spec.smartphone_noise_jitter_db, spec.smartphone_noise_jitter_db)
    noise = rng.standard_normal(len(x))
    # scale so the noise *within the analysis band* sits at the drawn floor
    in_band = _band_rms(noise, rate, 0.0, 2000.0)
    noise *= clip_rms * 10 ** (floor_db / 20.0) / in_band
    return shaped + noise


def synthesize_clip(spec: SynthesisSpec, domain: str, label: str,
                    rng: np.random.Generator, rate: int | None = None,
                    duration_s: float | None = None) -> np.ndarray:
    """One synthetic waveform (peak-normalized to 0.9) for a domain and class."""
    rate = rate or DEVICE_RATES[domain]
    n = int(round((duration_s or spec.clip_s) * rate))
    x = _breath_base(rng, n, rate, spec.breath_lowpass_hz)
    if label in ("crackle", "both"):
        x = _add_crackles(rng, x, rate, spec.crackle_density_per_s, spec.crackle_decay_s)
    if label in ("wheeze", "both"):
        x = _add_wheeze(rng, x, rate, spec.wheeze_band_hz, spec.wheeze_mod_depth,
                        spec.wheeze_gain_db)
    x = _device_color(rng, x, rate, domain, spec)
    return 0.9 * x / np.abs(x).max()


def synth_generate(spec: SynthesisSpec, out_dir) -> Manifest:
    """Write the synthetic corpus to disk and return its combined manifest.

    Deterministic for a fixed spec: clip i always gets the generator seeded
    by (spec.seed, i), so regenerating produces byte-identical files.

    Also writes manifest_all.csv plus one manifest_<domain>.csv per device
    into out_dir.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    clip_index = 0
    order = sorted(spec.counts.items(), key=lambda kv: (kv[0][0], kv[0][1]))
    per_patient = 8
    for (domain, label), count in order:
        rate = DEVICE_RATES[domain]
        (out_dir / domain).mkdir(parents=True, exist_ok=True)
        for j in range(count):
            rng = np.random.default_rng([spec.seed, clip_index])
            samples = synthesize_clip(spec, domain, label, rng, rate=rate)
            rel = f"{domain}/{domain[:5]}-{label}-{j:05d}.wav"
            rec = AudioRecording(samples=samples, sample_rate_hz=rate,
                                 device_domain=domain, site=_SITES_CYCLE[j % 4],
                                 raw_label=label,
                                 patient_id=f"synth-{domain[:5]}-{j // per_patient:04d}")
            save_wav(out_dir / rel, rec)
            entries.append(ManifestEntry(
                audio_path=rel, device_domain=domain, site=rec.site, raw_label=label,
                patient_id=rec.patient_id, sample_rate_hz=rate))
            clip_index += 1
    provenance = (f"synthetic corpus, seed={spec.seed}, "
                  f"clips={sum(spec.counts.values())}, clip_s={spec.clip_s}")
    manifest = Manifest(entries=entries, provenance=provenance)
    save_manifest(out_dir / "manifest_all.csv", manifest)
    for domain, sub in split_by_domain(manifest).items():
        save_manifest(out_dir / f"manifest_{domain}.csv", sub)
    return manifest
