"""Acceptance suite: one test per release criterion, at the stated tolerances.

Criteria 1-5 are fast property checks (augmentation algebra, gradients,
metrics, splits, DSP). Criterion 6 trains all five experiment setups on the
default synthetic corpus and checks the directional domain-gap findings;
criteria 7 and 8 drive the CLI and the HTTP service end to end. Expect the
module to take several minutes; everything is seed-pinned.
"""

import io
import json
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from fastapi.testclient import TestClient
from scipy.io import wavfile

from lungsound import cli
from lungsound import datasets as ds
from lungsound import service as svc
from lungsound import signals as sg
from lungsound.features import FeatureConfig
from lungsound.metrics import MetricsReport, compute_metrics, confusion
from lungsound.model import (BatchFeatures, FrequencyMixStyle, MixStyleConfig,
                             ModelConfig, SpectrogramTransformer,
                             encode_domains, encode_labels, select_partners)
from lungsound.training import reference_train_config, run_experiment

torch.set_num_threads(1)

# Feature geometry for the reference experiment: non-overlapping 16x16
# patches over 64 mel bins at a 16 ms hop -> a (4, 11) grid per 3 s window.
REFERENCE_FCFG = FeatureConfig(hop_s=0.016, stride_f=16, stride_t=16)


# --------------------------------------------------------------------------
# criterion 1: MixStyle algebra
# --------------------------------------------------------------------------

def _mix_oracle(tokens, partners, lam, rows, cols, eps=1e-6):
    """Statistics mixing recomputed in numpy, straight from the definition."""
    out = tokens.copy()
    batch, _, dim = tokens.shape
    grids = tokens[:, 1:, :].reshape(batch, rows, cols, dim)
    mu = grids.mean(axis=1, keepdims=True)
    sigma = np.maximum(grids.std(axis=1, keepdims=True), eps)
    for i in range(batch):
        j = partners[i]
        if j < 0:
            continue
        x_hat = (grids[i] - mu[i]) / sigma[i]
        mu_mix = lam[i] * mu[i] + (1 - lam[i]) * mu[j]
        sigma_mix = lam[i] * sigma[i] + (1 - lam[i]) * sigma[j]
        out[i, 1:, :] = (x_hat * sigma_mix + mu_mix).reshape(rows * cols, dim)
    return out


def _mix_batch(batch=8, rows=4, cols=3, dim=16, seed=0, single_domain=False):
    rng = np.random.default_rng(seed)
    tokens = rng.standard_normal((batch, 1 + rows * cols, dim)).astype(np.float32)
    labels = ["normal", "abnormal"] * (batch // 2)
    if single_domain:
        domains = ["smartphone"] * batch
    else:
        domains = ["stethoscope", "smartphone"] * (batch // 2)
    feats = BatchFeatures(tokens=torch.from_numpy(tokens.copy()),
                          labels=encode_labels(labels),
                          domains=encode_domains(domains),
                          grid_shape=(rows, cols))
    return tokens, feats


def test_criterion_1_mixstyle_algebra():
    t0 = time.monotonic()
    mix = FrequencyMixStyle(MixStyleConfig(p=1.0))
    rng = np.random.default_rng(0)
    pairing = torch.tensor([1, 0, 3, 2, 5, 4, 7, 6])

    # lambda = 1 keeps every item's own statistics: identity within 1e-6
    tokens, feats = _mix_batch(seed=1)
    out = mix(feats, rng=rng, training=True, force_lambda=1.0, force_pairing=pairing)
    np.testing.assert_allclose(out.tokens.numpy(), tokens, atol=1e-6)

    # eval mode is a bitwise no-op
    tokens, feats = _mix_batch(seed=2)
    out = mix(feats, rng=rng, training=False)
    assert out is feats
    assert torch.equal(out.tokens, torch.from_numpy(tokens))

    # lambda = 0 adopts the partner's statistics: recomputation oracle, 1e-5
    tokens, feats = _mix_batch(seed=3)
    out = mix(feats, rng=rng, training=True, force_lambda=0.0, force_pairing=pairing)
    want = _mix_oracle(tokens.astype(np.float64), pairing.numpy(),
                       np.zeros(len(tokens)), rows=4, cols=3)
    np.testing.assert_allclose(out.tokens.numpy(), want, atol=1e-5)

    # pairing constraint: same class, different device, over 500 random batches
    violations = 0
    for trial in range(500):
        trial_rng = np.random.default_rng(1000 + trial)
        n = int(trial_rng.integers(2, 17))
        labels = trial_rng.integers(0, 2, size=n)
        domains = trial_rng.integers(0, 2, size=n)
        partners = select_partners(labels, domains, trial_rng)
        for i, j in enumerate(partners):
            if j < 0:
                continue
            if j == i or labels[j] != labels[i] or domains[j] == domains[i]:
                violations += 1
    assert violations == 0

    # a single-device batch has no valid partners: no-op
    tokens, feats = _mix_batch(seed=4, single_domain=True)
    out = mix(feats, rng=rng, training=True)
    assert out is feats

    assert time.monotonic() - t0 < 60.0


# --------------------------------------------------------------------------
# criterion 2: analytic gradients vs central finite differences
# --------------------------------------------------------------------------

def test_criterion_2_gradients_match_finite_differences():
    t0 = time.monotonic()
    mcfg = ModelConfig(patch_dim=12, grid_rows=3, grid_cols=2, embed_dim=8,
                       num_layers=2, num_heads=2,
                       mixstyle=MixStyleConfig(p=1.0, insertion_depths=(0, 1)))
    model = SpectrogramTransformer(mcfg).double()

    gen = torch.Generator().manual_seed(1)
    patches = torch.randn(4, mcfg.num_patches, mcfg.patch_dim,
                          generator=gen, dtype=torch.float64)
    labels = torch.tensor([0, 0, 1, 1])
    domains = torch.tensor([0, 1, 0, 1])
    targets = torch.tensor([0, 1, 1, 0])
    pairing = torch.tensor([1, 0, 3, 2])          # frozen pairing
    lam = np.array([0.3, 0.8, 0.25, 0.6])         # frozen lambdas

    def loss_fn():
        feats = model.embed(patches, labels, domains,
                            grid_shape=(mcfg.grid_rows, mcfg.grid_cols))
        feats = model.encode(feats, training=True,
                             force_lambda=lam, force_pairing=pairing)
        return torch.nn.functional.cross_entropy(model.logits(feats), targets)

    model.zero_grad()
    loss_fn().backward()

    h = 1e-6
    worst = 0.0
    for param in model.parameters():
        flat = param.data.view(-1)
        grad = param.grad.view(-1)
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + h
            plus = loss_fn().item()
            flat[idx] = orig - h
            minus = loss_fn().item()
            flat[idx] = orig
            fd = (plus - minus) / (2.0 * h)
            an = grad[idx].item()
            # the 1e-5 floor marks the resolution limit of the FD probe
            # (cancellation noise ~ loss*eps/h ~ 3e-10 per difference);
            # below it the relative comparison measures noise, not gradients
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-5))
    assert worst < 1e-4
    assert time.monotonic() - t0 < 120.0


# --------------------------------------------------------------------------
# criterion 3: metrics against a brute-force recount
# --------------------------------------------------------------------------

def test_criterion_3_metrics_oracle_equivalence():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 200))
        y_true = [("abnormal" if b else "normal") for b in rng.integers(0, 2, n)]
        y_pred = [("abnormal" if b else "normal") for b in rng.integers(0, 2, n)]

        tp = sum(1 for t, p in zip(y_true, y_pred) if t == p == "abnormal")
        tn = sum(1 for t, p in zip(y_true, y_pred) if t == p == "normal")
        fp = sum(1 for t, p in zip(y_true, y_pred) if (t, p) == ("normal", "abnormal"))
        fn = sum(1 for t, p in zip(y_true, y_pred) if (t, p) == ("abnormal", "normal"))
        se = 100.0 * tp / (tp + fn) if tp + fn else 0.0
        sp = 100.0 * tn / (tn + fp) if tn + fp else 0.0
        f1 = 2.0 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn else 0.0

        m = compute_metrics(confusion(y_true, y_pred))
        assert abs(m.sensitivity - se) < 1e-9
        assert abs(m.specificity - sp) < 1e-9
        assert abs(m.score - (se + sp) / 2.0) < 1e-9
        assert abs(m.f1 - f1) < 1e-9

    # hand-computed case: TP=2, TN=1, FP=1, FN=1
    y_true = ["abnormal", "abnormal", "abnormal", "normal", "normal"]
    y_pred = ["abnormal", "abnormal", "normal", "abnormal", "normal"]
    m = compute_metrics(confusion(y_true, y_pred))
    assert round(m.sensitivity, 2) == 66.67
    assert round(m.specificity, 2) == 50.00
    assert round(m.score, 2) == 58.33
    assert round(m.f1, 3) == 0.667


# --------------------------------------------------------------------------
# criterion 4: stratified split properties at the 888/410 scale
# --------------------------------------------------------------------------

def test_criterion_4_stratified_split_properties():
    entries = []
    for i in range(888 + 410):
        label = "normal" if i < 888 else "crackle"
        entries.append(ds.ManifestEntry(audio_path=f"clip{i:04d}.wav",
                                        device_domain="smartphone", site="RUL",
                                        raw_label=label, patient_id=f"p{i:04d}",
                                        sample_rate_hz=48000))
    manifest = ds.Manifest(entries=entries, provenance="synthetic 888/410 totals")

    split = ds.stratified_kfold(manifest, k=5, seed=0)
    again = ds.stratified_kfold(manifest, k=5, seed=0)
    assert split.folds == again.folds  # deterministic under the seed

    seen = []
    for _, test_idx in split.folds:
        seen.extend(test_idx)
    assert sorted(seen) == list(range(1298))  # every id in exactly one test fold

    for klass, lo, hi in (("normal", 0, 888), ("abnormal", 888, 1298)):
        per_fold = [sum(1 for i in test_idx if lo <= i < hi)
                    for _, test_idx in split.folds]
        assert max(per_fold) - min(per_fold) <= 1, (klass, per_fold)

    for train_idx, test_idx in split.folds:
        assert sorted(train_idx + test_idx) == list(range(1298))  # complement


# --------------------------------------------------------------------------
# criterion 5: DSP suite
# --------------------------------------------------------------------------

def test_criterion_5_dsp_suite():
    rate = 48000
    t = np.arange(3 * rate) / rate

    # 100 Hz tone survives 48 kHz -> 4 kHz resampling within 1% amplitude
    tone = np.sin(2 * np.pi * 100.0 * t)
    rec = sg.AudioRecording(samples=tone, sample_rate_hz=rate,
                            device_domain="smartphone")
    out = sg.resample(rec, 4000)
    mid = out.samples[1000:-1000]
    amplitude = np.sqrt(2.0) * np.sqrt(np.mean(mid ** 2))
    assert abs(amplitude - 1.0) < 0.01

    # 3 kHz tone is attenuated >= 24 dB by the 1800 Hz low-pass
    tone3k = np.sin(2 * np.pi * 3000.0 * t)
    rec3k = sg.AudioRecording(samples=tone3k, sample_rate_hz=rate,
                              device_domain="smartphone")
    filtered = sg.lowpass_filter(rec3k, cutoff_hz=1800.0)
    in_rms = np.sqrt(np.mean(tone3k[rate:-rate] ** 2))
    out_rms = np.sqrt(np.mean(filtered.samples[rate:-rate] ** 2))
    attenuation_db = 20.0 * np.log10(out_rms / in_rms)
    assert attenuation_db <= -24.0

    # zero phase: impulse response peaks where the impulse was, symmetrically
    impulse = np.zeros(4001)
    impulse[2000] = 1.0
    imp_rec = sg.AudioRecording(samples=impulse, sample_rate_hz=4000,
                                device_domain="smartphone")
    response = sg.lowpass_filter(imp_rec, cutoff_hz=1800.0).samples
    assert int(np.argmax(np.abs(response))) == 2000
    for k in range(1, 200):
        assert abs(response[2000 - k] - response[2000 + k]) < 1e-9


# --------------------------------------------------------------------------
# criterion 6: the synthetic domain-gap experiment
# --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def experiment(tmp_path_factory):
    corpus_dir = tmp_path_factory.mktemp("acceptance_corpus")
    t0 = time.monotonic()
    manifest = ds.synth_generate(ds.default_corpus_spec(), corpus_dir)
    by_domain = ds.split_by_domain(manifest)
    splits = {d: ds.stratified_kfold(by_domain[d], k=5, seed=0) for d in by_domain}
    paths = {d: str(corpus_dir / f"manifest_{d}.csv") for d in by_domain}
    mcfg = ModelConfig.for_features(REFERENCE_FCFG, clip_samples=12000,
                                    mixstyle=MixStyleConfig())
    cache = {}
    reports, folds = {}, {}
    for setups in ([1], [2, 3], [4, 5]):
        result = run_experiment(setups, by_domain, splits, paths,
                                REFERENCE_FCFG, mcfg,
                                reference_train_config(setups[0]), cache=cache)
        for s in setups:
            reports[s] = result.report
        folds.update(result.fold_results)
    return SimpleNamespace(reports=reports, folds=folds,
                           total_s=time.monotonic() - t0, corpus_dir=corpus_dir)


def test_criterion_6_synthetic_domain_gap(experiment):
    scores = {s: experiment.reports[s].aggregates(s)["score"].mean
              for s in range(1, 6)}
    # domain mismatch costs the stethoscope model >= 5 points on phone audio
    assert scores[5] < scores[4] - 5.0, scores
    # combined data + MixStyle beats training on the small phone pool alone
    assert scores[3] >= scores[1], scores
    # and does not hurt relative to plain combined training
    assert scores[3] >= scores[2] - 1.0, scores
    assert experiment.total_s < 45 * 60


# --------------------------------------------------------------------------
# criterion 7: CLI end to end, rerun reproducibility
# --------------------------------------------------------------------------

def test_criterion_7_cli_end_to_end(tmp_path):
    corpus = tmp_path / "corpus"
    assert cli.main(["synth", "--out", str(corpus),
                     "--steth", "40", "--phone", "40", "--seed", "7"]) == 0

    split_args = []
    for domain, flag in (("stethoscope", "--split-steth"),
                         ("smartphone", "--split-phone")):
        split_path = tmp_path / f"split_{domain}.json"
        assert cli.main(["split", "--manifest",
                         str(corpus / f"manifest_{domain}.csv"),
                         "--k", "2", "--seed", "0", "--out", str(split_path)]) == 0
        split_args += [flag, str(split_path)]

    cfg_path = tmp_path / "run.json"
    cfg_path.write_text(json.dumps({
        "features": {"hop_s": 0.02, "stride_f": 16, "stride_t": 16},
        "mixstyle": {"insertion_depths": [0]},
        "model": {"embed_dim": 16, "num_layers": 2, "num_heads": 2},
        "train": {"epochs": 2, "warmup_epochs": 0, "batch_size": 8, "seed": 0},
    }))

    reports = []
    for rerun in ("first", "second"):
        out = tmp_path / rerun
        args = (["run"]
                + [arg for s in range(1, 6) for arg in ("--setup", str(s))]
                + ["--manifest-steth", str(corpus / "manifest_stethoscope.csv"),
                   "--manifest-phone", str(corpus / "manifest_smartphone.csv")]
                + split_args
                + ["--config", str(cfg_path), "--out", str(out), "--quiet"])
        assert cli.main(args) == 0
        reports.append(MetricsReport.from_json((out / "report.json").read_text()))

    table = (tmp_path / "first" / "report.txt").read_text()
    for column in ("Se (%)", "Sp (%)", "Score (%)", "F1"):
        assert column in table
    for name in ("1. Smartphone Only", "2. Combined w/o MixStyle",
                 "3. Combined w/ MixStyle", "4. Stethoscope Only",
                 "5. Stethoscope Trained, Smartphone Tested"):
        assert name in table

    first, second = reports
    for setup in range(1, 6):
        for a, b in zip(first.setups[setup], second.setups[setup]):
            assert abs(a.score - b.score) < 1e-6

    assert cli.main(["report", "--report",
                     str(tmp_path / "first" / "report.json")]) == 0


# --------------------------------------------------------------------------
# criterion 8: service round trip with a trained model
# --------------------------------------------------------------------------

def _upload_bytes(label: str, seed: int) -> bytes:
    spec = ds.default_corpus_spec()
    rng = np.random.default_rng([seed])
    clip = ds.synthesize_clip(spec, "smartphone", label, rng, duration_s=10.0)
    buf = io.BytesIO()
    wavfile.write(buf, ds.DEVICE_RATES["smartphone"],
                  np.clip(clip * 32767, -32768, 32767).astype(np.int16))
    return buf.getvalue()


def test_criterion_8_service_round_trip(experiment, tmp_path):
    fold = experiment.folds[(3, 0)]
    engine = svc.InferenceEngine(fold.model, fold.standardization,
                                 REFERENCE_FCFG, version="acceptance")
    config = svc.ServiceConfig(storage_dir=str(tmp_path / "store"))
    with TestClient(svc.create_app(config, engine=engine)) as client:
        mean_p = {}
        results = {}
        for label in ("normal", "wheeze"):
            sid = client.post("/sessions",
                              json={"symptoms": ["cough"]}).json()["session_id"]
            for i, site in enumerate(svc.SITES):
                resp = client.post(f"/sessions/{sid}/recordings",
                                   params={"site": site},
                                   content=_upload_bytes(label, 900 + i))
                assert resp.status_code == 201
            resp = client.post(f"/sessions/{sid}/assess")
            assert resp.status_code == 200
            result = resp.json()
            probs = [result["sites"][s]["p_abnormal"] for s in svc.SITES]
            assert all(0.0 <= p <= 1.0 for p in probs)
            assert result["overall_verdict"] in ("normal", "abnormal")
            results[label] = (sid, result)
            mean_p[label] = float(np.mean(probs))

        # wheeze-injected session scores strictly above its matched normal
        assert mean_p["wheeze"] > mean_p["normal"], mean_p

        # idempotent re-assess
        sid, first = results["wheeze"]
        assert client.post(f"/sessions/{sid}/assess").json() == first

        # export round-trips through the datasets loader
        text = client.get("/export/manifest").text
        manifest_path = Path(config.storage_dir) / "export.csv"
        manifest_path.write_text(text)
        manifest = ds.load_manifest(manifest_path)
        assert len(manifest) == 8
        for entry in manifest.entries:
            assert entry.device_domain == "smartphone"
            assert ds.resolve_audio_path(manifest_path, entry).exists()
