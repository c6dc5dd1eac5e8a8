"""Spectrogram rendering and occupation metrics."""

import json

import numpy as np
import pytest

from holonsim.audio_core import write_wav
from holonsim.environment import (AgentSpec, CHANNELS, Scenario, SourceSpec,
                                  run_scenario)
from holonsim.params import FRAME_HOP, SAMPLE_RATE
from holonsim.telemetry import (analyze_run, band_occupancy_threshold,
                                load_events, occupation_metrics,
                                save_spectrogram, save_spectrogram_csv,
                                save_spectrogram_pgm, spectrogram_grid)

from synth import silence, sine


def read_pgm(path):
    data = path.read_bytes()
    assert data.startswith(b"P5\n")
    header, rest = data.split(b"255\n", 1)
    dims = header.decode().split("\n")[1].split()
    width, height = int(dims[0]), int(dims[1])
    img = np.frombuffer(rest, dtype=np.uint8).reshape(height, width)
    return img


# --- spectrogram ----------------------------------------------------------------

def test_tone_makes_single_ridge():
    grid = spectrogram_grid(sine(1000.0, duration_s=1.0, amp=0.5))
    assert grid.shape[1] == 513
    ridge = np.argmax(grid, axis=1)
    assert (ridge == 32).all()  # 1000 Hz / 31.25 Hz per bin


def test_silence_renders_uniform_minimum_image(tmp_path):
    grid = spectrogram_grid(silence(1.0))
    path = tmp_path / "quiet.pgm"
    save_spectrogram_pgm(path, grid)
    img = read_pgm(path)
    assert (img == 0).all()


def test_pgm_rows_are_frequency_ascending(tmp_path):
    grid = spectrogram_grid(sine(4000.0, duration_s=0.5, amp=0.5))
    path = tmp_path / "tone.pgm"
    save_spectrogram_pgm(path, grid)
    img = read_pgm(path)
    assert img.shape == (513, grid.shape[0])
    brightest_row = int(np.argmax(img.mean(axis=1)))
    assert brightest_row == 128  # 4000 Hz / 31.25


def test_csv_grid_round_trips(tmp_path):
    grid = spectrogram_grid(sine(500.0, duration_s=0.2, amp=0.3))
    path = tmp_path / "grid.csv"
    save_spectrogram_csv(path, grid)
    lines = path.read_text().splitlines()
    header = lines[0].split(",")
    assert header[0] == "time_s"
    assert header[1] == "hz_0.00"
    assert header[2] == "hz_31.25"
    assert len(header) == 514
    body = np.loadtxt(path, delimiter=",", skiprows=1)
    assert body.shape == (grid.shape[0], 514)
    assert body[1, 0] == pytest.approx(FRAME_HOP / SAMPLE_RATE)
    assert np.allclose(body[:, 1:], grid, rtol=1e-4, atol=1e-7)


def test_save_spectrogram_from_wav(tmp_path):
    wav = tmp_path / "in.wav"
    write_wav(wav, sine(2000.0, duration_s=0.5, amp=0.4), subtype="float32")
    grid = save_spectrogram(wav, csv_path=tmp_path / "out.csv",
                            pgm_path=tmp_path / "out.pgm")
    assert (tmp_path / "out.csv").exists()
    assert (tmp_path / "out.pgm").exists()
    assert int(np.argmax(grid.sum(axis=0))) == 64  # 2000 Hz bin


# --- occupation metrics -----------------------------------------------------------

META = {"channels": list(CHANNELS), "window_ticks": 62}


def emission(tick, agent_id, band, preferred, n_samples=16000):
    return {"tick": tick, "agent_id": agent_id, "kind": "composer",
            "event": "emission_start",
            "payload": {"band": band, "preferred_band": preferred,
                        "n_samples": n_samples}}


END = {"tick": 999, "agent_id": None, "kind": "scheduler", "event": "end",
       "payload": {}}


def blank_occupation(n_windows=4):
    return np.zeros((4, n_windows, 128))


def test_threshold_floor_dominates_quiet_field():
    assert band_occupancy_threshold(np.zeros(128)) == 0.5
    hot = np.full(128, 40.0)
    assert band_occupancy_threshold(hot) == 40.0


def test_quiet_run_has_zero_overlap():
    events = [emission(10, "composer_000", 5, 5), END]
    metrics = occupation_metrics(events, blank_occupation(), META,
                                 n_ticks=200)
    assert metrics["overlap_ratio"] == 0.0
    assert metrics["niche_spread"] == 1
    assert metrics["switch_events"] == 0
    assert metrics["partial_data"] is False


def test_emission_into_hot_band_counts_as_overlap():
    occ = blank_occupation()
    anthro = list(CHANNELS).index("anthrophony")
    occ[anthro, :, 5] = 62.0 * 10.0  # mean per-frame energy 10
    events = [emission(10, "composer_000", 5, 5), END]
    metrics = occupation_metrics(events, occ, META, n_ticks=200)
    assert metrics["overlap_ratio"] == 1.0


def test_own_cyberphony_energy_does_not_count():
    occ = blank_occupation()
    cyber = list(CHANNELS).index("cyberphony")
    occ[cyber, :, 5] = 62.0 * 100.0
    events = [emission(10, "composer_000", 5, 5), END]
    metrics = occupation_metrics(events, occ, META, n_ticks=200)
    assert metrics["overlap_ratio"] == 0.0


def test_switch_counting_matches_script():
    events = [
        emission(0, "a", 64, 64), emission(250, "a", 64, 64),
        emission(500, "a", 30, 64), emission(750, "a", 30, 64),
        emission(1000, "a", 64, 64),
        emission(0, "b", 30, 40), emission(600, "b", 40, 40),
        END,
    ]
    metrics = occupation_metrics(events, blank_occupation(20), META,
                                 n_ticks=1240)
    a = metrics["composers"]["a"]
    b = metrics["composers"]["b"]
    assert (a["departures"], a["returns"]) == (1, 1)
    assert (b["departures"], b["returns"]) == (1, 1)
    assert metrics["switch_events"] == 4
    assert metrics["niche_spread"] == 3  # bands 64, 30, 40
    assert a["bands"] == [30, 64]


def test_truncated_log_is_flagged_partial():
    events = [emission(10, "a", 5, 5)]  # no end record
    metrics = occupation_metrics(events, blank_occupation(), META,
                                 n_ticks=200)
    assert metrics["partial_data"] is True


def test_no_emissions_yields_not_applicable():
    metrics = occupation_metrics([END], blank_occupation(), META,
                                 n_ticks=200)
    assert metrics["overlap_ratio"] is None
    assert metrics["niche_spread"] == 0
    assert metrics["switch_events"] == 0


def test_metrics_are_idempotent():
    events = [emission(10, "a", 5, 5), emission(400, "a", 7, 5), END]
    occ = blank_occupation(8)
    occ[0, :, 5] = 100.0
    m1 = occupation_metrics(events, occ, META, n_ticks=496)
    m2 = occupation_metrics(events, occ, META, n_ticks=496)
    assert m1 == m2


# --- analyze_run ------------------------------------------------------------------

def quiet_composer_run(tmp_path, **overrides):
    kw = dict(name="analyzed", seed=11, duration_s=12.0,
              monitors=[(1.0, 1.0)],
              agents=[AgentSpec("composer_000", "composer", (0.0, 0.0))],
              sources=[SourceSpec("t", "tone", (4.0, 0.0), "anthrophony",
                                  level_dbfs=-25.0, freq_hz=500.0)])
    kw.update(overrides)
    scn = Scenario(**kw)
    out = tmp_path / "run"
    run_scenario(scn, out)
    return out


def test_analyze_run_writes_all_artifacts(tmp_path):
    out = quiet_composer_run(tmp_path)
    metrics = analyze_run(out)
    assert (out / "metrics.json").exists()
    assert (out / "metrics.csv").exists()
    assert (out / "monitor_00_spectrogram.csv").exists()
    assert (out / "monitor_00_spectrogram.pgm").exists()
    saved = json.loads((out / "metrics.json").read_text())
    for key in ("overlap_ratio", "niche_spread", "switch_events"):
        assert saved[key] == metrics[key]
    csv_text = (out / "metrics.csv").read_text()
    assert csv_text.startswith("metric,value\n")
    assert "overlap_ratio," in csv_text


def test_analyze_quiet_run_metrics(tmp_path):
    out = quiet_composer_run(tmp_path, sources=[])
    metrics = analyze_run(out)
    assert metrics["niche_spread"] >= 1
    assert metrics["overlap_ratio"] == 0.0
    assert metrics["partial_data"] is False


def test_analyze_empty_roster_reports_not_applicable(tmp_path):
    scn = Scenario(name="none", seed=3, duration_s=2.0)
    run_scenario(scn, tmp_path / "run")
    metrics = analyze_run(tmp_path / "run")
    assert metrics["overlap_ratio"] is None
    assert "overlap_ratio,n/a" in (tmp_path / "run" / "metrics.csv").read_text()


def test_analyze_is_deterministic(tmp_path):
    out = quiet_composer_run(tmp_path)
    analyze_run(out)
    first = (out / "metrics.json").read_bytes()
    analyze_run(out)
    assert (out / "metrics.json").read_bytes() == first


def test_thread_cap_respected(tmp_path, monkeypatch):
    out = quiet_composer_run(tmp_path)
    monkeypatch.setenv("HOLONSIM_THREADS", "1")
    metrics = analyze_run(out)
    assert metrics["workers"] == 1


def test_load_events_accepts_dir_or_file(tmp_path):
    out = quiet_composer_run(tmp_path)
    from_dir = load_events(out)
    from_file = load_events(out / "events.jsonl")
    assert from_dir == from_file
    assert from_dir[0]["event"] == "boot"
