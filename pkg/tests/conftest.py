import numpy as np
import pytest

from need.corpus import Event, SynthConfig, VideoRecord, generate_synthetic


def make_video(vid, event="e0", role="real", ts=0, d_base=4, d_frame=3, tokens=(10, 11), n_frames=2, seed=0):
    rng = np.random.default_rng(seed)
    return VideoRecord(vid, event, role, ts, rng.normal(size=d_base), tuple(tokens),
                       rng.normal(size=(n_frames, d_frame)))


def make_event(roles, event="e0", d_base=4, seed=0):
    videos = [make_video(f"{event}_{i}", event, r, ts=i, d_base=d_base, seed=seed + i) for i, r in enumerate(roles)]
    return Event(event, tuple(videos))


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(SynthConfig(n_events=40, seed=3))


def quick_config(seed=0, n_events=20, k_folds=5, epochs=2):
    """A small, fast experiment configuration for runner tests."""
    from need.config import ExperimentConfig
    return ExperimentConfig.from_dict({
        "seed": seed, "k_folds": k_folds,
        "synth": {"n_events": n_events, "seed": 5, "d_base": 16, "d_frame": 8, "vocab_size": 100},
        "ga": {"epochs": epochs}, "baseline": {"epochs": epochs},
        "dri": {"epochs": epochs, "model": {"vocab_size": 100, "d_frame": 8, "d_text": 16, "d_visual": 16,
                                            "d_fusion": 16, "text_layers": 1, "visual_layers": 1}},
    })


# -- session-wide softmax row watcher and acceptance summary -------------------------
SOFTMAX_WATCH = {"worst": 0.0, "rows": 0}
ACCEPTANCE = {}


def _watch(out):
    dev = float(np.max(np.abs(out.sum(axis=-1) - 1.0))) if out.size else 0.0
    SOFTMAX_WATCH["worst"] = max(SOFTMAX_WATCH["worst"], dev)
    SOFTMAX_WATCH["rows"] += out.size // max(out.shape[-1], 1)


@pytest.fixture(scope="session", autouse=True)
def softmax_watch():
    from need import tensor as T
    with T.softmax_observer(_watch):
        yield SOFTMAX_WATCH


def record(criterion, ok, detail):
    ACCEPTANCE[criterion] = (bool(ok), detail)
    print(f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for c in sorted(ACCEPTANCE):
            ok, detail = ACCEPTANCE[c]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {c}: {detail}")
    ok = SOFTMAX_WATCH["worst"] <= 1e-9
    terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] softmax rows over the whole run: "
                                f"{SOFTMAX_WATCH['rows']} rows, worst |sum - 1| = {SOFTMAX_WATCH['worst']:.2e}")
