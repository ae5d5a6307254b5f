import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from contentsep import audio  # noqa: E402


def random_mels(n_speakers, n_utts, frames, n_mels=40, config_id="speaker", seed=0, prefix="s"):
    """Speaker-separable random spectrograms: each speaker gets its own offset."""
    rng = np.random.default_rng(seed)
    out = {}
    for i in range(n_speakers):
        offset = rng.normal(0, 1, (n_mels, 1))
        out[f"{prefix}{i}"] = [
            audio.MelSpectrogram(
                (offset + 0.3 * rng.normal(size=(n_mels, frames))).astype(np.float32), config_id, f"{prefix}{i}_{u}"
            )
            for u in range(n_utts)
        ]
    return out


@pytest.fixture
def speaker_mels():
    return random_mels(4, 4, 170)


@pytest.fixture
def content_mels():
    return random_mels(3, 2, 70, n_mels=80, config_id="content")


# --- acceptance verdict lines ----------------------------------------------

VERDICTS: dict[int, tuple[str, bool, str]] = {}


def record_verdict(number: int, title: str, passed: bool, detail: str = "") -> None:
    prev = VERDICTS.get(number)
    if prev is not None:  # a criterion spread over several tests passes only if all parts pass
        passed = passed and prev[1]
        detail = "; ".join(d for d in (prev[2], detail) if d)
    VERDICTS[number] = (title, passed, detail)
    print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}" + (f" -- {detail}" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(VERDICTS):
        title, passed, detail = VERDICTS[number]
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
