import json
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from weakcap.cli import run_cli


@dataclass
class ToyRun:
    out: Path
    exit_code: int
    seconds: float
    captions: Path
    caption_exit: int

    def history(self):
        with open(self.out / "history.jsonl", encoding="utf-8") as f:
            return [json.loads(line) for line in f]

    def manifest(self):
        return json.loads((self.out / "manifest.json").read_text())


@pytest.fixture(scope="session")
def toy(tmp_path_factory) -> Path:
    data = tmp_path_factory.mktemp("toy") / "data"
    assert run_cli(["synth", "--seed", "7", "--out", str(data)]) == 0
    return data


@pytest.fixture(scope="session")
def toy_runs(toy, tmp_path_factory) -> list[ToyRun]:
    """Two full training runs on the toy data with the same seed and config, each captioned afterwards."""
    runs = []
    for name in ("a", "b"):
        base = tmp_path_factory.mktemp(f"run_{name}")
        out = base / "run"
        start = time.perf_counter()
        code = run_cli(["train", "--config", str(toy / "toy.cfg"), "--out", str(out)])
        seconds = time.perf_counter() - start
        captions = base / "captions.jsonl"
        cap_code = -1
        if code == 0:
            best = json.loads((out / "manifest.json").read_text())["best_checkpoint"]
            cap_code = run_cli(["caption", "--config", str(toy / "toy.cfg"), "--checkpoint", str(out / best),
                                "--kg", str(out / "kg.wckg"), "--videos", str(toy / "val_videos.txt"),
                                "--output", str(captions)])
        runs.append(ToyRun(out, code, seconds, captions, cap_code))
    return runs
