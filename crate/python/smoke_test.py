#!/usr/bin/env python3
"""Smoke test for the condensa_py extension module.

Builds the cdylib with cargo, copies it next to this script under the
importable name, and exercises the main types and operations end to end.
"""

import json
import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build_and_import():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "condensa-py"],
        cwd=ROOT,
        check=True,
    )
    built = ROOT / "target" / "release" / "libcondensa_py.so"
    if not built.exists():  # macOS fallback
        built = ROOT / "target" / "release" / "libcondensa_py.dylib"
    dest = Path(__file__).resolve().parent / "condensa_py.so"
    shutil.copyfile(built, dest)
    sys.path.insert(0, str(dest.parent))
    import condensa_py

    return condensa_py


def main():
    cp = build_and_import()

    # memory budget arithmetic matches the published accounting
    rows = [
        (1, 1, 150_528, "0.15"),
        (1, 2, 301_056, "0.3"),
        (1, 5, 752_640, "0.75"),
        (1, 8, 1_204_224, "1.2"),
        (1, 16, 2_408_448, "2.4"),
        (1, 40, 6_021_120, "6.0"),
        (8, 5, 6_021_120, "6.0"),
    ]
    for frames, videos, bytes_, disp in rows:
        got_bytes, got_mb, got_disp = cp.budget(frames, videos)
        assert got_bytes == bytes_, (frames, videos, got_bytes)
        assert got_disp == disp, (frames, videos, got_disp)
        assert abs(got_mb - round(bytes_ / 1e6, 2)) < 1e-9
    print("PASS budget")

    # condensing weights: log(2) vs 0 mixes frames 2:1
    t, c, h, w = 2, 1, 2, 2
    frames = [1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.1, 0.1]
    out = cp.condense_frame([math.log(2), 0.0], frames, (t, c, h, w))
    assert all(abs(v - (2 * 1.0 + 0.1) / 3) < 1e-12 for v in out), out
    print("PASS condense_frame")

    # herding picks the embedding closest to the mean first
    embeds = [[0.0, 0.0], [1.0, 1.0], [0.4, 0.6], [2.0, -1.0]]
    order = cp.herding_select(embeds, 2)
    assert len(order) == 2 and order[0] == 2, order
    print("PASS herding_select")

    # clips render deterministically
    clip = cp.render_clip(3, 42)
    clip2 = cp.render_clip(3, 42)
    assert clip.pixels == clip2.pixels
    assert clip.label == 3 and clip.frames == 8
    print("PASS render_clip")

    # model forward + head growth
    m = cp.Model(channels=3, num_classes=4, seed=7)
    emb = m.embedding(clip)
    assert len(emb) == 16 and all(math.isfinite(v) for v in emb)
    logits_before = m.logits(clip)
    assert len(logits_before) == 4
    m.extend_head(2, seed=9)
    logits_after = m.logits(clip)
    assert len(logits_after) == 6
    assert logits_after[:4] == logits_before
    print("PASS model forward / extend_head")

    # condensing optimization reduces the objective
    ex = cp.condense_exemplar(clip, m, iterations=40, seed=1)
    assert ex.label == 3
    assert len(ex.pixels) == 3 * 32 * 32
    assert abs(sum(ex.weights) - 1.0) < 1e-5
    assert ex.final_total <= ex.initial_total, (ex.initial_total, ex.final_total)
    print(f"PASS condense_exemplar (objective {ex.initial_total:.4f} -> {ex.final_total:.4f})")

    # a miniature end-to-end experiment
    with tempfile.TemporaryDirectory() as tmp:
        config = {
            "data": {
                "num_classes": 2,
                "clips_per_class_train": 3,
                "clips_per_class_test": 2,
                "frames": 4,
                "height": 12,
                "width": 12,
                "channels": 3,
                "noise_std": 4.0,
                "seed": 3,
            },
            "split": {"stages": [[0, 1]]},
            "train": {"epochs": 2, "batch_size": 4},
            "condense": {"iterations": 2},
            "memory": {"videos_per_class": 1},
            "output_dir": tmp,
            "seeds": [1],
        }
        summary = cp.run_experiment(json.dumps(config))
        assert summary.startswith("metric,mean,std"), summary
        assert (Path(tmp) / "stages.csv").exists()
        assert (Path(tmp) / "accuracy_vs_budget.svg").exists()
    print("PASS run_experiment")

    print("smoke test OK")


if __name__ == "__main__":
    main()
