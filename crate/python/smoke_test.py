"""Smoke test for the warpdiff Python bindings.

Build and install first:

    pip install maturin
    maturin develop --release -m crates/py/Cargo.toml
"""

import json
import math
import random
import tempfile
from pathlib import Path

import warpdiff

TINY = """
[data]
count = 6
test_count = 3
height = 32
width = 32

[codec]
widths = [8, 16]
steps = 3
batch = 2

[diffusion]
t_steps = 10
epochs = 1
batch = 2
widths = [8, 16, 16]
n_heads = 2

[sample]
n_steps = 2
batch = 2

[eval]
metrics = ["ssim", "masked_l1", "mask_iou"]
n_samples = 3
bench_grid = [{ Hl = 8, Wl = 6, C = 16, w = 2 }]
"""


def check_data():
    s = warpdiff.gen_sample(7)
    assert s.seed == 7
    person = s.field("person")
    assert person.shape == (64, 48, 3)
    assert all(0.0 <= v <= 1.0 for v in person.data())
    again = warpdiff.gen_sample(7).field("person")
    assert again.data() == person.data()
    gt = s.laplacian_gt()
    assert gt.shape == (16, 12, 1)
    try:
        s.field("nope")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown field accepted")


def check_metrics():
    black = warpdiff.Image(16, 16, 3, [0.0] * 16 * 16 * 3)
    white = warpdiff.Image(16, 16, 3, [1.0] * 16 * 16 * 3)
    c1 = 0.01 ** 2
    assert abs(warpdiff.ssim(black, white) - c1 / (1 + c1)) < 1e-6
    assert abs(warpdiff.ssim(white, white) - 1.0) < 1e-9

    rng = random.Random(0)
    a = [[rng.gauss(0, 1) for _ in range(3)] for _ in range(200)]
    delta = [0.5, -1.0, 2.0]
    b = [[x + d for x, d in zip(row, delta)] for row in a]
    assert abs(warpdiff.toy_fid(a, b) - sum(d * d for d in delta)) < 1e-6

    m = warpdiff.Image(2, 2, 1, [1.0, 0.0, 1.0, 0.0])
    assert warpdiff.mask_iou(m, m) == 1.0


def check_attention():
    assert warpdiff.mac_count(16, 12, 32, 4) == 196_608
    assert warpdiff.mac_count_full(16, 12, 32) == 2_359_296
    h, w, c = 6, 5, 8
    rng = random.Random(1)
    x = [rng.gauss(0, 1) for _ in range(h * w * c)]
    g = [rng.gauss(0, 1) for _ in range(h * w * c)]
    out = warpdiff.local_cross_attention(x, g, [0.0] * (h * w), h, w, c, window=2, n_heads=2)
    assert all(abs(o - v) <= 1e-6 * max(1.0, abs(v)) for o, v in zip(out, x)), "fully masked garment must pass features through"
    out = warpdiff.local_cross_attention(x, g, [1.0] * (h * w), h, w, c, window=2, n_heads=2)
    assert len(out) == h * w * c and all(math.isfinite(v) for v in out)

    ab = warpdiff.alpha_bars(200)
    assert len(ab) == 200 and all(p > q for p, q in zip(ab, ab[1:]))


def check_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        cfg_path = Path(tmp) / "tiny.toml"
        cfg_path.write_text(TINY)
        out = Path(tmp) / "run"
        cfg = warpdiff.RunConfig(str(cfg_path))
        assert len(cfg.hash()) == 64
        for stage in ["make-data", "train-codec", "train", "sample", "eval", "viz-mask"]:
            warpdiff.run(stage, str(out), config=str(cfg_path))
        metrics = json.loads((out / "metrics.json").read_text())
        assert "masked_ssim" in metrics["summary"]
        assert (out / "viz" / "000000.png").is_file()
        try:
            warpdiff.run("make-data", str(out), config=str(cfg_path))
        except ValueError:
            pass
        else:
            raise AssertionError("existing output overwritten without force")
        try:
            warpdiff.RunConfig(overrides=["diffusion.windw=4"])
        except ValueError:
            pass
        else:
            raise AssertionError("unknown key accepted")


if __name__ == "__main__":
    check_data()
    check_metrics()
    check_attention()
    check_pipeline()
    print("python smoke test passed")
