"""Smoke test for the editctrl_py extension module.

Build and install first, e.g. `maturin build --release -m crates/py/Cargo.toml`
followed by `pip install target/wheels/editctrl_py-*.whl`.
"""

import json
import random
import sys
import tempfile

import editctrl_py as ec

TINY_MODEL = {
    "d_model": 16,
    "heads": 2,
    "blocks": 2,
    "injection_blocks": [1],
    "control_blocks": 1,
    "lora_rank": 2,
    "max_grid": [4, 8, 8],
    "global_size": 8,
}
TINY_TRAIN = {"iterations": 3, "batch_size": 1, "warmup": 0, "data": {"frames": 2, "height": 16, "width": 16}}


def random_video(frames, height, width, seed):
    rng = random.Random(seed)
    data = [rng.random() for _ in range(frames * height * width * 3)]
    return ec.Video(data, [frames, height, width, 3])


def main():
    v = random_video(2, 32, 32, 0)
    assert v.shape == [2, 32, 32, 3]
    assert ec.codec_roundtrip(v).max_abs_diff(v) <= 1e-5

    with tempfile.TemporaryDirectory() as tmp:
        base, control, adapters = f"{tmp}/base", f"{tmp}/control", f"{tmp}/adapters"
        losses = ec.train_stage("base", base, model=json.dumps(TINY_MODEL), config=json.dumps(TINY_TRAIN))
        assert len(losses) == 3 and all(l == l for l in losses)
        ec.train_stage("control_full", control, init_dir=base, config=json.dumps(TINY_TRAIN))
        ec.train_stage("adapters_sparse", adapters, init_dir=control, config=json.dumps({**TINY_TRAIN, "n": 1}))

        p = ec.Pipeline.load(adapters)
        assert p.has_control() and p.has_global()
        m = ec.Mask.rect(2, 32, 32, 4, 10, 5, 11)
        a = p.edit(v, m, "fill:red", steps=3, seed=7)
        b = p.edit(v, m, "fill:red", steps=3, seed=7)
        assert a.max_abs_diff(b) == 0.0

        report = ec.metrics(a, v, m)
        assert report["unmasked"]["mse"] <= 1e-10, report

        m2 = ec.Mask.rect(2, 32, 32, 20, 28, 20, 28)
        multi = p.edit_multi(v, [(m, "fill:red", 7), (m2, "fill:blue", 8)], steps=3, threads=2)
        assert multi.shape == v.shape

        flops = p.edit_flops(v, m, "fill:red", steps=3)
        assert flops["measured"] == flops["analytic"], flops
        assert flops["n_sel"] < flops["n_total"]

        try:
            p.edit(v, ec.Mask.rect(2, 32, 32, 0, 0, 0, 0), "fill:red", steps=2)
        except ec.EmptyMaskError:
            pass
        else:
            raise AssertionError("empty mask accepted")

        try:
            ec.Pipeline.load(f"{tmp}/missing")
        except (ec.MissingWeightsError, OSError, ValueError):
            pass
        else:
            raise AssertionError("missing checkpoint accepted")

    assert ec.lane_threads() >= 1
    print("python smoke test: ok")


if __name__ == "__main__":
    sys.exit(main())
