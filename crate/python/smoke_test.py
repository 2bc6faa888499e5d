"""Smoke test for the pyxattn extension module.

Build and install with `maturin develop -m crates/python/Cargo.toml`, or copy
target/release/libpyxattn.so next to this script as pyxattn.so.
"""

import json
import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import pyxattn as xa


def main():
    spec = {"kind": "block_local", "width": 128, "strength": 10, "seq_len": 512, "head_dim": 32, "heads": 2, "seed": 1}
    heads = xa.generate_workload(json.dumps(spec))
    assert len(heads) == 2 and heads[0].seq_len == 512 and heads[0].head_dim == 32

    cfg = xa.SelectionConfig(block_size=64, stride=8, tau=0.9)
    inp = heads[0]
    full = xa.full_attention(inp)
    mask = xa.build_mask(inp, cfg)
    out = xa.sparse_attention(inp, mask, cfg.block_size)
    err = xa.output_error(out, full)
    print(f"tau=0.9 density={mask.density():.3f} output_error={err:.4f}")
    assert out.shape == [512, 32]
    assert 0.0 < mask.density() <= 1.0
    assert all(mask.get(q, q) for q in range(mask.shape[0]))

    cfg.tau = 1.0
    exact = xa.sparse_attention(inp, xa.build_mask(inp, cfg), cfg.block_size)
    assert xa.output_error(exact, full) <= 1e-5

    probs = xa.block_probabilities(inp, cfg)
    assert all(abs(sum(row) - 1.0) < 1e-6 for row in probs)

    assert xa.find_blocks([0.5, 0.3, 0.2], 0.75) == [0, 1]
    assert abs(xa.js_divergence([1.0, 0.0], [0.0, 1.0]) - math.log(2)) < 1e-9
    assert abs(xa.rank_correlation([1, 2, 3, 4, 5], [2, 1, 4, 3, 5]) - 0.8) < 1e-12

    again = xa.SelectionConfig.from_json(cfg.to_json())
    assert again.to_json() == cfg.to_json()

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "q.xatn")
        inp.q.save(path)
        assert xa.Tensor.load(path).flat() == inp.q.flat()
        mpath = os.path.join(d, "mask.xatn")
        mask.save(mpath)
        assert xa.BlockMask.load(mpath).rows() == mask.rows()

    t = xa.Tensor([[1.0, 2.0], [3.0, 4.0]])
    assert t.shape == [2, 2] and t.tolist() == [[1.0, 2.0], [3.0, 4.0]]
    try:
        xa.SelectionConfig(block_size=64, stride=7)
    except ValueError as e:
        assert "invalid_config" in str(e)
    else:
        raise AssertionError("stride 7 should not divide block size 64")

    small = {"kind": "block_local", "width": 64, "strength": 10, "seq_len": 256, "head_dim": 16, "heads": 2}
    calib = [xa.generate_workload(json.dumps(dict(small, seed=s))) for s in range(2)]
    result = xa.calibrate(calib, xa.SelectionConfig(block_size=32, stride=8), budget=2)
    assert len(result["thresholds"]) == 2
    assert result["final_perf"] >= result["baseline_perf"] - result["epsilon"]
    print("calibrated thresholds", [round(t, 4) for t in result["thresholds"]])
    print("smoke test passed")


if __name__ == "__main__":
    main()
