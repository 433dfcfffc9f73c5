"""Smoke test for the sphere_lab extension module.

Build and install first, e.g. `maturin build --release -m crates/python/Cargo.toml`
followed by `pip install target/wheels/sphere_lab-*.whl`.
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import sphere_lab

TINY = """
seeds = [0]
log_every = 10
[stream]
num_tasks = 2
steps_per_task = 20
eval_size = 32
[moe]
num_experts = 3
expert_widths = [8]
gate_widths = [4]
"""


def main() -> int:
    eye = [[1.0 if i == j else 0.0 for j in range(5)] for i in range(5)]
    assert abs(sphere_lab.effective_rank(eye) - 5.0) < 1e-9

    cfg = {"input_dim": 3, "output_dim": 1, "num_experts": 4, "top_k": 2,
           "expert_widths": [8], "gate_widths": [4], "seed": 1}
    model = sphere_lab.MoeModel(json.dumps(cfg))
    x = [[0.1 * (i + j) - 0.5 for j in range(3)] for i in range(16)]
    assert len(model.forward(x)) == 16
    assert len(model.flat_params()) == model.param_count

    exact = model.spectral_plasticity(x)
    slq = model.spectral_plasticity(x, exact=False)
    assert 1.0 <= exact <= 16.0 and abs(slq - exact) / exact < 0.5

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Path(tmp) / "model.json"
        model.save(ckpt)
        again = sphere_lab.MoeModel.load(ckpt)
        assert again.flat_params() == model.flat_params()

        report = model.diagnose(x)
        assert math.isclose(report["re_k_exact"], exact, rel_tol=1e-9)

        config = Path(tmp) / "tiny.toml"
        config.write_text(TINY)
        summary = sphere_lab.run_experiment(config, Path(tmp) / "out")
        assert summary["arms"][0]["name"] == "main"
        assert (Path(tmp) / "out" / "manifest.json").exists()

    checks = sphere_lab.run_verify("kronecker")
    assert checks and all(c["passed"] for c in checks)

    try:
        sphere_lab.MoeModel(json.dumps({**cfg, "top_k": 9}))
    except ValueError:
        pass
    else:
        raise AssertionError("top_k > num_experts must be rejected")

    print("sphere_lab smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
