"""
A tiny end-to-end run
=====================

Trains both steps on a handful of small phantoms for a few epochs and fuses
one validation case. Nothing here is tuned; it shows the moving parts and
takes under a minute on one core.
"""

import tempfile
from pathlib import Path

from volufuse.metrics import evaluate_case
from volufuse.neural import set_threads
from volufuse.pipeline import PipelineConfig, fuse, train_step1, train_step2
from volufuse.synthgen import Dataset, DegradationSpec, PhantomSpec, make_dataset

set_threads(1)
root = Path(tempfile.mkdtemp())

phantom = PhantomSpec(shape=(32, 32, 32), count_range=(2, 4), radius_range=(3.0, 5.0))
make_dataset(10, phantom, DegradationSpec(attenuation_length=20.0), root / "data", seed=0)
data = Dataset(root / "data")

cfg = PipelineConfig(global_shape=(16, 16, 16), base_channels=4, depth=2, disc_channels=4,
                     epochs1=80, epochs2=30, batch_size=4, patches_per_case=1)

step1 = train_step1(data, cfg, root / "step1")
print("step one, last epoch:", step1.history[-1])

step2 = train_step2(data, step1.network, cfg, root / "step2")
print("step two, last epoch:", step2.history[-1])

case = next(c for c in data.cases if c["split"] == "val")
inp, gt = data.pair(case)
out = fuse(inp, step1.network, step2.network, cfg)
r = evaluate_case(inp, out, gt, case["channel"])
print(f"validation case {case['id']}: ssim {r.ssim:.3f}, nssim {r.nssim:.2f}")
