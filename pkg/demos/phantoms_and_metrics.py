"""
Phantoms, degradation and the evaluation metrics
================================================

Builds one nucleus and one membrane phantom, degrades each as a single
lightsheet view, then scores the raw view against the ground truth.
"""

from volufuse.metrics import evaluate_case
from volufuse.synthgen import DegradationSpec, PhantomSpec, degrade_single_view, generate_phantom

for channel in ("nucleus", "membrane"):
    gt = generate_phantom(PhantomSpec(channel=channel, seed=1))
    view = degrade_single_view(gt, DegradationSpec(seed=1))

    # the far side is dimmer and blurrier than the near side
    near, far = view.data[:16].mean(), view.data[-16:].mean()
    print(f"{channel}: near mean {near:.4f}, far mean {far:.4f}")

    # identity mapping: the view itself is the "fused" output, so nSSIM is 0
    r = evaluate_case(view, view, gt, channel)
    print(f"  identity  ssim {r.ssim:.3f}  mae {r.mae:.3f}  nssim {r.nssim:.2f}  niou {r.niou:.3f}")

    # a perfect output reaches nSSIM 1
    r = evaluate_case(view, gt, gt, channel)
    print(f"  perfect   ssim {r.ssim:.3f}  nssim {r.nssim:.2f}")

    # something in between: half way from the view to the truth
    mid = gt.with_data(0.5 * (view.data / max(view.data.max(), 1e-6)) + 0.5 * gt.data)
    r = evaluate_case(view, mid, gt, channel)
    print(f"  halfway   ssim {r.ssim:.3f}  nssim {r.nssim:.2f}")

