"""Register two simulated sonar frames and look at the rotation search.

The second frame is the first one seen after the vehicle turned 8 degrees
and moved 0.4 m forward and 0.2 m to the side. ``register_pair`` should
hand back that motion, expressed as the map from frame-a to frame-b
coordinates.
"""

import math
from pathlib import Path

import numpy as np

from flsmosaic.geometry import Pose2D, Transform2D, compose, invert
from flsmosaic.registration import RegistrationConfig, _Derotator, frame_to_canvas, register_pair
from flsmosaic.simgen import ImagingSpec, SceneModel, render_frame

scene = SceneModel(extent=(60, 60), origin=(-30, -30), correlation_length=0.25, seed=3)
imaging = ImagingSpec(speckle=0.3)
true = Transform2D(math.radians(8.0), (0.4, -0.2))

pa = Pose2D(2.0, -1.0, 0.5)
pb = Pose2D.from_transform(compose(pa.as_transform(), invert(true)))
fa, _ = render_frame(scene, pa, imaging, 1, seed=11)
fb, _ = render_frame(scene, pb, imaging, 2, seed=11)

res = register_pair(fa, fb)
print(f"true      rotation {math.degrees(true.rotation):7.3f} deg  translation {true.translation}")
print(f"estimated rotation {math.degrees(res.transform.rotation):7.3f} deg  "
      f"translation ({res.transform.translation[0]:.4f}, {res.transform.translation[1]:.4f})")
print(f"confidence {res.confidence:.3f}  low: {res.low_confidence}")

# The angle search scores each trial angle by the height of the translation peak.
cfg = RegistrationConfig()
a, _ = frame_to_canvas(fa, cfg)
b, _ = frame_to_canvas(fb, cfg)
trial = _Derotator(a, b, cfg)
angles = np.radians(np.linspace(-20, 20, 81))
peaks = np.array([trial(float(t)).peak_value for t in angles])
print(f"best trial angle on a 0.5 deg grid: {math.degrees(angles[peaks.argmax()]):.1f} deg")

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
except ImportError:
    plt = None

if plt is not None:
    fig, ax = plt.subplots(1, 3, figsize=(13, 4))
    ax[0].imshow(a, cmap="gray")
    ax[0].set_title("frame a on the canvas")
    ax[1].imshow(b, cmap="gray")
    ax[1].set_title("frame b")
    ax[2].plot(np.degrees(angles), peaks)
    ax[2].axvline(math.degrees(true.rotation), color="k", ls="--")
    ax[2].set_xlabel("trial angle (deg)")
    ax[2].set_ylabel("translation peak")
    fig.tight_layout()
    out = Path(__file__).with_name("demo_registration.png")
    fig.savefig(out, dpi=110)
    print(f"figure: {out}")
