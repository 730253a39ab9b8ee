"""Look inside a trained model: expert routing and the hidden LR signal.

The decoder's resampling kernel at each output pixel is a softmax mix of
experts; the mix shifts as the scale changes. The encoder's LR image stays
within a few grey levels of bicubic while carrying the detail the decoder
needs. On the desk model that deviation is larger at s=3.5 than at s=1.2,
though not monotone in between (s=2 is the quietest). Needs the desk-scale
model (run demos/desk_training.py first).

    python demos/what_the_encoder_hides.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from arbscale import desk
from arbscale.evaluation import lr_difference, render_heatmap, routing_map
from arbscale.imaging import save_image
from arbscale.training import load_checkpoint

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)
root = Path(__file__).resolve().parents[1]
state, _ = load_checkpoint(root / "artifacts" / "desk" / "model.aidn")
img = desk.heldout_images()[3]

scales = [1.6, 2.0, 2.75, 3.5, 4.0]
weights = np.stack([routing_map(state, img, s, [(64, 64)])[0][0] for s in scales])
for s, w in zip(scales, weights):
    print(f"s={s:<4} " + " ".join(f"{v:.3f}" for v in w))
save_image(render_heatmap(weights.T, cell=16), out / "routing.png")

for s in (1.2, 2.0, 3.5):
    diff, mad = lr_difference(state, img, s, gain=10)
    save_image(diff, out / f"lr_diff_{s}.png")
    print(f"s={s}: mean |encoder LR - bicubic LR| = {mad * 255:.2f} grey levels")
