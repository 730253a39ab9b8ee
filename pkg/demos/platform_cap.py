"""Fit a 1920x1080 photo under a 1600 px upload cap, then restore it.

The cap fixes the scale (1920 / 1600 = 1.2), the encoder writes an 8-bit PNG
that carries the scale and original size as text chunks plus a sidecar, and
the decoder reads them back without any extra flags. Uses the desk-scale
model when it has been trained, the zero model otherwise.

    python demos/platform_cap.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np

from arbscale import decode, encode, init_model
from arbscale.evaluation import bicubic_roundtrip, psnr
from arbscale.imaging import compute_scale_for_cap, from_float, load_image, save_image, to_float
from arbscale.toydata import make_texture
from arbscale.training import load_checkpoint

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)
ckpt = Path(__file__).resolve().parents[1] / "artifacts" / "desk" / "model.aidn"
model = load_checkpoint(ckpt)[0] if ckpt.exists() else init_model(seed=None)
print("model:", ckpt if ckpt.exists() else "zero init")

# a wide mosaic of toy textures stands in for a photo
tiles = [make_texture(300 + i, 240) for i in range(8 * 5)]
photo = np.concatenate([np.concatenate(tiles[r * 8:(r + 1) * 8], axis=1) for r in range(5)], axis=0)[:1080, :1920]

s = compute_scale_for_cap(1920, 1080, 1600)
lr, spec = encode(photo.astype(np.float32), s, model)
save_image(from_float(lr.data), out / "upload.png", spec)
print(f"scale {s}: wrote {out / 'upload.png'} at {lr.shape[1]}x{lr.shape[0]}")

# what a recipient does: read the PNG, metadata included, and decode
lr_img, spec_read = load_image(out / "upload.png")
restored = np.clip(decode(to_float(lr_img), spec_read, model).data, 0, 1)
save_image(from_float(restored), out / "restored.png")
print(f"restored {restored.shape[1]}x{restored.shape[0]}: {psnr(restored, photo):.2f} dB "
      f"(bicubic down/up {psnr(bicubic_roundtrip(photo, s), photo):.2f} dB)")
