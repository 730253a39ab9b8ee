"""Before any training, the encoder/decoder pair is plain bicubic resampling.

With every learnable weight at zero the residual branches vanish, so the
encoder returns the 8-bit bicubic downscale and the decoder the bicubic
upscale. Training therefore starts from the classical baseline and can only
move away from it by learning something useful.

    python demos/zero_init_is_bicubic.py
"""
import numpy as np

from arbscale import decode, encode, init_model
from arbscale.evaluation import bicubic_roundtrip, psnr
from arbscale.toydata import make_texture

model = init_model(seed=None)
img = make_texture(7, 128).astype(np.float32)

for s in (1.5, 2.0, 3.3, 4.0):
    lr, spec = encode(img, s, model)
    restored = np.clip(decode(lr, spec, model).data, 0, 1)
    ours, baseline = psnr(restored, img), psnr(bicubic_roundtrip(img, s), img)
    print(f"s={s:<4}  LR {lr.shape[1]}x{lr.shape[0]}  zero model {ours:6.2f} dB  bicubic {baseline:6.2f} dB")
