"""Train a small codec on synthetic video, then code and decode a clip.

Run from the repository root:

    python3 examples_scripts/01_code_a_clip.py            # ~2 min on one core
    python3 examples_scripts/01_code_a_clip.py model.ckpt # reuse a checkpoint

The clip is a textured background with a few sprites sliding across it, so
consecutive latents are strongly related. The conditional entropy model
exploits exactly that: frame i's symbols are coded with probabilities
predicted from frame i-1's latent.
"""
import sys

import numpy as np

from cevc.codec import checkpoint_load, checkpoint_save, decode_video, encode_video
from cevc.harness import TrainConfig, gen_synthetic_video, train
from cevc.metrics import psnr
from cevc.networks import NetworkConfig

if len(sys.argv) > 1:
    model = checkpoint_load(sys.argv[1])
else:
    # a deliberately short run: enough to see the codec behave, far from converged
    cfg = TrainConfig(lam=0.01, lr=5e-4, epochs=4, train_clips=16, clip_frames=4)
    model, log = train(cfg, NetworkConfig(), callback=lambda e, m: print(
        f"epoch {e['epoch']}: val mse {e['val_mse']:.4f}, val bpp {e['val_bpp']:.3f}"))
    checkpoint_save(model, "example.ckpt")
    print("saved example.ckpt")
model.freeze()

clip = gen_synthetic_video(seed=2024, frames=6)
enc = encode_video(model, clip)
print(f"\n{len(enc.data)} bytes for {len(clip)} frames, {enc.bpp():.4f} bpp, "
      f"PSNR {psnr(clip, enc.reconstructions):.2f} dB")

# per-frame accounting: frame 0 is coded against an all-zero latent,
# the rest against the previous frame's latent
for i, st in enumerate(enc.stats):
    print(f"frame {i}: y {st['model_bits_y']:8.1f} model bits, z {st['model_bits_z']:6.1f}")

# the decoder only sees bytes and the checkpoint; it never runs an encoder
dec = decode_video(model, enc.data)
assert dec.frames.tobytes() == enc.reconstructions.tobytes()
print("decoded reconstructions match the encoder's bit for bit")

# a static clip should be much cheaper after the first frame
still = np.repeat(clip[:1], 6, axis=0)
st = encode_video(model, still).stats
print(f"static clip: frame 0 {st[0]['model_bits_y']:.0f} bits, "
      f"later frames {np.mean([s['model_bits_y'] for s in st[1:]]):.0f} bits on average")
