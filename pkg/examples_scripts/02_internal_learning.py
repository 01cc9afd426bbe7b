"""Refine a clip's latent codes at encode time with the decoders frozen.

    python3 examples_scripts/02_internal_learning.py model.ckpt

Internal learning starts from the encoder's latents, takes a few SGD steps
(Nesterov momentum) on the rate-distortion objective in bits, rounds, and
codes the result. The bitstream format and the decoder are unchanged.
"""
import sys

from cevc.codec import EncodeOptions, checkpoint_load, decode_video, encode_video
from cevc.harness import gen_synthetic_video
from cevc.metrics import psnr

model = checkpoint_load(sys.argv[1] if len(sys.argv) > 1 else "example.ckpt")
model.freeze()
clip = gen_synthetic_video(seed=7, frames=6)

base = encode_video(model, clip)
print(f"base:     {base.bpp():.4f} bpp, {psnr(clip, base.reconstructions):.2f} dB")

for steps in (1, 10, 30):
    res = encode_video(model, clip, EncodeOptions(internal_learning=True, steps=steps))
    print(f"{steps:2d} steps: {res.bpp():.4f} bpp, {psnr(clip, res.reconstructions):.2f} dB")

# the objective along the way for one frame
traj = res.stats[3]["il_objective"]
print("frame 3 objective every 5 steps:", " ".join(f"{v:.0f}" for v in traj[::5]))

# same decoder, same call, oblivious to how the codes were chosen
assert decode_video(model, res.data).frames.tobytes() == res.reconstructions.tobytes()
