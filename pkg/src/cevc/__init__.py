"""Learned video codec whose only inter-frame tool is a conditional entropy model."""
from .codec import (EncodeOptions, checkpoint_load, checkpoint_save, decode_video, encode_video,
                    internal_learn_frame)
from .harness import TrainConfig, gen_synthetic_video, rd_sweep, train
from .metrics import msssim, psnr
from .networks import CodecModel, NetworkConfig

__all__ = ["CodecModel", "EncodeOptions", "NetworkConfig", "TrainConfig", "checkpoint_load", "checkpoint_save",
           "decode_video", "encode_video", "gen_synthetic_video", "internal_learn_frame", "msssim", "psnr",
           "rd_sweep", "train"]
