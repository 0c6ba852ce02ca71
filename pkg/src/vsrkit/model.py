"""End-to-end VSR model (frontend, encoder, CTC head, attention decoder) and
the binary checkpoint format that carries its configuration."""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .decoder import DecoderConfig, LmConfig, TransformerDecoder, TransformerLM
from .encoders import Encoder, EncoderConfig, EncoderOutput
from .frontend import FrontendConfig, ResNet3DFrontend
from .losses import JointLossConfig, ce_loss, combine, ctc_loss
from .nn import Linear, Module
from .tensor import Tensor, no_grad
from .video import VideoTensor, center_crop
from .vocab import Vocabulary

CKPT_MAGIC = b"VSRCKPT1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture of one system. ``lm`` is optional and only used for fusion."""

    vocab: list[str]
    frontend: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    decoder: dict = field(default_factory=dict)
    lm: dict | None = None
    seed: int = 0
    crop_size: int | None = None  # clips are center-cropped to this side before the frontend

    @property
    def vocabulary(self) -> Vocabulary:
        return Vocabulary(tuple(self.vocab))

    def frontend_config(self) -> FrontendConfig:
        return FrontendConfig(**self.frontend)

    def encoder_config(self) -> EncoderConfig:
        cfg = dict(self.encoder)
        cfg["input_dim"] = self.frontend_config().output_dim
        return EncoderConfig(**cfg)

    def decoder_config(self) -> DecoderConfig:
        cfg = dict(self.decoder)
        cfg.setdefault("d_model", self.encoder_config().d_model)
        return DecoderConfig(vocab_size=len(self.vocabulary), **cfg)

    def lm_config(self) -> LmConfig | None:
        if self.lm is None:
            return None
        return LmConfig(vocab_size=len(self.vocabulary), **self.lm)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class LossParts:
    ctc: Tensor
    ce: Tensor
    joint: Tensor


class VSRModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        self.vocab = config.vocabulary
        rng = np.random.default_rng(config.seed)
        self.frontend = ResNet3DFrontend(config.frontend_config(), rng)
        enc_cfg = config.encoder_config()
        self.encoder = Encoder(enc_cfg, rng)
        self.ctc_head = Linear(enc_cfg.d_model, len(self.vocab), rng)
        self.decoder = TransformerDecoder(config.decoder_config(), rng)

    def prepare(self, video: VideoTensor) -> np.ndarray:
        """Crop a clip to the configured size and lay it out as [C,T,H,W]."""
        n = self.config.crop_size
        if n is not None and video.size != (n, n):
            video = center_crop(video, n)
        return video.to_model_input()

    def _input(self, video) -> Tensor:
        if isinstance(video, VideoTensor):
            return Tensor(self.prepare(video))
        if isinstance(video, Tensor):
            return video
        return Tensor(video)

    def encode(self, video) -> EncoderOutput:
        """Video [T,H,W,C] (``VideoTensor``) or [C,T,H,W] array -> encoder states."""
        return self.encoder(self.frontend(self._input(video)))

    def ctc_log_probs(self, enc: EncoderOutput) -> Tensor:
        return ops.log_softmax(self.ctc_head(enc.states))

    def loss(self, video, token_ids: Sequence[int], cfg: JointLossConfig) -> LossParts:
        enc = self.encode(video)
        ids = list(token_ids)
        ctc = ctc_loss(self.ctc_log_probs(enc), ids, self.vocab.blank)
        dec_in = [self.vocab.sos] + ids
        targets = ids + [self.vocab.eos]
        ce = ce_loss(self.decoder(dec_in, enc.states), targets, cfg.label_smoothing)
        return LossParts(ctc, ce, combine(ctc, ce, cfg.ctc_weight))


def build_lm(config: ModelConfig) -> TransformerLM | None:
    lm_cfg = config.lm_config()
    if lm_cfg is None:
        return None
    return TransformerLM(lm_cfg, np.random.default_rng(config.seed + 1))


# ---------------------------------------------------------------- checkpoint


def _config_bytes(config: ModelConfig) -> bytes:
    return json.dumps(config.to_dict(), sort_keys=True, indent=2, ensure_ascii=False).encode("utf-8")


def encode_checkpoint(model: VSRModel, lm: TransformerLM | None = None) -> bytes:
    params = list(model.named_parameters())
    if lm is not None:
        if model.config.lm is None:
            raise CheckpointError("model config has no lm section but an LM was given")
        params += [(f"lm.{n}", p) for n, p in lm.named_parameters()]
    cfg = _config_bytes(model.config)
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(cfg)), cfg, struct.pack("<I", len(params))]
    for name, p in params:
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def decode_checkpoint(buf: bytes) -> tuple[ModelConfig, dict[str, np.ndarray]]:
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError("bad magic")
    try:
        version, cfg_len = struct.unpack_from("<II", buf, 8)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 16
        config = ModelConfig.from_dict(json.loads(buf[pos : pos + cfg_len].decode("utf-8")))
        pos += cfg_len
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        params: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4 : pos + 4 + nlen].decode("utf-8")
            pos += 4 + nlen
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise CheckpointError(f"truncated payload for {name}")
            if name in params:
                raise CheckpointError(f"duplicate parameter {name}")
            params[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last parameter")
    return config, params


def save_checkpoint(path, model: VSRModel, lm: TransformerLM | None = None) -> None:
    Path(path).write_bytes(encode_checkpoint(model, lm))


def load_checkpoint(path) -> tuple[VSRModel, TransformerLM | None]:
    config, params = decode_checkpoint(Path(path).read_bytes())
    model = VSRModel(config)
    lm = build_lm(config)
    lm_params = {k[3:]: v for k, v in params.items() if k.startswith("lm.")}
    asr_params = {k: v for k, v in params.items() if not k.startswith("lm.")}
    try:
        model.load_state_dict(asr_params)
        if lm is not None:
            lm.load_state_dict(lm_params)
        elif lm_params:
            raise CheckpointError("checkpoint has LM parameters but no lm config section")
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc
    return model, lm
