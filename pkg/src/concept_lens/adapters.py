"""Adapters for real adapter-based VLMs loaded through ``transformers``.

Weights are read from ``model_path`` (a local directory or hub id supplied
by configuration) the first time activations are requested, so
:meth:`describe` works without any model on disk.

Layer ``k`` is the residual stream after transformer block ``k``; layer 0 is
the embedding output. ``layer_count`` therefore equals blocks + 1.

These adapters need the model weights and are not exercised by the test
suite beyond their descriptors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .backend import Backend, BackendDescriptor, register_backend
from .errors import InputError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelSpec:
    hf_id: str
    hidden_dim: int
    blocks: int
    encoder_resolution: int
    patch_grid: tuple
    pixel_mean: tuple
    pixel_std: tuple
    image_resolution: int = 448


KNOWN_MODELS = {
    "gemma3-4b": ModelSpec("google/gemma-3-4b-it", 2560, 34, 896, (16, 16),
                           (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)),
    "internvl3-8b": ModelSpec("OpenGVLab/InternVL3-8B-hf", 3584, 28, 448, (16, 16),
                              (0.485, 0.456, 0.406), (0.229, 0.224, 0.225)),
}


class HFVisionLanguageAdapter(Backend):
    """A chat VLM whose image tokens enter the language stack as patches.

    Synthesised images are ``image_resolution`` pixels square and are resized
    bilinearly to the encoder's native input inside the differentiable path.
    """

    def __init__(self, name: str, model_path: Optional[str] = None, device: str = "cpu",
                 dtype: torch.dtype = torch.float32, spec: Optional[ModelSpec] = None):
        if spec is None and name not in KNOWN_MODELS:
            raise InputError(f"no model spec for {name!r}")
        self.name = name
        self.spec = spec or KNOWN_MODELS[name]
        self.model_path = model_path
        self.device = device
        self.dtype = dtype
        self._model = None
        self._processor = None
        self._image_prompt = None

    def describe(self) -> BackendDescriptor:
        s = self.spec
        return BackendDescriptor(self.name, s.hidden_dim, s.blocks + 1, s.image_resolution,
                                 s.patch_grid)

    def _load(self):
        if self._model is not None:
            return
        if not self.model_path:
            raise InputError(f"backend {self.name!r} needs model_path (weights are never fetched "
                             f"implicitly; e.g. a local copy of {self.spec.hf_id})")
        from transformers import AutoModelForImageTextToText, AutoProcessor

        log.info("loading %s from %s", self.name, self.model_path)
        self._processor = AutoProcessor.from_pretrained(self.model_path)
        self._model = AutoModelForImageTextToText.from_pretrained(
            self.model_path, torch_dtype=self.dtype).to(self.device).eval()
        for p in self._model.parameters():
            p.requires_grad_(False)

    def _hidden_states(self, **inputs):
        out = self._model(**inputs, output_hidden_states=True, return_dict=True)
        return out.hidden_states

    def token_activations(self, text: str, layer: int) -> torch.Tensor:
        """Activations on the tokens of ``text`` inside a user chat turn.

        Token positions are those whose character offsets overlap the text's
        span in the templated string; role markers are excluded.
        """
        self._load()
        tok = self._processor.tokenizer
        messages = [{"role": "user", "content": [{"type": "text", "text": text}]}]
        templated = self._processor.apply_chat_template(messages, tokenize=False,
                                                        add_generation_prompt=False)
        start = templated.rfind(text)
        if start < 0:
            raise InputError(f"chat template does not contain {text!r} verbatim")
        end = start + len(text)
        enc = tok(templated, return_offsets_mapping=True, add_special_tokens=False,
                  return_tensors="pt")
        offsets = enc.pop("offset_mapping")[0]
        mask = (offsets[:, 0] < end) & (offsets[:, 1] > start)
        with torch.no_grad():
            hs = self._hidden_states(input_ids=enc["input_ids"].to(self.device),
                                     attention_mask=enc["attention_mask"].to(self.device))
        return hs[layer][0][mask.to(hs[layer].device)].to(torch.float64).cpu()

    def _prompt_with_image(self):
        if self._image_prompt is None:
            from PIL import Image

            r = self.spec.encoder_resolution
            messages = [{"role": "user", "content": [{"type": "image"}]}]
            text = self._processor.apply_chat_template(messages, tokenize=False,
                                                       add_generation_prompt=False)
            dummy = Image.new("RGB", (r, r), (128, 128, 128))
            enc = self._processor(text=text, images=dummy, return_tensors="pt")
            cfg = self._model.config
            image_token = getattr(cfg, "image_token_id", None)
            if image_token is None:
                image_token = getattr(cfg, "image_token_index")
            positions = (enc["input_ids"][0] == image_token).nonzero().squeeze(-1)
            if positions.numel() != self.describe().num_patches:
                raise InputError(f"expected {self.describe().num_patches} image tokens, "
                                 f"found {positions.numel()}")
            extra = {k: v for k, v in enc.items() if k not in ("input_ids", "attention_mask",
                                                               "pixel_values")}
            self._image_prompt = (enc["input_ids"], enc["attention_mask"], positions, extra)
        return self._image_prompt

    def _forward_patches(self, images: torch.Tensor, layer: int) -> torch.Tensor:
        self._load()
        ids, attn, positions, extra = self._prompt_with_image()
        b = images.shape[0]
        x = images.permute(0, 3, 1, 2).to(self.device, self.dtype)
        r = self.spec.encoder_resolution
        if x.shape[-1] != r:
            x = F.interpolate(x, size=(r, r), mode="bilinear", align_corners=False)
        mean = torch.tensor(self.spec.pixel_mean, device=x.device, dtype=x.dtype).view(1, 3, 1, 1)
        std = torch.tensor(self.spec.pixel_std, device=x.device, dtype=x.dtype).view(1, 3, 1, 1)
        pixel_values = (x - mean) / std
        hs = self._hidden_states(
            input_ids=ids.expand(b, -1).to(self.device),
            attention_mask=attn.expand(b, -1).to(self.device),
            pixel_values=pixel_values,
            **{k: v.to(self.device) for k, v in extra.items()},
        )
        return hs[layer][:, positions.to(hs[layer].device)].to(torch.float64)


for _name in KNOWN_MODELS:
    register_backend(_name)(lambda _n=_name, **kw: HFVisionLanguageAdapter(_n, **kw))
