"""Multimodal-LLM backend over a locally available Qwen2.5-VL checkpoint.

Requires downloaded model weights plus the ``qwen`` extra (torch and
transformers); nothing here is imported unless the service is configured with
``model = qwen:<checkpoint>``. Scoring runs one forward pass over the
sequence [query visual tokens, candidate visual tokens, prompt tokens] and
reads the final-position logits of the "0" and "1" answer tokens; no
generation, no sampling.
"""

from __future__ import annotations

import numpy as np
from PIL import Image as PilImage

from .backends import TokenPayload, snap_resize
from .config import EFFECTIVE_PATCH


class QwenVlBackend:
    def __init__(self, checkpoint: str, device: str = "cpu"):
        try:
            import torch
            from transformers import AutoProcessor, Qwen2_5_VLForConditionalGeneration
        except ImportError as exc:  # pragma: no cover - needs the qwen extra
            raise RuntimeError(
                "the qwen backend needs the 'qwen' extra (torch + transformers)"
            ) from exc
        self._torch = torch
        self.model_id = f"qwen:{checkpoint}"
        self.device = device
        self.processor = AutoProcessor.from_pretrained(checkpoint)
        self.model = (
            Qwen2_5_VLForConditionalGeneration.from_pretrained(checkpoint, torch_dtype="auto")
            .to(device)
            .eval()
        )
        self.dim = self.model.config.hidden_size
        tokenizer = self.processor.tokenizer
        zero = tokenizer.encode("0", add_special_tokens=False)
        one = tokenizer.encode("1", add_special_tokens=False)
        if len(zero) != 1 or len(one) != 1:
            raise RuntimeError("answer digits must be single tokens for this tokenizer")
        self._zero_id, self._one_id = zero[0], one[0]

    def extract(self, pixels: np.ndarray, resolution: int) -> tuple[TokenPayload, np.ndarray]:
        torch = self._torch
        image = PilImage.fromarray(pixels, mode="RGB")
        out_w, out_h = snap_resize(image.width, image.height, resolution)
        image = image.resize((out_w, out_h), resample=PilImage.BILINEAR)
        inputs = self.processor.image_processor(images=[image], return_tensors="pt")
        with torch.no_grad():
            embeds = self.model.visual(
                inputs["pixel_values"].to(self.device, self.model.dtype),
                grid_thw=inputs["image_grid_thw"].to(self.device),
            )
        tokens = embeds.float().cpu().numpy().astype(np.float32)
        # grid_thw counts pre-merge patches; the merger folds 2x2 windows.
        _, grid_h, grid_w = (int(v) for v in inputs["image_grid_thw"][0])
        rows, cols = grid_h // 2, grid_w // 2
        rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
        positions = np.stack([rr.ravel(), cc.ravel()], axis=1).astype(np.int32)
        pooled = tokens.mean(axis=0)
        norm = np.linalg.norm(pooled)
        return TokenPayload(tokens, positions, rows, cols), (
            pooled / norm if norm > 0 else pooled
        ).astype(np.float32)

    def _position_ids(self, q_len: int, c_len: int, t_len: int, shuffle: str):
        torch = self._torch
        ids = torch.arange(q_len + c_len + t_len)
        if shuffle in ("query", "both"):
            perm = torch.from_numpy(np.random.default_rng(20_240_501).permutation(q_len))
            ids[:q_len] = ids[:q_len][perm]
        if shuffle == "both":
            perm = torch.from_numpy(np.random.default_rng(20_240_501).permutation(c_len))
            ids[q_len : q_len + c_len] = ids[q_len : q_len + c_len][perm]
        # Multimodal rope uses three coordinate channels; text-style indices
        # on every channel keep the pass well-defined for injected tokens.
        return ids.view(1, 1, -1).expand(3, 1, -1).to(self.device)

    def score(
        self,
        query: TokenPayload,
        candidate: TokenPayload,
        prompt_text: str,
        shuffle_positions: str = "off",
    ) -> tuple[float, float]:
        torch = self._torch
        if query.tokens.shape[1] != self.dim or candidate.tokens.shape[1] != self.dim:
            raise ValueError("token dimension does not match the model")
        tokenizer = self.processor.tokenizer
        prompt_ids = tokenizer(prompt_text, return_tensors="pt").input_ids.to(self.device)
        embedder = self.model.get_input_embeddings()
        with torch.no_grad():
            text_embeds = embedder(prompt_ids)
            q = torch.from_numpy(query.tokens).to(self.device, text_embeds.dtype).unsqueeze(0)
            c = torch.from_numpy(candidate.tokens).to(self.device, text_embeds.dtype).unsqueeze(0)
            seq = torch.cat([q, c, text_embeds], dim=1)
            out = self.model(
                inputs_embeds=seq,
                position_ids=self._position_ids(
                    q.shape[1], c.shape[1], text_embeds.shape[1], shuffle_positions
                ),
            )
            logits = out.logits[0, -1]
            return float(logits[self._zero_id]), float(logits[self._one_id])
